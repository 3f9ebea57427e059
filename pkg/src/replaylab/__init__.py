"""Continual metric-learning lab: loss-aware replay memory, rehearsal hinge,
experience replay, and Recall@1 / forgetting evaluation on synthetic
multi-domain place-recognition data."""

__version__ = "0.1.0"
