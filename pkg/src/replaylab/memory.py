"""Replay memory: loss-weighted exemplar selection and per-domain quotas."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Submap, pair_batch
from .losses import DegenerateBatchError, LossConfig, triplet_batch_hard

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-6


@dataclass
class MemoryEntry:
    anchor: Submap
    positive: Submap
    domain_id: int
    stored_old_loss: float = 0.0
    insertion_pred_loss: float = 0.0
    insertion_step: int = 0

    @property
    def pair(self) -> tuple[Submap, Submap]:
        return self.anchor, self.positive


def sampling_probabilities(pred_losses: Sequence[float]) -> np.ndarray:
    """Predicted losses -> selection probabilities (floored at 1e-6, then normalized)."""
    w = np.asarray(pred_losses, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("no losses to normalize")
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite predicted loss")
    w = np.maximum(w, WEIGHT_FLOOR)
    return w / w.sum()


def select_exemplars(candidates: Sequence, pred_losses: Sequence[float], k: int,
                     rng: np.random.Generator) -> list:
    """Weighted sampling of ``k`` distinct candidates without replacement.

    Uses exponential keys: item i gets ``-ln(u_i) / p_i`` and the ``k``
    smallest keys win, which reproduces successive draws proportional to
    ``p_i``.
    """
    n = len(candidates)
    if len(pred_losses) != n:
        raise ValueError(f"{n} candidates but {len(pred_losses)} weights")
    if k > n:
        raise ValueError(f"cannot select {k} of {n} candidates")
    if k <= 0:
        return []
    p = sampling_probabilities(pred_losses)
    keys = -np.log(rng.random(n)) / p
    chosen = np.argsort(keys, kind="stable")[:k]
    return [candidates[i] for i in chosen]


def domain_quotas(capacity: int, n_domains: int) -> list[int]:
    """ceil(S/T) slots for the first S mod T domains, floor(S/T) for the rest."""
    if n_domains < 1:
        return []
    base, extra = divmod(capacity, n_domains)
    return [base + 1 if i < extra else base for i in range(n_domains)]


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.domains: dict[int, list[MemoryEntry]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.domains.values())

    def entries(self) -> list[MemoryEntry]:
        return [e for v in self.domains.values() for e in v]

    def counts(self) -> dict[int, int]:
        return {d: len(v) for d, v in self.domains.items()}

    def dump(self, path: str | Path) -> None:
        doc = {
            "capacity": self.capacity,
            "domains": list(self.domains),
            "entries": [
                {"anchor_id": e.anchor.id, "positive_id": e.positive.id,
                 "domain_id": e.domain_id, "stored_old_loss": e.stored_old_loss,
                 "insertion_pred_loss": e.insertion_pred_loss,
                 "insertion_step": e.insertion_step}
                for e in self.entries()
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")

    @classmethod
    def restore(cls, path: str | Path, submaps: Mapping[int, Submap]) -> "ReplayBuffer":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        buf = cls(int(doc["capacity"]))
        for d in doc.get("domains", []):
            buf.domains[int(d)] = []
        for r in doc["entries"]:
            e = MemoryEntry(submaps[r["anchor_id"]], submaps[r["positive_id"]], int(r["domain_id"]),
                            float(r["stored_old_loss"]), float(r["insertion_pred_loss"]),
                            int(r["insertion_step"]))
            buf.domains.setdefault(e.domain_id, []).append(e)
        return buf


def _pick(candidates: list[MemoryEntry], pred_losses: Sequence[float], k: int,
          rng: np.random.Generator, loss_aware: bool) -> list[MemoryEntry]:
    if k < len(candidates) and not loss_aware:
        idx = rng.choice(len(candidates), size=k, replace=False)
        return [candidates[i] for i in sorted(idx)]
    return select_exemplars(candidates, pred_losses, k, rng)


def update_after_domain(buffer: ReplayBuffer, new_candidates: Sequence[MemoryEntry],
                        new_pred_losses: Sequence[float], T: int | None,
                        rng: np.random.Generator, loss_aware: bool = True,
                        policy: str = "equal_domain") -> None:
    """Admit one new domain and rebalance.

    ``equal_domain``: every stored domain is cut to its quota by uniform
    random removal, then the new domain is filled to its quota by weighted
    selection.  ``max_replacement``: the new domain takes ceil(S/T) slots;
    each insertion into a full buffer evicts a random entry of the currently
    largest domain.
    """
    new_candidates = list(new_candidates)
    if len(new_pred_losses) != len(new_candidates):
        raise ValueError("one predicted loss per candidate required")
    new_domain = new_candidates[0].domain_id if new_candidates else max(buffer.domains, default=0) + 1
    order = [d for d in buffer.domains if d != new_domain] + [new_domain]
    if T is not None and T != len(order):
        raise ValueError(f"T={T} but the update leaves {len(order)} domains")
    quotas = dict(zip(order, domain_quotas(buffer.capacity, len(order))))
    want = quotas[new_domain]
    if len(new_candidates) < want:
        log.warning("domain %d offers %d candidates for a quota of %d; taking all",
                    new_domain, len(new_candidates), want)
    if policy == "equal_domain":
        for d in order[:-1]:
            kept = buffer.domains[d]
            if len(kept) > quotas[d]:
                idx = np.sort(rng.choice(len(kept), size=quotas[d], replace=False))
                buffer.domains[d] = [kept[i] for i in idx]
        take = min(want, len(new_candidates))
        buffer.domains[new_domain] = _pick(new_candidates, new_pred_losses, take, rng, loss_aware)
    elif policy == "max_replacement":
        take = min(math.ceil(buffer.capacity / len(order)), len(new_candidates))
        chosen = _pick(new_candidates, new_pred_losses, take, rng, loss_aware)
        buffer.domains[new_domain] = []
        for e in chosen:
            if len(buffer) >= buffer.capacity:
                biggest = max(buffer.domains, key=lambda d: len(buffer.domains[d]))
                victims = buffer.domains[biggest]
                victims.pop(int(rng.integers(len(victims))))
            buffer.domains[new_domain].append(e)
    else:
        raise ValueError(f"unknown memory policy {policy!r}")


def sample_replay_batch(buffer: ReplayBuffer, batch_pairs: int,
                        rng: np.random.Generator) -> list[MemoryEntry]:
    entries = buffer.entries()
    if not entries:
        raise ValueError("replay batch requested from an empty buffer")
    replace = len(entries) < batch_pairs
    idx = rng.choice(len(entries), size=batch_pairs, replace=replace)
    return [entries[i] for i in idx]


def memory_anchor_losses(encoder, entries: Sequence[MemoryEntry], margin: float,
                         neg_threshold: float):
    """Per-entry triplet loss of each memory anchor inside one memory batch.

    Positives come from the stored pair; negatives from the other entries.
    Returns ``(result, descriptors)``; ``result`` is ``None`` when no entry
    has a usable negative.  Anchor row ``r`` belongs to entry ``r // 2``.
    """
    batch = pair_batch([e.pair for e in entries], neg_threshold)
    desc, _ = encoder.forward(batch.points)
    try:
        res = triplet_batch_hard(desc, batch.labels, margin, batch.neg_mask,
                                 anchors=batch.anchor_rows)
    except DegenerateBatchError:
        return None, desc
    return res, desc


def refresh_old_losses(buffer: ReplayBuffer, encoder, loss_cfg: LossConfig,
                       neg_threshold: float, rng: np.random.Generator,
                       chunk_pairs: int = 8) -> None:
    """Store each entry's current task loss as its reference for rehearsal.

    Losses are computed over random memory-only chunks of ``chunk_pairs``
    entries so the stored values match the batch size used in training.
    """
    entries = buffer.entries()
    if len(entries) < 2:
        return
    perm = rng.permutation(len(entries))
    chunks = [perm[i:i + chunk_pairs] for i in range(0, len(perm), chunk_pairs)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    for chunk in chunks:
        group = [entries[i] for i in chunk]
        res, _ = memory_anchor_losses(encoder, group, loss_cfg.triplet_margin, neg_threshold)
        if res is None:
            continue
        for row, val in zip(res.anchors, res.values):
            group[row // 2].stored_old_loss = float(val)
