"""Training objectives: triplet task loss, loss-prediction MSE, rehearsal hinge,
embedding distillation, and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Node

KD_VARIANTS = ("ranking_surrogate", "pairwise_distance", "feature_l2", "none")
LAMBDA_SCHEDULES = ("constant", "linear_decay")


@dataclass
class LossConfig:
    triplet_margin: float = 0.2
    rehearsal_margin: float = 0.1
    lambda_kd: float = 1.0
    lambda_schedule: str = "constant"
    omega: float = 0.08
    # "ranking_surrogate" stands in for a ranking-aware distillation term;
    # it is our own hinge formulation, see kd_loss.
    kd_variant: str = "ranking_surrogate"
    ranking_delta: float = 0.01

    def __post_init__(self):
        if self.triplet_margin < 0 or self.rehearsal_margin < 0:
            raise ValueError("margins must be >= 0")
        if self.lambda_kd < 0 or self.omega < 0:
            raise ValueError("lambda and omega must be >= 0")
        if self.kd_variant not in KD_VARIANTS:
            raise ValueError(f"unknown kd_variant {self.kd_variant!r}")
        if self.lambda_schedule not in LAMBDA_SCHEDULES:
            raise ValueError(f"unknown lambda_schedule {self.lambda_schedule!r}")

    def lambda_at(self, epoch: int, epochs: int) -> float:
        if self.lambda_schedule == "linear_decay" and epochs > 0:
            return self.lambda_kd * max(0.0, 1.0 - epoch / epochs)
        return self.lambda_kd


@dataclass
class LossBreakdown:
    l_pr: float = 0.0
    l_kd: float = 0.0
    l_rehearsal: float = 0.0
    l_losspred_mse: float = 0.0
    l_total: float = 0.0
    per_anchor_pr: list[float] = field(default_factory=list)


@dataclass
class TripletResult:
    per_anchor: Node      # [k x 1], one hinge per contributing anchor
    anchors: np.ndarray   # row index of each contributing anchor
    mean: Node
    active_fraction: float

    @property
    def values(self) -> list[float]:
        return self.per_anchor.value[:, 0].tolist()


class DegenerateBatchError(ValueError):
    """No anchor in the batch has both a positive and a negative."""


def triplet_batch_hard(descriptors: Node, place_labels: Sequence, margin: float,
                       neg_mask: np.ndarray | None = None,
                       anchors: Sequence[int] | None = None) -> TripletResult:
    """Batch-hard triplet margin loss in cosine distance (1 - cos).

    Positives share a label with the anchor; negatives have a different
    label and, when ``neg_mask`` is given, must also be marked eligible in
    it (gray-zone pairs are neither).  ``anchors`` restricts which rows act
    as anchors; by default every row does.
    """
    descriptors = descriptors if isinstance(descriptors, Node) else gc.constant(descriptors)
    labels = np.asarray(place_labels)
    b = descriptors.shape[0]
    if b < 2 or labels.shape[0] != b:
        raise ValueError("triplet loss needs >= 2 rows and one label per row")
    dist = gc.add_scalar(gc.scale(gc.matmul(descriptors, gc.transpose(descriptors)), -1.0), 1.0)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(b, dtype=bool)
    pos = same & ~eye
    neg = ~same
    if neg_mask is not None:
        neg &= np.asarray(neg_mask, dtype=bool)
    rows = np.arange(b) if anchors is None else np.asarray(anchors, dtype=np.intp)
    valid = pos[rows].any(axis=1) & neg[rows].any(axis=1)
    rows = rows[valid]
    if rows.size == 0:
        raise DegenerateBatchError("no anchor has both a positive and a negative")
    d = dist.value
    hard_pos = np.where(pos[rows], d[rows], -np.inf).argmax(axis=1)
    hard_neg = np.where(neg[rows], d[rows], np.inf).argmin(axis=1)
    per_anchor = gc.hinge(gc.add_scalar(
        gc.sub(gc.take(dist, rows, hard_pos), gc.take(dist, rows, hard_neg)), margin))
    active = float(np.mean(per_anchor.value > 0))
    return TripletResult(per_anchor, rows, gc.mean_all(per_anchor), active)


def loss_pred_mse(predicted: Node, target_per_anchor: Sequence[float]) -> Node:
    target = np.asarray(target_per_anchor, dtype=np.float64).reshape(-1, 1)
    if predicted.shape != target.shape:
        raise ValueError(f"prediction shape {predicted.shape} vs {target.shape[0]} targets")
    return gc.mean_all(gc.sqdiff(predicted, gc.constant(target)))


def rehearsal_loss(l_pr_old: Sequence[float], l_pr_new, m: float) -> Node:
    """mean_i max(0, m - (old_i - new_i)); old values are stored constants."""
    old = np.asarray(l_pr_old, dtype=np.float64).reshape(-1, 1)
    new = l_pr_new if isinstance(l_pr_new, Node) else gc.constant(
        np.asarray(l_pr_new, dtype=np.float64).reshape(-1, 1))
    if new.shape != old.shape:
        raise ValueError(f"{old.shape[0]} old losses vs {new.shape[0]} new losses")
    if not np.all(np.isfinite(old)):
        raise ValueError("non-finite stored loss")
    return gc.mean_all(gc.hinge(gc.add_scalar(gc.sub(new, gc.constant(old)), m)))


def ranking_hinge(s_new: Node, s_old: np.ndarray, delta: float) -> Node:
    """Mean over ordered triples (a, i, j), all distinct, with s_old[a,i] > s_old[a,j], of
    max(0, s_new[a,j] - s_new[a,i] + min(delta, s_old[a,i] - s_old[a,j])).

    Capping the margin at the old gap makes the loss vanish when the new
    similarities equal the old ones.  Evaluated densely over a [b, b, b] grid.
    """
    b = s_old.shape[0]
    gap = s_old[:, :, None] - s_old[:, None, :]          # [a, i, j]
    idx = np.arange(b)
    distinct = ((idx[:, None, None] != idx[None, :, None])
                & (idx[:, None, None] != idx[None, None, :])
                & (idx[None, :, None] != idx[None, None, :]))
    counted = distinct & (gap > 0)
    n = int(counted.sum())
    if n == 0:
        return gc.constant(0.0)
    sv = s_new.value
    z = sv[:, None, :] - sv[:, :, None] + np.minimum(delta, gap)
    active = counted & (z > 0)
    value = np.where(active, z, 0.0).sum() / n

    def vjp(g):
        w = active * (g[0, 0] / n)
        return (w.sum(axis=1) - w.sum(axis=2),)

    return gc.make_node(np.array([[value]]), "ranking_hinge", (s_new,), vjp)


def kd_loss(variant: str, old_desc, new_desc: Node, delta: float = 0.01) -> Node:
    """Distillation between frozen-model descriptors and live descriptors."""
    old = old_desc.value if isinstance(old_desc, Node) else np.asarray(old_desc, dtype=np.float64)
    if variant not in KD_VARIANTS:
        raise ValueError(f"unknown kd variant {variant!r}")
    if old.shape != new_desc.shape:
        raise ValueError(f"descriptor shapes differ: {old.shape} vs {new_desc.shape}")
    b = old.shape[0]
    if variant == "none":
        return gc.constant(0.0)
    if variant == "feature_l2":
        return gc.mean_all(gc.sqdiff(new_desc, gc.constant(old)))
    s_old = old @ old.T
    s_new = gc.matmul(new_desc, gc.transpose(new_desc))
    if variant == "pairwise_distance":
        if b < 2:
            raise ValueError("pairwise_distance distillation needs b >= 2")
        r, c = np.nonzero(~np.eye(b, dtype=bool))
        return gc.mean_all(gc.sqdiff(gc.take(s_new, r, c), gc.constant(s_old[r, c][:, None])))
    if b < 3:
        raise ValueError("ranking distillation needs b >= 3")
    return ranking_hinge(s_new, s_old, delta)


def total_objective(l_pr: Node, l_kd: Node | None, l_rehearsal: Node | None,
                    cfg: LossConfig, lam: float | None = None,
                    l_mse: Node | None = None) -> tuple[Node, LossBreakdown]:
    """pr + lambda * kd + omega * rehearsal.  The MSE term is reported, not added."""
    lam = cfg.lambda_kd if lam is None else lam
    if lam < 0 or cfg.omega < 0:
        raise ValueError("lambda and omega must be >= 0")
    total = l_pr
    if l_kd is not None and lam != 0:
        total = gc.add(total, gc.scale(l_kd, lam))
    if l_rehearsal is not None and cfg.omega != 0:
        total = gc.add(total, gc.scale(l_rehearsal, cfg.omega))
    br = LossBreakdown(
        l_pr=l_pr.item(),
        l_kd=l_kd.item() if l_kd is not None else 0.0,
        l_rehearsal=l_rehearsal.item() if l_rehearsal is not None else 0.0,
        l_losspred_mse=l_mse.item() if l_mse is not None else 0.0,
        l_total=total.item(),
    )
    return total, br
