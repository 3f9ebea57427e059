"""Retrieval Recall@1 and the continual-learning summary metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Submap
from .model import embed_many

CONVENTIONS = ("eq8-literal", "standard")


def recall_from_descriptors(q_desc: np.ndarray, q_xy: np.ndarray, db_desc: np.ndarray,
                            db_xy: np.ndarray, threshold: float,
                            db_ids: Sequence[int] | None = None) -> tuple[float, np.ndarray]:
    """Percent of queries whose top-1 cosine neighbour lies within ``threshold`` meters.

    Ties in similarity go to the lowest database id.  Also returns the
    per-query success flags.
    """
    db_desc = np.asarray(db_desc, dtype=np.float64)
    if len(db_desc) == 0:
        raise ValueError("empty database")
    q_desc = np.asarray(q_desc, dtype=np.float64)
    if len(q_desc) == 0:
        return 0.0, np.zeros(0, bool)
    ids = np.arange(len(db_desc)) if db_ids is None else np.asarray(db_ids)
    by_id = np.argsort(ids, kind="stable")
    sims = q_desc @ db_desc[by_id].T
    top = by_id[sims.argmax(axis=1)]   # argmax keeps the first of equal maxima
    dist = np.linalg.norm(np.asarray(q_xy)[:, :2] - np.asarray(db_xy)[top, :2], axis=1)
    hits = dist <= threshold
    return 100.0 * hits.mean(), hits


def recall_at_1(queries: Sequence[Submap], database: Sequence[Submap], model,
                pos_threshold_test: float) -> float:
    if not database:
        raise ValueError("empty database")
    if not queries:
        return 0.0
    q_desc, _ = embed_many(model, [s.points for s in queries])
    db_desc, _ = embed_many(model, [s.points for s in database])
    r, _ = recall_from_descriptors(
        q_desc, np.array([s.place_xy for s in queries]),
        db_desc, np.array([s.place_xy for s in database]),
        pos_threshold_test, [s.id for s in database])
    return r


def mean_recall(r) -> float:
    r = np.asarray(r, dtype=np.float64)
    return float(r[-1].mean())


def forgetting(r, convention: str = "eq8-literal") -> float | None:
    """Average drop from each earlier task's best recall to its final recall.

    ``eq8-literal`` takes the best over steps 1..t for task t, zero-shot
    entries included; ``standard`` takes it over steps t..T-1.
    """
    r = np.asarray(r, dtype=np.float64)
    T = r.shape[0]
    if T < 2:
        return None
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}")
    drops = []
    for t in range(T - 1):
        best = r[:t + 1, t].max() if convention == "eq8-literal" else r[t:T - 1, t].max()
        drops.append(best - r[T - 1, t])
    return float(np.mean(drops))


@dataclass
class MetricsReport:
    mr_at_1: float
    forgetting: float | None
    final_recalls: list[float]
    convention: str = "eq8-literal"


def report(r, convention: str = "eq8-literal") -> MetricsReport:
    r = np.asarray(r, dtype=np.float64)
    return MetricsReport(mean_recall(r), forgetting(r, convention), r[-1].tolist(), convention)


# ---------------------------------------------------------------- CSV


def write_rmatrix_csv(path: str | Path, r) -> None:
    r = np.asarray(r, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "task", "recall_at_1"])
        for l in range(r.shape[0]):
            for t in range(r.shape[1]):
                w.writerow([l + 1, t + 1, repr(float(r[l, t]))])


def read_rmatrix_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    T = max(int(x["step"]) for x in rows)
    n = max(int(x["task"]) for x in rows)
    r = np.full((T, n), np.nan)
    for x in rows:
        r[int(x["step"]) - 1, int(x["task"]) - 1] = float(x["recall_at_1"])
    return r


SUMMARY_HEADER = ["method", "seed", "mr_at_1", "forgetting"]


def summary_row(method: str, seed: int, rep: MetricsReport) -> list:
    f = "" if rep.forgetting is None else repr(rep.forgetting)
    return [method, seed, repr(rep.mr_at_1), f]
