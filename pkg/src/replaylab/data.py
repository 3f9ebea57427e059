"""Synthetic multi-domain place-recognition benchmark.

Each domain is a grid of places.  A place is a fixed set of pole-like
landmarks spread along a corridor; every place is scanned twice (pass A and
pass B) from slightly different capture positions.  Domains differ in sensor
yaw, noise, landmark dropout and clutter.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MIN_POINTS = 16
ID_STRIDE = 100_000


@dataclass(eq=False)
class Submap:
    id: int
    domain_id: int
    split: str        # "train" | "test"
    pass_id: str      # "A" | "B"
    place_xy: tuple[float, float]
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.split not in ("train", "test") or self.pass_id not in ("A", "B"):
            raise ValueError(f"submap {self.id}: bad split/pass tag")
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < MIN_POINTS:
            raise ValueError(f"submap {self.id}: need an [n x 3] cloud with n >= {MIN_POINTS}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"submap {self.id}: non-finite coordinates")
        self.place_xy = (float(self.place_xy[0]), float(self.place_xy[1]))

    def __eq__(self, other):
        if not isinstance(other, Submap):
            return NotImplemented
        return (self.id == other.id and self.domain_id == other.domain_id
                and self.split == other.split and self.pass_id == other.pass_id
                and self.place_xy == other.place_xy
                and np.array_equal(self.points, other.points))

    __hash__ = None


@dataclass
class DomainSpec:
    domain_id: int = 0
    num_places: int = 200
    area_side: float = 1000.0
    landmarks_per_place: int = 8
    points_per_submap: int = 128
    noise_sigma: float = 0.15
    rotation: float = 0.0
    dropout_rate: float = 0.05
    clutter_rate: float = 0.05
    seed: int = 0
    corridor_length: float = 50.0
    corridor_width: float = 12.0
    pole_height: tuple[float, float] = (2.0, 4.0)
    pass_offset_sigma: float = 0.5
    yaw_jitter: float = 0.02
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.num_places < 2 or self.landmarks_per_place < 2:
            raise ValueError("need >= 2 places and >= 2 landmarks per place")
        if self.points_per_submap < MIN_POINTS:
            raise ValueError(f"points_per_submap must be >= {MIN_POINTS}")
        if self.area_side <= 0 or self.noise_sigma < 0:
            raise ValueError("area_side must be > 0 and noise_sigma >= 0")
        if not (0 <= self.dropout_rate < 1 and 0 <= self.clutter_rate < 1):
            raise ValueError("dropout_rate and clutter_rate must lie in [0, 1)")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        lo, hi = self.pole_height
        if not 0 <= lo <= hi:
            raise ValueError("bad pole_height range")


@dataclass
class ProtocolSpec:
    domains: list[DomainSpec] = field(default_factory=list)
    pos_threshold_train: float = 10.0
    neg_threshold_train: float = 50.0
    pos_threshold_test: float = 25.0

    def __post_init__(self):
        if not self.pos_threshold_train < self.neg_threshold_train:
            raise ValueError("positive threshold must be below the negative threshold")
        if not self.domains:
            self.domains = default_domains()


def default_domains(seed: int = 0, n: int = 4) -> list[DomainSpec]:
    """Four-domain sequence with distinct sensor yaw and degradation profiles."""
    shifts = [
        dict(rotation=0.0, noise_sigma=0.12, dropout_rate=0.05, clutter_rate=0.05),
        dict(rotation=math.pi / 2, noise_sigma=0.18, dropout_rate=0.08, clutter_rate=0.08),
        dict(rotation=math.pi / 4, noise_sigma=0.15, dropout_rate=0.05, clutter_rate=0.10),
        dict(rotation=3 * math.pi / 4, noise_sigma=0.20, dropout_rate=0.10, clutter_rate=0.05),
    ]
    return [DomainSpec(domain_id=i + 1, seed=seed * 1000 + i + 1, **shifts[i % len(shifts)])
            for i in range(n)]


# ---------------------------------------------------------------- generation


def _place_centers(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    side = math.ceil(math.sqrt(spec.num_places))
    spacing = spec.area_side / side
    cells = np.array([(i, j) for i in range(side) for j in range(side)][:spec.num_places], float)
    jitter = rng.uniform(-0.1 * spacing, 0.1 * spacing, size=cells.shape)
    return (cells + 0.5) * spacing + jitter


def _landmarks(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """[k x 3] per place: corridor-relative x, y and pole height."""
    k = spec.landmarks_per_place
    x = rng.uniform(-spec.corridor_length / 2, spec.corridor_length / 2, k)
    y = rng.uniform(-spec.corridor_width / 2, spec.corridor_width / 2, k)
    h = rng.uniform(*spec.pole_height, k)
    return np.stack([x, y, h], axis=1)


def sample_scan(rng: np.random.Generator, landmarks: np.ndarray, spec: DomainSpec,
                offset: np.ndarray, yaw: float) -> tuple[np.ndarray, np.ndarray]:
    """One scan of a place, in the sensor frame.

    Returns the points and a boolean mask marking clutter points.
    """
    k = len(landmarks)
    visible = rng.random(k) >= spec.dropout_rate
    if visible.sum() < 2:
        visible[rng.choice(k, 2, replace=False)] = True
    lm = landmarks[visible]
    n = spec.points_per_submap
    n_clutter = rng.binomial(n, spec.clutter_rate)
    which = rng.integers(0, len(lm), n - n_clutter)
    pole = np.stack([lm[which, 0], lm[which, 1],
                     rng.uniform(0.0, 1.0, len(which)) * lm[which, 2]], axis=1)
    pole += rng.normal(0.0, spec.noise_sigma, pole.shape)
    half_l, half_w = spec.corridor_length / 2 + 5, spec.corridor_width / 2 + 5
    clutter = np.stack([rng.uniform(-half_l, half_l, n_clutter),
                        rng.uniform(-half_w, half_w, n_clutter),
                        rng.uniform(0.0, 2.0, n_clutter)], axis=1)
    pts = np.vstack([pole, clutter])
    is_clutter = np.r_[np.zeros(len(pole), bool), np.ones(n_clutter, bool)]
    pts[:, :2] -= offset
    c, s = math.cos(yaw), math.sin(yaw)
    xy = pts[:, :2] @ np.array([[c, s], [-s, c]])
    pts = np.column_stack([xy, pts[:, 2]])
    order = rng.permutation(n)
    return pts[order], is_clutter[order]


def generate_domain(spec: DomainSpec) -> list[Submap]:
    """Deterministic dataset for one domain: two passes per place, split by place."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = _place_centers(spec, rng)
    layouts = [_landmarks(spec, rng) for _ in range(spec.num_places)]
    n_test = max(1, round(spec.test_fraction * spec.num_places))
    test_places = set(rng.permutation(spec.num_places)[:n_test].tolist())
    out = []
    for place in range(spec.num_places):
        split = "test" if place in test_places else "train"
        for k, pass_id in enumerate("AB"):
            offset = rng.normal(0.0, spec.pass_offset_sigma, 2)
            yaw = spec.rotation + rng.normal(0.0, spec.yaw_jitter)
            pts, _ = sample_scan(rng, layouts[place], spec, offset, yaw)
            out.append(Submap(
                id=spec.domain_id * ID_STRIDE + 2 * place + k,
                domain_id=spec.domain_id, split=split, pass_id=pass_id,
                place_xy=tuple(centers[place] + offset), points=pts))
    return out


def split_sets(submaps: Iterable[Submap], split: str) -> tuple[list[Submap], list[Submap]]:
    """(database = pass A, queries = pass B) of one split."""
    subset = [s for s in submaps if s.split == split]
    return [s for s in subset if s.pass_id == "A"], [s for s in subset if s.pass_id == "B"]


# ---------------------------------------------------------------- pairs


def negative_mask(xy_a: np.ndarray, dom_a: np.ndarray, xy_b: np.ndarray, dom_b: np.ndarray,
                  neg_threshold: float) -> np.ndarray:
    """True where two submaps may serve as each other's negative.

    Submaps from different domains are always eligible; within a domain the
    capture positions must be farther apart than ``neg_threshold``.
    """
    d = np.linalg.norm(xy_a[:, None, :] - xy_b[None, :, :], axis=-1)
    return (d > neg_threshold) | (dom_a[:, None] != dom_b[None, :])


@dataclass
class TrainingPairs:
    pairs: list[tuple[Submap, Submap]]
    submaps: list[Submap]
    neg_eligible: np.ndarray   # [n x n] over ``submaps``


def build_training_pairs(train: Sequence[Submap], pos_threshold: float,
                         neg_threshold: float) -> TrainingPairs:
    """Anchor (pass A) / positive (nearest pass B within ``pos_threshold``) pairs."""
    if not pos_threshold < neg_threshold:
        raise ValueError("positive threshold must be below the negative threshold")
    train = list(train)
    xy = np.array([s.place_xy for s in train]).reshape(-1, 2)
    dom = np.array([s.domain_id for s in train])
    d = np.linalg.norm(xy[:, None] - xy[None], axis=-1) if train else np.zeros((0, 0))
    pairs = []
    for i, s in enumerate(train):
        if s.pass_id != "A":
            continue
        cand = [j for j, t in enumerate(train)
                if t.pass_id == "B" and t.domain_id == s.domain_id and d[i, j] <= pos_threshold]
        if not cand:
            log.warning("submap %d has no cross-pass positive within %.1f m; skipped",
                        s.id, pos_threshold)
            continue
        j = min(cand, key=lambda c: (d[i, c], train[c].id))
        pairs.append((s, train[j]))
    elig = negative_mask(xy, dom, xy, dom, neg_threshold) if train else np.zeros((0, 0), bool)
    return TrainingPairs(pairs, train, elig)


@dataclass
class PairBatch:
    """Flattened pair batch: rows are [a0, p0, a1, p1, ...]."""
    points: list[np.ndarray]
    labels: np.ndarray
    neg_mask: np.ndarray
    anchor_rows: np.ndarray

    def __len__(self):
        return len(self.points)


def pair_batch(pairs: Sequence[tuple[Submap, Submap]], neg_threshold: float) -> PairBatch:
    flat = [s for pair in pairs for s in pair]
    xy = np.array([s.place_xy for s in flat])
    dom = np.array([s.domain_id for s in flat])
    return PairBatch(
        points=[s.points for s in flat],
        labels=np.repeat(np.arange(len(pairs)), 2),
        neg_mask=negative_mask(xy, dom, xy, dom, neg_threshold),
        anchor_rows=np.arange(0, len(flat), 2),
    )


# ---------------------------------------------------------------- IO


class DatasetFormatError(ValueError):
    pass


def _record(s: Submap) -> dict:
    return {"id": s.id, "domain": s.domain_id, "split": s.split, "pass": s.pass_id,
            "x": s.place_xy[0], "y": s.place_xy[1], "points": s.points.tolist()}


def save_dataset(path: str | Path, submaps: Iterable[Submap]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in submaps:
            fh.write(json.dumps(_record(s)) + "\n")


def load_dataset(path: str | Path) -> list[Submap]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                out.append(Submap(id=int(r["id"]), domain_id=int(r["domain"]), split=r["split"],
                                  pass_id=r["pass"], place_xy=(r["x"], r["y"]),
                                  points=np.asarray(r["points"], dtype=np.float64)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return out
