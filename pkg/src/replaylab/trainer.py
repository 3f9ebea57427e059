"""Continual training protocol: initial domain, replay steps, ablation switches."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .data import PairBatch, ProtocolSpec, Submap, build_training_pairs, pair_batch, split_sets
from .eval import recall_at_1
from .gradcore import Node
from .losses import (DegenerateBatchError, LossConfig, kd_loss, loss_pred_mse,
                     rehearsal_loss, total_objective, triplet_batch_hard)
from .memory import (MemoryEntry, ReplayBuffer, refresh_old_losses, sample_replay_batch,
                     update_after_domain)
from .model import (Encoder, EncoderConfig, FrozenEncoder, HeadConfig, LossPredictionHead,
                    embed_many, predict_loss, save_checkpoint, snapshot)

log = logging.getLogger(__name__)

METHODS = ("finetune", "kdf_plus")
ABLATIONS = {
    "none": {},
    "no-loss-aware": {"sampling": "random"},
    "no-rehearsal": {"rehearsal_enabled": False},
    "mix": {"replay_mode": "mix"},
    "no-experience-replay": {"replay_mode": "mix"},
    "max-replacement": {"memory_policy": "max_replacement"},
    "no-equal-domain": {"memory_policy": "max_replacement"},
}


@dataclass
class OptimConfig:
    learning_rate: float = 3e-3
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    head_lr_ratio: float = 0.5
    epochs_per_step: int = 20
    batch_start: int = 16
    batch_growth: float = 1.4
    batch_cap: int = 256
    expansion_threshold: float = 0.7
    # replay pairs per current-domain pair in experience replay
    replay_ratio: float = 1.0

    def __post_init__(self):
        positive = [self.learning_rate, self.lr_drop_factor, self.head_lr_ratio,
                    self.epochs_per_step, self.batch_start, self.batch_growth,
                    self.batch_cap, self.expansion_threshold, self.replay_ratio]
        if min(positive) <= 0 or self.weight_decay < 0:
            raise ValueError("optimizer settings must be positive")
        if self.batch_start > self.batch_cap:
            raise ValueError("batch_start exceeds batch_cap")
        if self.batch_start < 4:
            raise ValueError("batch_start must hold at least two pairs")

    def lr_at(self, epoch: int) -> float:
        """Backbone learning rate; drops once at half of the epochs."""
        if epoch < self.epochs_per_step / 2:
            return self.learning_rate
        return self.learning_rate * self.lr_drop_factor


@dataclass
class StrategyConfig:
    method: str = "kdf_plus"
    sampling: str = "loss_aware"              # loss_aware | random
    rehearsal_enabled: bool = True
    replay_mode: str = "experience_replay"    # experience_replay | mix
    memory_policy: str = "equal_domain"       # equal_domain | max_replacement
    kd_variant: str | None = None             # None: take LossConfig.kd_variant
    selection_source: str = "predicted"       # predicted | true
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        checks = {"sampling": ("loss_aware", "random"),
                  "replay_mode": ("experience_replay", "mix"),
                  "memory_policy": ("equal_domain", "max_replacement"),
                  "selection_source": ("predicted", "true")}
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")

    @property
    def continual(self) -> bool:
        return self.method != "finetune"

    @classmethod
    def from_ablation(cls, name: str, **kw) -> "StrategyConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return cls(**{**kw, **ABLATIONS[name]})


class Adam:
    """Adam with coupled L2 weight decay (decay added to the gradient)."""

    def __init__(self, params: Sequence[Node], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        gc.zero_grad(self.params)


@dataclass
class TrainState:
    encoder: Encoder
    head: LossPredictionHead
    enc_opt: Adam
    head_opt: Adam
    buffer: ReplayBuffer
    strategy: StrategyConfig
    optim: OptimConfig
    losses: LossConfig
    neg_threshold: float
    pos_threshold: float
    rng: np.random.Generator
    snapshot: FrozenEncoder | None = None
    step: int = 0
    batch_size: int = 16
    last_active_fraction: float = 1.0
    history: list[dict] = field(default_factory=list)

    @property
    def kd_variant(self) -> str:
        return self.strategy.kd_variant or self.losses.kd_variant


def init_state(seed: int, strategy: StrategyConfig, optim: OptimConfig, losses: LossConfig,
               capacity: int, protocol: ProtocolSpec,
               encoder_cfg: EncoderConfig | None = None,
               head_cfg: HeadConfig | None = None) -> TrainState:
    encoder = Encoder(encoder_cfg, seed=seed)
    head = LossPredictionHead(encoder.config.pool_dim, head_cfg, seed=seed + 7919)
    betas = (optim.beta1, optim.beta2)
    return TrainState(
        encoder=encoder, head=head,
        enc_opt=Adam(encoder.parameters(), optim.learning_rate, betas, optim.eps, optim.weight_decay),
        head_opt=Adam(head.parameters(), optim.learning_rate * optim.head_lr_ratio, betas,
                      optim.eps, optim.weight_decay),
        buffer=ReplayBuffer(capacity), strategy=strategy, optim=optim, losses=losses,
        neg_threshold=protocol.neg_threshold_train, pos_threshold=protocol.pos_threshold_train,
        rng=np.random.default_rng(seed), batch_size=optim.batch_start,
    )


def next_batch_size(size: int, active_fraction: float, optim: OptimConfig) -> int:
    if active_fraction < optim.expansion_threshold:
        return min(optim.batch_cap, math.floor(size * optim.batch_growth))
    return size


def batch_size_schedule(state: TrainState) -> int:
    """Advance ``state.batch_size`` from the last epoch's active-triplet fraction."""
    state.batch_size = next_batch_size(state.batch_size, state.last_active_fraction, state.optim)
    return state.batch_size


def _set_lr(state: TrainState, epoch: int) -> None:
    lr = state.optim.lr_at(epoch)
    state.enc_opt.lr = lr
    state.head_opt.lr = lr * state.optim.head_lr_ratio


def _chunks(items: list, size: int) -> list[list]:
    out = [items[i:i + size] for i in range(0, len(items), size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2].extend(out.pop())
    return [c for c in out if len(c) >= 2]


def _train_pairs(submaps: Sequence[Submap], state: TrainState) -> list[tuple[Submap, Submap]]:
    train = [s for s in submaps if s.split == "train"]
    if not train:
        raise ValueError("domain has no training submaps")
    pairs = build_training_pairs(train, state.pos_threshold, state.neg_threshold).pairs
    if len(pairs) < 2:
        raise ValueError("domain yields fewer than two training pairs")
    return pairs


def _head_step(state: TrainState, pooled: Node, trip) -> Node:
    """Loss-head MSE on the anchors that produced a task loss."""
    pred = predict_loss(state.head, gc.select_rows(pooled, trip.anchors), train=True)
    return loss_pred_mse(pred, trip.values)


def _apply(state: TrainState, *objectives: Node) -> None:
    for obj in objectives:
        if obj is not None:
            gc.backward(obj)
    state.enc_opt.step()
    state.head_opt.step()
    state.enc_opt.zero_grad()
    state.head_opt.zero_grad()


def _predicted_losses(state: TrainState, pairs: Sequence[tuple[Submap, Submap]]) -> list[float]:
    """Selection weights for candidate pairs: head estimate (or true loss) per anchor."""
    if state.strategy.selection_source == "true":
        vals = np.zeros(len(pairs))
        size = max(2, state.optim.batch_start // 2)
        for idx in _chunks(list(range(len(pairs))), size):
            b = pair_batch([pairs[i] for i in idx], state.neg_threshold)
            desc, _ = state.encoder.forward(b.points)
            try:
                trip = triplet_batch_hard(desc, b.labels, state.losses.triplet_margin,
                                          b.neg_mask, anchors=b.anchor_rows)
            except DegenerateBatchError:
                continue
            for row, v in zip(trip.anchors, trip.values):
                vals[idx[row // 2]] = v
        return vals.tolist()
    _, pooled = embed_many(state.encoder, [a.points for a, _ in pairs])
    return predict_loss(state.head, pooled, train=False).value[:, 0].tolist()


def _admit_domain(state: TrainState, pairs, domain_id: int) -> None:
    preds = _predicted_losses(state, pairs)
    cands = [MemoryEntry(a, p, domain_id, insertion_pred_loss=float(w), insertion_step=state.step)
             for (a, p), w in zip(pairs, preds)]
    n_domains = len([d for d in state.buffer.domains if d != domain_id]) + 1
    update_after_domain(state.buffer, cands, preds, n_domains, state.rng,
                        loss_aware=state.strategy.sampling == "loss_aware",
                        policy=state.strategy.memory_policy)
    refresh_old_losses(state.buffer, state.encoder, state.losses, state.neg_threshold,
                       state.rng, chunk_pairs=_replay_pairs(state, state.optim.batch_start // 2))


def _replay_pairs(state: TrainState, cur_pairs: int) -> int:
    return max(2, round(cur_pairs * state.optim.replay_ratio))


def train_initial_domain(state: TrainState, domain: Sequence[Submap]) -> None:
    """First step: task loss + loss-head MSE, then seed the replay memory."""
    if state.step != 0 or len(state.buffer):
        raise ValueError("initial-domain training must run first, on an empty buffer")
    pairs = _train_pairs(domain, state)
    state.step = 1
    state.batch_size = state.optim.batch_start
    m = state.losses.triplet_margin
    for epoch in range(state.optim.epochs_per_step):
        _set_lr(state, epoch)
        order = [pairs[i] for i in state.rng.permutation(len(pairs))]
        active, stats = [], []
        for chunk in _chunks(order, max(2, state.batch_size // 2)):
            b = pair_batch(chunk, state.neg_threshold)
            desc, pooled = state.encoder.forward(b.points, train=True)
            trip = triplet_batch_hard(desc, b.labels, m, b.neg_mask)
            mse = _head_step(state, pooled, trip)
            _apply(state, trip.mean, mse)
            active.append(trip.active_fraction)
            stats.append((trip.mean.item(), mse.item()))
        state.last_active_fraction = float(np.mean(active))
        state.history.append({"step": 1, "epoch": epoch, "batch_size": state.batch_size,
                              "l_pr": float(np.mean([s[0] for s in stats])),
                              "l_mse": float(np.mean([s[1] for s in stats])),
                              "active_fraction": state.last_active_fraction})
        batch_size_schedule(state)
    domain_id = pairs[0][0].domain_id
    _admit_domain(state, pairs, domain_id)


@dataclass
class IterationTape:
    """Nodes of one incremental iteration, kept for inspection."""
    descriptors: Node
    cur_rows: np.ndarray
    mem_rows: np.ndarray
    l_pr: Node
    l_kd: Node | None
    l_rehearsal: Node | None
    total: Node
    mse: Node
    active_fraction: float
    breakdown: object


def incremental_iteration(state: TrainState, cur_pairs: Sequence[tuple[Submap, Submap]],
                          mem_entries: Sequence[MemoryEntry], lam: float,
                          pr_includes_memory: bool = False) -> IterationTape:
    """Build the loss tape for one mixed batch (no parameter update).

    L_PR uses the current-domain rows only, unless ``pr_includes_memory``
    (the "mix" ablation) folds memory pairs into the task batch.  L_KD and
    the rehearsal hinge use the memory rows only.
    """
    cfg = state.losses
    all_pairs = list(cur_pairs) + [e.pair for e in mem_entries]
    nc, nm = 2 * len(cur_pairs), 2 * len(mem_entries)
    batch = pair_batch(all_pairs, state.neg_threshold)
    desc, pooled = state.encoder.forward(batch.points, train=True)
    cur_rows = np.arange(nc)
    mem_rows = np.arange(nc, nc + nm)
    pr_rows = np.arange(nc + nm) if pr_includes_memory else cur_rows
    pr_desc = gc.select_rows(desc, pr_rows)
    trip = triplet_batch_hard(pr_desc, batch.labels[pr_rows], cfg.triplet_margin,
                              batch.neg_mask[np.ix_(pr_rows, pr_rows)])
    l_kd = l_reh = None
    if nm and state.strategy.continual:
        mem_desc = gc.select_rows(desc, mem_rows)
        mem_batch = PairBatch([batch.points[i] for i in mem_rows], batch.labels[mem_rows],
                              batch.neg_mask[np.ix_(mem_rows, mem_rows)], np.arange(0, nm, 2))
        if lam > 0 and state.kd_variant != "none" and nm >= 3:
            old_desc, _ = state.snapshot.forward(mem_batch.points)
            l_kd = kd_loss(state.kd_variant, old_desc.value, mem_desc, cfg.ranking_delta)
        if state.strategy.rehearsal_enabled and cfg.omega > 0:
            try:
                mtrip = triplet_batch_hard(mem_desc, mem_batch.labels, cfg.triplet_margin,
                                           mem_batch.neg_mask, anchors=mem_batch.anchor_rows)
                old = [mem_entries[r // 2].stored_old_loss for r in mtrip.anchors]
                l_reh = rehearsal_loss(old, mtrip.per_anchor, cfg.rehearsal_margin)
            except DegenerateBatchError:
                l_reh = None
    total, br = total_objective(trip.mean, l_kd, l_reh, cfg, lam=lam)
    # the head learns from current-domain anchors only
    full_idx = pr_rows[trip.anchors]
    cur_mask = full_idx < nc
    head_anchors = full_idx[cur_mask]
    if head_anchors.size >= 2:
        pred = predict_loss(state.head, gc.select_rows(pooled, head_anchors), train=True)
        mse = loss_pred_mse(pred, np.asarray(trip.values)[cur_mask])
    else:
        mse = None
    br.l_losspred_mse = mse.item() if mse is not None else 0.0
    br.per_anchor_pr = trip.values
    return IterationTape(desc, cur_rows, mem_rows, trip.mean, l_kd, l_reh, total, mse,
                         trip.active_fraction, br)


def train_incremental_step(state: TrainState, domain: Sequence[Submap]) -> None:
    """One continual step on a new domain (experience replay or plain fine-tuning)."""
    if state.step < 1:
        raise ValueError("run train_initial_domain first")
    pairs = _train_pairs(domain, state)
    domain_id = pairs[0][0].domain_id
    state.snapshot = snapshot(state.encoder)
    state.step += 1
    state.batch_size = state.optim.batch_start
    strat = state.strategy
    use_memory = strat.continual
    if use_memory and not len(state.buffer):
        raise ValueError("experience replay needs a non-empty buffer")
    E = state.optim.epochs_per_step
    for epoch in range(E):
        _set_lr(state, epoch)
        lam = state.losses.lambda_at(epoch, E) if use_memory else 0.0
        per_batch = max(2, state.batch_size // 2)
        if use_memory and strat.replay_mode == "mix":
            pool = [(p, None) for p in pairs] + [(e.pair, e) for e in state.buffer.entries()]
            order = [pool[i] for i in state.rng.permutation(len(pool))]
            batches = []
            for chunk in _chunks(order, per_batch):
                cur = [p for p, e in chunk if e is None]
                mem = [e for _, e in chunk if e is not None]
                batches.append((cur, mem))
        else:
            order = [pairs[i] for i in state.rng.permutation(len(pairs))]
            batches = []
            for chunk in _chunks(order, per_batch):
                mem = (sample_replay_batch(state.buffer, _replay_pairs(state, len(chunk)), state.rng)
                       if use_memory else [])
                batches.append((chunk, mem))
        active, rows = [], []
        for cur, mem in batches:
            try:
                tape = incremental_iteration(state, cur, mem, lam,
                                             pr_includes_memory=strat.replay_mode == "mix")
            except DegenerateBatchError:
                continue
            _apply(state, tape.total, tape.mse)
            active.append(tape.active_fraction)
            rows.append(tape.breakdown)
        state.last_active_fraction = float(np.mean(active)) if active else 1.0
        state.history.append({
            "step": state.step, "epoch": epoch, "batch_size": state.batch_size,
            "l_pr": float(np.mean([r.l_pr for r in rows])) if rows else 0.0,
            "l_kd": float(np.mean([r.l_kd for r in rows])) if rows else 0.0,
            "l_rehearsal": float(np.mean([r.l_rehearsal for r in rows])) if rows else 0.0,
            "l_mse": float(np.mean([r.l_losspred_mse for r in rows])) if rows else 0.0,
            "active_fraction": state.last_active_fraction,
        })
        batch_size_schedule(state)
    _admit_domain(state, pairs, domain_id)


# ---------------------------------------------------------------- protocol


@dataclass
class ProtocolResult:
    r_matrix: np.ndarray
    wall_times: list[float]
    state: TrainState


def evaluate_all(model, test_sets: Sequence[tuple[list[Submap], list[Submap]]],
                 threshold: float) -> list[float]:
    return [recall_at_1(q, db, model, threshold) for db, q in test_sets]


def run_protocol(protocol: ProtocolSpec, strategy: StrategyConfig, optim: OptimConfig,
                 losses: LossConfig, capacity: int = 64, seed: int = 0,
                 load_domain: Callable[[int], list[Submap]] | None = None,
                 encoder_cfg: EncoderConfig | None = None,
                 out_dir: str | Path | None = None,
                 on_step_end: Callable[[int, TrainState], None] | None = None) -> ProtocolResult:
    """Train through every domain in order, filling one R-matrix row per step.

    ``load_domain(t)`` (0-based) returns domain t's submaps.  Each domain's
    data is requested once, up front for its test split and again only when
    its own training step begins; nothing from earlier domains is re-read
    except through the replay buffer.
    """
    from .data import generate_domain

    if load_domain is None:
        def load_domain(t):
            return generate_domain(protocol.domains[t])
    T = len(protocol.domains)
    state = init_state(seed, strategy, optim, losses, capacity, protocol, encoder_cfg)
    test_sets = []
    for t in range(T):
        db, q = split_sets(load_domain(t), "test")
        test_sets.append((db, q))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    r = np.zeros((T, T))
    wall = []
    for t in range(T):
        t0 = time.perf_counter()
        try:
            domain = [s for s in load_domain(t) if s.split == "train"]
            if t == 0:
                train_initial_domain(state, domain)
            else:
                train_incremental_step(state, domain)
            del domain
        except Exception as exc:
            raise RuntimeError(f"step {t + 1} failed: {exc}") from exc
        r[t] = evaluate_all(state.encoder, test_sets, protocol.pos_threshold_test)
        wall.append(time.perf_counter() - t0)
        log.info("step %d done in %.1fs: R=%s", t + 1, wall[-1], np.round(r[t], 2).tolist())
        if out is not None:
            save_checkpoint(out / f"checkpoint_step{t + 1}.json", state.encoder, state.head)
            state.buffer.dump(out / f"buffer_step{t + 1}.json")
        if on_step_end is not None:
            on_step_end(t, state)
    return ProtocolResult(r, wall, state)
