"""Finite-difference oracle shared by the gradient tests."""

import numpy as np

FD_STEP = 1e-5
# gradients smaller than this are compared in absolute terms
GRAD_FLOOR = 1e-6


def numeric_grad(loss_fn, param, step=FD_STEP):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``param``."""
    out = np.zeros_like(param.value)
    for idx in np.ndindex(param.value.shape):
        old = param.value[idx]
        param.value[idx] = old + step
        hi = loss_fn().item()
        param.value[idx] = old - step
        lo = loss_fn().item()
        param.value[idx] = old
        out[idx] = (hi - lo) / (2 * step)
    return out


def rel_error(analytic, numeric):
    """max |a - n| over the matrix, relative to its largest gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), GRAD_FLOOR)
    return float(np.abs(analytic - numeric).max() / scale)


def structural_zero(name):
    """Biases feeding a train-mode batch norm cancel exactly: true gradient 0."""
    return name == "linear1.bias"


def composite_problem(seed, widths=(4, 5), hidden=3, pairs=4, points=12):
    """Small encoder + loss head wired through every training objective.

    Returns ``(loss_fn, params)`` where ``params`` maps names to the trainable
    nodes of both networks.  The head receives backbone gradients so the
    whole composition is covered by one finite-difference check.
    """
    from replaylab import gradcore as gc
    from replaylab.losses import kd_loss, loss_pred_mse, rehearsal_loss, triplet_batch_hard
    from replaylab.model import Encoder, EncoderConfig, HeadConfig, LossPredictionHead, predict_loss

    rng = np.random.default_rng(seed)
    enc = Encoder(EncoderConfig(mlp_widths=list(widths), descriptor_dim=3), seed=seed)
    head = LossPredictionHead(enc.config.pool_dim, HeadConfig(hidden=hidden, grad_to_backbone=True),
                              seed=seed + 1)
    # random biases keep pre-activations off the relu kink at exactly 0
    for k, v in enc.params.items():
        if k.startswith("mlp") and k.endswith("bias"):
            v.value = rng.normal(0.0, 0.5, v.shape)
    sets = [rng.normal(0.0, 10.0, size=(points, 3)) for _ in range(2 * pairs)]
    labels = np.repeat(np.arange(pairs), 2)
    half = pairs  # rows [0, half) current domain, [half, 2*pairs) memory
    old = rng.normal(size=(2 * pairs - half, 3))
    old /= np.linalg.norm(old, axis=1, keepdims=True)
    stored = rng.uniform(0.0, 0.4, size=(2 * pairs - half) // 2)
    targets = rng.uniform(0.0, 0.6, size=half)

    def loss_fn():
        desc, pooled = enc.forward(sets, train=True)
        cur = gc.select_rows(desc, np.arange(half))
        mem = gc.select_rows(desc, np.arange(half, 2 * pairs))
        trip = triplet_batch_hard(cur, labels[:half], 2.5)
        kd = kd_loss("ranking_surrogate", old, mem, 0.05)
        mtrip = triplet_batch_hard(mem, labels[half:], 2.5, anchors=np.arange(0, 2 * pairs - half, 2))
        reh = rehearsal_loss(stored[mtrip.anchors // 2], mtrip.per_anchor, 1.0)
        pred = predict_loss(head, gc.select_rows(pooled, trip.anchors), train=True)
        # fixed targets: in training they are detached task losses
        mse = loss_pred_mse(pred, targets[:len(trip.anchors)])
        total = gc.add(gc.add(gc.add(trip.mean, gc.scale(kd, 0.7)), gc.scale(reh, 0.3)), mse)
        return total

    params = {**{f"encoder.{k}": v for k, v in enc.params.items()},
              **{f"head.{k}": v for k, v in head.params.items()}}
    return loss_fn, params
