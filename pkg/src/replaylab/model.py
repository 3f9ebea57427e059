"""Point-set encoder and the per-sample loss-prediction head."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Node

CHECKPOINT_FORMAT = "replaylab-checkpoint/1"


@dataclass
class EncoderConfig:
    point_dim: int = 3
    mlp_widths: list[int] = field(default_factory=lambda: [32, 64])
    gem_p: float = 3.0
    descriptor_dim: int = 32
    # points arrive in meters; scale them to O(1) before the first layer
    input_scale: float = 0.05

    def __post_init__(self):
        if self.point_dim < 1 or not self.mlp_widths or min(self.mlp_widths) < 1:
            raise ValueError("encoder widths must all be >= 1")
        if self.descriptor_dim < 2:
            raise ValueError("descriptor_dim must be >= 2")
        if self.gem_p < 1:
            raise ValueError("gem_p must be >= 1")

    @property
    def pool_dim(self) -> int:
        return self.mlp_widths[-1]


@dataclass
class HeadConfig:
    hidden: int = 16
    # False keeps the MSE objective from touching encoder weights
    grad_to_backbone: bool = False


def _he(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class Encoder:
    """Shared per-point MLP, GeM pooling, batch norm, linear projection, L2 normalization."""

    def __init__(self, config: EncoderConfig | None = None, seed: int = 0):
        self.config = config or EncoderConfig()
        rng = np.random.default_rng(seed)
        self.params: dict[str, Node] = {}
        fan_in = self.config.point_dim
        for i, width in enumerate(self.config.mlp_widths):
            self.params[f"mlp{i}.weight"] = gc.parameter(_he(rng, fan_in, width))
            # spread first-layer hinges over the scan instead of through the sensor origin
            bias = rng.normal(0.0, 1.0, (1, width)) if i == 0 else np.zeros((1, width))
            self.params[f"mlp{i}.bias"] = gc.parameter(bias)
            fan_in = width
        self.params["pool_bn.gamma"] = gc.parameter(np.ones((1, fan_in)))
        self.params["pool_bn.beta"] = gc.parameter(np.zeros((1, fan_in)))
        self.running_mean = np.zeros((1, fan_in))
        self.running_var = np.ones((1, fan_in))
        self.params["proj.weight"] = gc.parameter(
            rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, self.config.descriptor_dim)))
        self.params["proj.bias"] = gc.parameter(np.zeros((1, self.config.descriptor_dim)))

    def parameters(self) -> list[Node]:
        return list(self.params.values())

    def forward(self, point_sets: Sequence[np.ndarray], train: bool = False) -> tuple[Node, Node]:
        """Embed a batch of point sets; returns (descriptors, pooled) nodes.

        ``train=True`` normalizes pooled features with batch statistics and
        updates the running estimates; eval mode uses the running estimates.
        """
        return _forward(self.params, self.config, point_sets,
                        self.running_mean, self.running_var, train)

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.value.copy() for k, v in self.params.items()}
        out["pool_bn.running_mean"] = self.running_mean.copy()
        out["pool_bn.running_var"] = self.running_var.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        state = dict(state)
        self.running_mean = np.array(state.pop("pool_bn.running_mean"), dtype=np.float64)
        self.running_var = np.array(state.pop("pool_bn.running_var"), dtype=np.float64)
        for k, v in state.items():
            self.params[k].value = np.array(v, dtype=np.float64)


class FrozenEncoder:
    """Read-only copy of an encoder; its forward records no trainable nodes."""

    def __init__(self, config: EncoderConfig, state: dict[str, np.ndarray]):
        self.config = copy.deepcopy(config)
        self._state = {k: v.copy() for k, v in state.items()}
        for v in self._state.values():
            v.setflags(write=False)

    def forward(self, point_sets: Sequence[np.ndarray], train: bool = False) -> tuple[Node, Node]:
        if train:
            raise ValueError("a frozen encoder only runs in eval mode")
        consts = {k: gc.constant(v) for k, v in self._state.items() if not k.startswith("pool_bn.running")}
        return _forward(consts, self.config, point_sets, self._state["pool_bn.running_mean"],
                        self._state["pool_bn.running_var"], False)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._state.items()}


def _forward(params: dict[str, Node], cfg: EncoderConfig, point_sets: Sequence[np.ndarray],
             running_mean: np.ndarray, running_var: np.ndarray, train: bool) -> tuple[Node, Node]:
    if len(point_sets) == 0:
        raise ValueError("no point sets to embed")
    lengths = [len(p) for p in point_sets]
    if min(lengths) < 1:
        raise ValueError("cannot embed an empty point set")
    x = gc.constant(np.vstack(point_sets) * cfg.input_scale)
    for i in range(len(cfg.mlp_widths)):
        x = gc.relu(gc.add(gc.matmul(x, params[f"mlp{i}.weight"]), params[f"mlp{i}.bias"]))
    pooled = gc.gem_pool_segments(x, lengths, cfg.gem_p)
    if train and len(point_sets) < 2:
        raise ValueError("train-mode embedding needs at least two point sets")
    h = gc.batch_norm(pooled, params["pool_bn.gamma"], params["pool_bn.beta"],
                      running_mean, running_var, train=train)
    proj = gc.add(gc.matmul(h, params["proj.weight"]), params["proj.bias"])
    return gc.l2_normalize(proj), pooled


def embed(encoder: Encoder | FrozenEncoder, submap_points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Descriptor [1 x d] and pooled feature [1 x pool_dim] of one point set."""
    points = np.asarray(submap_points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("embed needs a non-empty [n x point_dim] point set")
    desc, pooled = encoder.forward([points])
    return desc.value, pooled.value


def embed_many(encoder, point_sets: Sequence[np.ndarray], chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Inference helper: descriptors and pooled features for many sets, no tape kept."""
    descs, pools = [], []
    for i in range(0, len(point_sets), chunk):
        d, p = encoder.forward(point_sets[i:i + chunk])
        descs.append(d.value)
        pools.append(p.value)
    return np.vstack(descs), np.vstack(pools)


def snapshot(encoder: Encoder | FrozenEncoder) -> FrozenEncoder:
    return FrozenEncoder(encoder.config, encoder.state())


class LossPredictionHead:
    """Linear -> BatchNorm -> ReLU -> Linear regressor of per-sample task loss."""

    def __init__(self, pool_dim: int, config: HeadConfig | None = None, seed: int = 0):
        self.config = config or HeadConfig()
        self.pool_dim = pool_dim
        h = self.config.hidden
        rng = np.random.default_rng(seed)
        self.params: dict[str, Node] = {
            "linear1.weight": gc.parameter(_he(rng, pool_dim, h)),
            "linear1.bias": gc.parameter(np.zeros((1, h))),
            "bn.gamma": gc.parameter(np.ones((1, h))),
            "bn.beta": gc.parameter(np.zeros((1, h))),
            "linear2.weight": gc.parameter(rng.normal(0.0, np.sqrt(1.0 / h), size=(h, 1))),
            "linear2.bias": gc.parameter(np.zeros((1, 1))),
        }
        self.running_mean = np.zeros((1, h))
        self.running_var = np.ones((1, h))

    def parameters(self) -> list[Node]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def forward(self, pooled, train: bool) -> Node:
        x = pooled if self.config.grad_to_backbone else gc.detach(pooled)
        p = self.params
        h = gc.add(gc.matmul(x, p["linear1.weight"]), p["linear1.bias"])
        h = gc.batch_norm(h, p["bn.gamma"], p["bn.beta"], self.running_mean,
                          self.running_var, train=train)
        h = gc.relu(h)
        return gc.add(gc.matmul(h, p["linear2.weight"]), p["linear2.bias"])

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.value.copy() for k, v in self.params.items()}
        out["bn.running_mean"] = self.running_mean.copy()
        out["bn.running_var"] = self.running_var.copy()
        return out


def predict_loss(head: LossPredictionHead, pooled, train: bool = False) -> Node:
    """Raw per-sample loss estimates [b x 1]; may be negative."""
    pooled = pooled if isinstance(pooled, Node) else gc.constant(pooled)
    if train and pooled.shape[0] < 2:
        raise ValueError("loss head in train mode needs at least 2 samples")
    return head.forward(pooled, train=train)


# ---------------------------------------------------------------- checkpoints


def _pack(state: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in state.items()}


def _unpack(blob: dict) -> dict[str, np.ndarray]:
    out = {}
    for k, rec in blob.items():
        arr = np.asarray(rec["data"], dtype=np.float64)
        out[k] = arr.reshape(rec["shape"])
    return out


def save_checkpoint(path: str | Path, encoder: Encoder | FrozenEncoder,
                    head: LossPredictionHead | None = None) -> None:
    """Write a JSON checkpoint.  Floats are serialized with repr, so values round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "encoder_config": asdict(encoder.config),
        "encoder": _pack(encoder.state()),
    }
    if head is not None:
        doc["head_config"] = asdict(head.config)
        doc["head_pool_dim"] = head.pool_dim
        doc["head"] = _pack(head.state())
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[Encoder, LossPredictionHead | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    encoder = Encoder(EncoderConfig(**doc["encoder_config"]))
    encoder.load_state(_unpack(doc["encoder"]))
    head = None
    if "head" in doc:
        head = LossPredictionHead(doc["head_pool_dim"], HeadConfig(**doc["head_config"]))
        state = _unpack(doc["head"])
        head.running_mean = state.pop("bn.running_mean")
        head.running_var = state.pop("bn.running_var")
        for k, v in state.items():
            head.params[k].value = v
    return encoder, head
