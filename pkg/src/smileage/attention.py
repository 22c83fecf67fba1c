"""Spatial gating of convolutional feature maps and temporal attention pooling."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, einsum, stack


class Mechanism(str, enum.Enum):
    """How the two attention layers share weights across feature-map entries."""

    SPATIALLY_AGNOSTIC = "spatially_agnostic"  # W shared, u shared
    FULLY_SPATIALLY_INDEXED = "fully_spatially_indexed"  # W per entry, u per entry
    MEDIATE_SPATIALLY_INDEXED = "mediate_spatially_indexed"  # W shared, u per entry
    SPATIALLY_INDEXED = "spatially_indexed"  # W per entry, u shared

    @property
    def per_entry_first_layer(self) -> bool:
        return self in (Mechanism.FULLY_SPATIALLY_INDEXED, Mechanism.SPATIALLY_INDEXED)

    @property
    def per_entry_fusion(self) -> bool:
        return self in (Mechanism.FULLY_SPATIALLY_INDEXED, Mechanism.MEDIATE_SPATIALLY_INDEXED)


MECHANISMS = tuple(m.value for m in Mechanism)


def spatial_param_count(mechanism: Mechanism | str, grid: tuple[int, int], channels: int, hidden: int) -> int:
    m = Mechanism(mechanism)
    cells = grid[0] * grid[1]
    d, C = hidden, channels
    first = (d * C + d) * (cells if m.per_entry_first_layer else 1)
    fusion = d * (cells if m.per_entry_fusion else 1)
    return first + fusion + 1


@dataclass
class SpatialAttentionParams:
    mechanism: Mechanism
    weight: Tensor  # [d, C] or [M, N, d, C]
    bias: Tensor  # [d] or [M, N, d]
    fusion: Tensor  # [d] or [M, N, d]
    fusion_bias: Tensor  # scalar
    grid: tuple[int, int]
    channels: int
    hidden: int

    def __post_init__(self):
        self.mechanism = Mechanism(self.mechanism)
        M, N = self.grid
        d, C = self.hidden, self.channels
        lead = (M, N) if self.mechanism.per_entry_first_layer else ()
        fuse = (M, N) if self.mechanism.per_entry_fusion else ()
        expected = {
            "weight": lead + (d, C),
            "bias": lead + (d,),
            "fusion": fuse + (d,),
            "fusion_bias": (),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{self.mechanism.value}: {name} has shape {got}, expected {shape}")
        count = sum(t.size for t in self.tensors().values())
        if count != spatial_param_count(self.mechanism, self.grid, C, d):
            raise ShapeError("parameter count does not match the mechanism's closed form")

    @classmethod
    def init(
        cls,
        mechanism: Mechanism | str,
        grid: tuple[int, int],
        channels: int,
        hidden: int = 64,
        rng: np.random.Generator | int | None = None,
        scale: float = 0.05,
    ) -> "SpatialAttentionParams":
        """Uniform(+-scale) weights so every gate starts near 0.5."""
        rng = np.random.default_rng(rng)
        m = Mechanism(mechanism)
        M, N = grid
        lead = (M, N) if m.per_entry_first_layer else ()
        fuse = (M, N) if m.per_entry_fusion else ()

        def u(*shape):
            return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)

        return cls(
            mechanism=m,
            weight=u(*lead, hidden, channels),
            bias=Tensor(np.zeros(lead + (hidden,)), requires_grad=True),
            fusion=u(*fuse, hidden),
            fusion_bias=Tensor(0.0, requires_grad=True),
            grid=(M, N),
            channels=channels,
            hidden=hidden,
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias, "fusion": self.fusion, "fusion_bias": self.fusion_bias}


@dataclass
class TemporalAttentionParams:
    weight: Tensor  # M: [n', n]
    bias: Tensor  # b: [n']
    fusion: Tensor  # v: [n']
    fusion_bias: Tensor  # c: scalar

    def __post_init__(self):
        hidden, n = self.weight.shape
        if hidden < 1:
            raise ShapeError("temporal attention width must be >= 1")
        if self.bias.shape != (hidden,) or self.fusion.shape != (hidden,) or self.fusion_bias.shape != ():
            raise ShapeError("temporal attention parameter shapes are inconsistent")

    @property
    def state_size(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, n: int, hidden: int | None = None, rng=None, scale: float = 0.05) -> "TemporalAttentionParams":
        hidden = math.ceil(n / 2) if hidden is None else hidden
        rng = np.random.default_rng(rng)
        return cls(
            weight=Tensor(rng.uniform(-scale, scale, size=(hidden, n)), requires_grad=True),
            bias=Tensor(np.zeros(hidden), requires_grad=True),
            fusion=Tensor(rng.uniform(-scale, scale, size=hidden), requires_grad=True),
            fusion_bias=Tensor(0.0, requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias, "fusion": self.fusion, "fusion_bias": self.fusion_bias}


@dataclass
class AttentionMap:
    kind: str  # "spatial" or "temporal"
    weights: np.ndarray
    frame_index: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.kind not in ("spatial", "temporal"):
            raise ValueError(f"unknown attention map kind {self.kind!r}")

    def to_pgm(self, path: str | Path) -> Path:
        """Write a spatial map as plain-text 8-bit PGM (P2), min-max normalized."""
        if self.kind != "spatial":
            raise ValueError("only spatial maps export to PGM")
        return write_pgm(self.weights, path)

    def to_csv(self, path: str | Path) -> Path:
        if self.kind != "temporal":
            raise ValueError("only temporal maps export to CSV")
        path = Path(path)
        lines = ["frame_index,weight"] + [f"{t},{w!r}" for t, w in enumerate(self.weights.tolist())]
        path.write_text("\n".join(lines) + "\n")
        return path


def write_pgm(grid: np.ndarray, path: str | Path) -> Path:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("PGM export needs a 2-D grid")
    lo, hi = grid.min(), grid.max()
    scaled = np.zeros(grid.shape) if hi - lo <= 0 else (grid - lo) / (hi - lo)
    pixels = np.rint(scaled * 255).astype(int)
    rows = [" ".join(str(v) for v in row) for row in pixels]
    path = Path(path)
    path.write_text(f"P2\n{grid.shape[1]} {grid.shape[0]}\n255\n" + "\n".join(rows) + "\n")
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() if not line.startswith("#") for t in line.split()]
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM file")
    width, height, _maxval = (int(t) for t in tokens[1:4])
    return np.array([int(t) for t in tokens[4:]], dtype=int).reshape(height, width)


def spatial_attention_forward(features: Tensor, params: SpatialAttentionParams) -> tuple[Tensor, Tensor]:
    """Gate ``features[..., M, N, C]`` by a per-entry weight in (0, 1).

    Returns the gated features and the attention grid ``[..., M, N]``.
    """
    features = as_tensor(features)
    if features.shape[-3:-1] != tuple(params.grid) or features.shape[-1] != params.channels:
        raise ShapeError(
            f"feature map {features.shape} does not match attention grid {params.grid} x {params.channels}"
        )
    m = params.mechanism
    if m.per_entry_first_layer:
        pre = einsum("...mnc,mndc->...mnd", features, params.weight)
    else:
        pre = einsum("...mnc,dc->...mnd", features, params.weight)
    hidden = (pre + params.bias).tanh()
    if m.per_entry_fusion:
        score = (hidden * params.fusion).sum(axis=-1)
    else:
        score = einsum("...mnd,d->...mn", hidden, params.fusion)
    weights = (score + params.fusion_bias).sigmoid()
    gated = features * weights.reshape(weights.shape + (1,))
    return gated, weights


def temporal_attention_scores(states: Tensor | Sequence[Tensor], params: TemporalAttentionParams) -> Tensor:
    """Per-frame relevance in (0, 1) for hidden states ``[..., T, n]``."""
    if not isinstance(states, Tensor):
        if len(states) == 0:
            raise ValueError("temporal attention needs at least one frame")
        states = stack(states, axis=-2)
    if states.shape[-2] == 0:
        raise ValueError("temporal attention needs at least one frame")
    if states.shape[-1] != params.state_size:
        raise ShapeError(f"hidden states of size {states.shape[-1]}, attention expects {params.state_size}")
    hidden = (einsum("...tn,hn->...th", states, params.weight) + params.bias).tanh()
    return (einsum("...th,h->...t", hidden, params.fusion) + params.fusion_bias).sigmoid()


def temporal_normalize(scores: Tensor) -> Tensor:
    """Divide scores by their sum over the last (time) axis."""
    scores = as_tensor(scores)
    return scores / scores.sum(axis=-1, keepdims=True)


def temporal_summary(states: Tensor | Sequence[Tensor], weights: Tensor) -> Tensor:
    """Weighted sum ``sum_t o_t z_t`` of hidden states ``[..., T, n]``."""
    if not isinstance(states, Tensor):
        states = stack(states, axis=-2)
    weights = as_tensor(weights)
    if states.shape[-2] != weights.shape[-1]:
        raise ShapeError(f"{states.shape[-2]} hidden states but {weights.shape[-1]} weights")
    return einsum("...tn,...t->...n", states, weights)
