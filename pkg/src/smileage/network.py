"""Attended CNN-RNN regressor for age estimation from expression videos.

Per frame: three conv layers (ReLU, LRN + max-pool after the first two) with a
spatial attention gate embedded after one of them, then two fully-connected
layers. The per-frame features drive a two-layer ReLU RNN whose top-layer states
are pooled with temporal attention and fed to a linear regressor.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import functional as fn
from .attention import (
    AttentionMap,
    Mechanism,
    SpatialAttentionParams,
    TemporalAttentionParams,
    spatial_attention_forward,
    spatial_param_count,
    temporal_attention_scores,
    temporal_normalize,
    temporal_summary,
)
from .tensor import ShapeError, Tensor, no_grad, stack

VARIANTS = ("cnn_only", "cnn_rnn", "cnn_rnn_spatial", "full")

MAGIC = b"SMAGEPAR"
RELU_BIAS = 0.1
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults reproduce the full-size network."""

    input_size: int = 114
    in_channels: int = 1
    conv_channels: tuple[int, int, int] = (128, 256, 256)
    conv_kernels: tuple[int, int, int] = (7, 5, 3)
    conv_strides: tuple[int, int, int] = (2, 1, 1)
    conv_padding: tuple[int, int, int] = (3, 2, 1)
    pool: int = 2
    fc1: int = 4096
    hidden: int = 128
    mechanism: str = Mechanism.SPATIALLY_INDEXED.value
    attn_layer: int = 2
    attn_after_pool: bool = False
    attn_hidden: int = 64
    temporal_hidden: int | None = None
    variant: str = "full"
    lrn_n: int = 5
    lrn_k: float = 2.0
    lrn_alpha: float = 1e-4
    lrn_beta: float = 0.75

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "conv_kernels", tuple(self.conv_kernels))
        object.__setattr__(self, "conv_strides", tuple(self.conv_strides))
        object.__setattr__(self, "conv_padding", tuple(self.conv_padding))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.attn_layer not in (1, 2, 3):
            raise ValueError("attn_layer must be 1, 2 or 3")
        Mechanism(self.mechanism)
        for name, shape in self.stage_shapes().items():
            if min(shape) < 1:
                raise ShapeError(f"stage {name} has non-positive shape {shape}")

    @property
    def has_spatial(self) -> bool:
        return self.variant in ("cnn_rnn_spatial", "full")

    @property
    def has_rnn(self) -> bool:
        return self.variant != "cnn_only"

    @property
    def has_temporal(self) -> bool:
        return self.variant == "full"

    @property
    def temporal_width(self) -> int:
        return math.ceil(self.hidden / 2) if self.temporal_hidden is None else self.temporal_hidden

    def stage_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-frame activation shape after every stage of the appearance network."""
        shapes: dict[str, tuple[int, ...]] = {"input": (self.input_size, self.input_size, self.in_channels)}
        size = self.input_size
        for i in range(3):
            size = fn.conv_output_size(size, self.conv_kernels[i], self.conv_strides[i], self.conv_padding[i])
            shapes[f"conv{i + 1}"] = (size, size, self.conv_channels[i])
            if i < 2:
                size = fn.conv_output_size(size, self.pool, self.pool, 0)
                shapes[f"pool{i + 1}"] = (size, size, self.conv_channels[i])
        shapes["flatten"] = (size * size * self.conv_channels[2],)
        shapes["fc1"] = (self.fc1,)
        shapes["fc2"] = (self.hidden,)
        return shapes

    def attention_grid(self) -> tuple[int, int, int]:
        """(M, N, C) of the feature map the spatial attention gates."""
        shapes = self.stage_shapes()
        key = f"conv{self.attn_layer}"
        if self.attn_after_pool and self.attn_layer < 3:
            key = f"pool{self.attn_layer}"
        return shapes[key]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def scaled_config(scale: float = 1 / 16, input_size: int = 16, **overrides) -> ModelConfig:
    """Shrink every width by ``scale`` (keeping kernels, strides and paddings)."""
    base = ModelConfig()

    def s(v: int) -> int:
        return max(1, int(round(v * scale)))

    cfg = dict(
        input_size=input_size,
        conv_channels=tuple(s(c) for c in base.conv_channels),
        fc1=s(base.fc1),
        hidden=s(base.hidden),
        attn_hidden=s(base.attn_hidden),
    )
    cfg.update(overrides)
    return ModelConfig(**cfg)


def toy_config(**overrides) -> ModelConfig:
    """16x16 input with widths scaled by 1/16: the desk-scale configuration."""
    return scaled_config(1 / 16, 16, **overrides)


def expected_param_count(config: ModelConfig) -> int:
    """Closed-form number of learnable scalars for ``config``."""
    total = 0
    cin = config.in_channels
    for k, c in zip(config.conv_kernels, config.conv_channels):
        total += k * k * cin * c + c
        cin = c
    shapes = config.stage_shapes()
    total += shapes["flatten"][0] * config.fc1 + config.fc1
    total += config.fc1 * config.hidden + config.hidden
    n = config.hidden
    if config.has_spatial:
        M, N, C = config.attention_grid()
        total += spatial_param_count(config.mechanism, (M, N), C, config.attn_hidden)
    if config.has_rnn:
        total += 2 * (n * n + n * n + n)
    if config.has_temporal:
        h = config.temporal_width
        total += h * n + h + h + 1
    total += n + 1
    return total


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _const(*shape: int, value: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


class ModelParams:
    """Ordered collection of named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], seed: int | None = None):
        self.config = config
        self.tensors = dict(tensors)
        self.seed = seed
        count = sum(t.size for t in self.tensors.values())
        if count != expected_param_count(config):
            raise ShapeError(f"parameter count {count} != closed form {expected_param_count(config)}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int | None = 0, gain: float = 1.0,
             relu_bias: float = RELU_BIAS) -> "ModelParams":
        """Glorot-uniform weights (times ``gain``); ReLU-layer biases start at ``relu_bias``.

        Attention parameters are drawn from a narrow uniform, the regressor bias is zero.
        """
        rng = np.random.default_rng(seed)
        t: dict[str, Tensor] = {}
        cin = config.in_channels
        for i, (k, c) in enumerate(zip(config.conv_kernels, config.conv_channels), start=1):
            t[f"conv{i}.weight"] = _glorot(rng, (k, k, cin, c), k * k * cin, k * k * c, gain)
            t[f"conv{i}.bias"] = _const(c, value=relu_bias)
            cin = c
        flat = config.stage_shapes()["flatten"][0]
        t["fc1.weight"] = _glorot(rng, (config.fc1, flat), flat, config.fc1, gain)
        t["fc1.bias"] = _const(config.fc1, value=relu_bias)
        t["fc2.weight"] = _glorot(rng, (config.hidden, config.fc1), config.fc1, config.hidden, gain)
        t["fc2.bias"] = _const(config.hidden, value=relu_bias)
        n = config.hidden
        if config.has_spatial:
            M, N, C = config.attention_grid()
            sp = SpatialAttentionParams.init(config.mechanism, (M, N), C, config.attn_hidden, rng=rng)
            for name, tensor in sp.tensors().items():
                t[f"spatial.{name}"] = tensor
        if config.has_rnn:
            for layer in (1, 2):
                t[f"rnn{layer}.W"] = _glorot(rng, (n, n), n, n, gain)
                t[f"rnn{layer}.V"] = _glorot(rng, (n, n), n, n, gain)
                t[f"rnn{layer}.b"] = _const(n, value=relu_bias)
        if config.has_temporal:
            tp = TemporalAttentionParams.init(n, config.temporal_width, rng=rng)
            for name, tensor in tp.tensors().items():
                t[f"temporal.{name}"] = tensor
        t["regressor.k"] = _glorot(rng, (n,), n, 1)
        t["regressor.b"] = Tensor(0.0, requires_grad=True)
        return cls(config, t, seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def group(self, name: str) -> str:
        """Module a parameter belongs to (``conv1``, ``spatial``, ``rnn2``, ...)."""
        return name.split(".", 1)[0]

    def spatial(self) -> SpatialAttentionParams:
        M, N, C = self.config.attention_grid()
        return SpatialAttentionParams(
            mechanism=Mechanism(self.config.mechanism),
            weight=self["spatial.weight"],
            bias=self["spatial.bias"],
            fusion=self["spatial.fusion"],
            fusion_bias=self["spatial.fusion_bias"],
            grid=(M, N),
            channels=C,
            hidden=self.config.attn_hidden,
        )

    def temporal(self) -> TemporalAttentionParams:
        return TemporalAttentionParams(
            weight=self["temporal.weight"],
            bias=self["temporal.bias"],
            fusion=self["temporal.fusion"],
            fusion_bias=self["temporal.fusion_bias"],
        )

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
            self.seed,
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.tensors[k].data = np.array(v, dtype=np.float64)

    # persistence ------------------------------------------------------------
    def save(self, path: str | Path) -> Path:
        """Write the little-endian checkpoint format described in docs/formats.md."""
        header = {
            "config": self.config.to_dict(),
            "fingerprint": self.config.fingerprint(),
            "seed": self.seed,
            "params": [{"name": k, "shape": list(v.shape)} for k, v in self.tensors.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        path = Path(path)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
            f.write(blob)
            for v in self.tensors.values():
                f.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        version, n = struct.unpack_from("<II", raw, 8)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(raw[16 : 16 + n].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        if config.fingerprint() != header["fingerprint"]:
            raise ValueError(f"{path}: config fingerprint mismatch")
        offset = 16 + n
        tensors = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            size = int(np.prod(shape, dtype=int))
            if offset + 8 * size > len(raw):
                raise ValueError(f"{path}: truncated while reading {entry['name']}")
            data = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape)
            tensors[entry["name"]] = Tensor(data.astype(np.float64), requires_grad=True)
            offset += 8 * size
        if offset != len(raw):
            raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
        return cls(config, tensors, header.get("seed"))


@dataclass
class ForwardResult:
    age: Tensor  # [B]
    spatial: np.ndarray | None  # [B, T, M, N]
    temporal: np.ndarray | None  # [B, T]
    frame_features: Tensor | None = field(default=None, repr=False)
    states: Tensor | None = field(default=None, repr=False)

    def spatial_maps(self, video: int = 0) -> list[AttentionMap]:
        if self.spatial is None:
            return []
        return [AttentionMap("spatial", a, frame_index=t) for t, a in enumerate(self.spatial[video])]

    def temporal_map(self, video: int = 0) -> AttentionMap | None:
        if self.temporal is None:
            return None
        return AttentionMap("temporal", self.temporal[video])


def _as_batch(frames, config: ModelConfig) -> np.ndarray:
    """Coerce ``[T,H,W]``, ``[T,H,W,C]``, ``[B,T,H,W]`` or ``[B,T,H,W,C]`` to 5-D."""
    x = np.asarray(frames, dtype=np.float64)
    S, C = config.input_size, config.in_channels
    if x.shape[-2:] == (S, S) and C == 1:
        x = x[..., None]
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[-3:] != (S, S, C):
        raise ShapeError(f"expected frames of shape [B, T, {S}, {S}, {C}], got {np.shape(frames)}")
    if x.shape[1] < 1:
        raise ValueError("video has no frames")
    return x


def appearance_forward(
    frames,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> tuple[Tensor, Tensor | None]:
    """Per-frame features ``p`` for frames ``[..., H, W, C]`` and the spatial attention grid."""
    cfg = params.config
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    if x.shape[-3:] != (cfg.input_size, cfg.input_size, cfg.in_channels):
        raise ShapeError(f"frame shape {x.shape[-3:]} does not match config input {cfg.stage_shapes()['input']}")
    x, attention = _conv_stack(x, params, params.spatial() if cfg.has_spatial else None)
    x = x.reshape(x.shape[:-3] + (-1,))
    x = fn.linear(x, params["fc1.weight"], params["fc1.bias"]).relu()
    x = fn.dropout(x, dropout, training, rng)
    p = fn.linear(x, params["fc2.weight"], params["fc2.bias"]).relu()
    return p, attention


def _conv_stack(x: Tensor, params: ModelParams, spatial: SpatialAttentionParams | None,
                stop_at_gate: bool = False) -> tuple[Tensor, Tensor | None]:
    """Conv/ReLU/LRN/pool stages with the gate at its configured position.

    With ``stop_at_gate`` the feature map that would enter the gate is returned instead.
    """
    cfg = params.config
    lrn = dict(n=cfg.lrn_n, k=cfg.lrn_k, alpha=cfg.lrn_alpha, beta=cfg.lrn_beta)
    attention = None
    for i in range(3):
        layer = i + 1
        x = fn.conv2d(x, params[f"conv{layer}.weight"], params[f"conv{layer}.bias"],
                      stride=cfg.conv_strides[i], padding=cfg.conv_padding[i]).relu()
        gate_here = cfg.attn_layer == layer
        if gate_here and not (cfg.attn_after_pool and layer < 3):
            if stop_at_gate:
                return x, None
            if spatial is not None:
                x, attention = spatial_attention_forward(x, spatial)
        if layer < 3:
            x = fn.maxpool2d(fn.local_response_norm(x, **lrn), cfg.pool, cfg.pool)
            if gate_here and cfg.attn_after_pool:
                if stop_at_gate:
                    return x, None
                if spatial is not None:
                    x, attention = spatial_attention_forward(x, spatial)
    return x, attention


def attention_input(frames, params: ModelParams) -> np.ndarray:
    """Feature maps ``[T, M, N, C]`` that enter the spatial gate for one video."""
    x = _as_batch(frames, params.config)[0]
    with no_grad():
        return _conv_stack(Tensor(x), params, None, stop_at_gate=True)[0].data


def rnn_step(p_t: Tensor, previous: Sequence[Tensor], params: ModelParams) -> list[Tensor]:
    """One time step through both recurrent layers."""
    states = []
    inp = p_t
    for layer, z_prev in enumerate(previous, start=1):
        z = (fn.linear(inp, params[f"rnn{layer}.W"]) + fn.linear(z_prev, params[f"rnn{layer}.V"])
             + params[f"rnn{layer}.b"]).relu()
        states.append(z)
        inp = z
    return states


def rnn_forward(
    features: Tensor,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> Tensor:
    """Run both layers over ``features[B, T, n]`` from zero state; returns top states ``[B, T, n]``."""
    x = features
    B, T, n = features.shape
    for layer in (1, 2):
        drive = fn.linear(x, params[f"rnn{layer}.W"]) + params[f"rnn{layer}.b"]
        V = params[f"rnn{layer}.V"]
        z = Tensor(np.zeros((B, n)))
        outputs = []
        for t in range(T):
            z = (drive[:, t] + fn.linear(z, V)).relu()
            outputs.append(z)
        x = fn.dropout(stack(outputs, axis=1), dropout, training, rng)
    return x


def model_forward(
    videos,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | int | None = None,
    dropout_conv: float = 0.0,
    dropout_rnn: float = 0.0,
) -> ForwardResult:
    """Predict ages for a batch of equal-length videos ``[B, T, H, W(, C)]``."""
    cfg = params.config
    x = _as_batch(videos, cfg)
    B, T = x.shape[:2]
    rng = np.random.default_rng(rng) if training else None
    p, attention = appearance_forward(x, params, training, rng, dropout_conv)  # [B, T, n]
    k, b = params["regressor.k"], params["regressor.b"]
    spatial = attention.data.copy() if attention is not None else None
    if not cfg.has_rnn:
        age = (fn.linear(p, k.reshape(1, -1)).reshape(B, T) + b).mean(axis=1)
        return ForwardResult(age, spatial, None, p, None)
    z = rnn_forward(p, params, training, rng, dropout_rnn)
    if cfg.has_temporal:
        weights = temporal_normalize(temporal_attention_scores(z, params.temporal()))
    else:
        weights = Tensor(np.full((B, T), 1.0 / T))
    summary = temporal_summary(z, weights)
    age = fn.linear(summary, k.reshape(1, -1)).reshape(B) + b
    return ForwardResult(age, spatial, weights.data.copy(), p, z)


def predict(videos, params: ModelParams) -> np.ndarray:
    """Evaluation-mode predictions, one per video; videos may differ in length."""
    out = np.empty(len(videos))
    with no_grad():
        for i, v in enumerate(videos):
            frames = v.frames if hasattr(v, "frames") else v
            out[i] = model_forward(frames, params).age.data[0]
    return out


def ablation_variant(config: ModelConfig, variant: str, seed: int | None = 0) -> ModelParams:
    """Fresh parameters for one rung of the ablation ladder."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return ModelParams.init(replace(config, variant=variant), seed)
