"""Dual-convolution CNN with spectro-temporal-channel attention.

Each block runs a temporal and a spectral convolution side by side, joins
them with a 1x1 convolution, then group norm -> ReLU -> spatial dropout.
Blocks are separated by 2x2 max pooling. The last block feeds the attention
layer, global average pooling and a dense head.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from ..errors import ConfigError, FingerprintMismatch
from . import layers


@dataclass(frozen=True)
class ArchConfig:
    channels: tuple[int, ...] = (16, 32, 48, 64)
    temporal_kernel: int = 7
    spectral_kernel: int = 7
    attention_kernel: int = 7
    groups: int = 8
    dropout: float = 0.1
    l2_rate: float = 1e-4
    attention_reduction: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ConfigError("at least one block is required")
        for c in self.channels:
            if c % self.groups:
                raise ConfigError(f"channels {c} not divisible by {self.groups} groups")
        for name in ("temporal_kernel", "spectral_kernel", "attention_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {k}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def blocks(self) -> int:
        return len(self.channels)

    @property
    def attention_hidden(self) -> int:
        return max(1, self.channels[-1] // self.attention_reduction)

    def min_input(self) -> int:
        """Smallest time/frequency extent that survives the pooling stages."""
        return 2 ** (self.blocks - 1)


def param_shapes(arch: ArchConfig, num_classes: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, c in enumerate(arch.channels):
        p = f"block{i}."
        shapes[p + "temporal.weight"] = (c, c_in, arch.temporal_kernel)
        shapes[p + "temporal.bias"] = (c,)
        shapes[p + "spectral.weight"] = (c, c_in, arch.spectral_kernel)
        shapes[p + "spectral.bias"] = (c,)
        shapes[p + "joint.weight"] = (c, 2 * c)
        shapes[p + "joint.bias"] = (c,)
        shapes[p + "norm.scale"] = (c,)
        shapes[p + "norm.offset"] = (c,)
        c_in = c
    hidden = arch.attention_hidden
    shapes["attention.mlp1.weight"] = (hidden, c_in)
    shapes["attention.mlp1.bias"] = (hidden,)
    shapes["attention.mlp2.weight"] = (c_in, hidden)
    shapes["attention.mlp2.bias"] = (c_in,)
    shapes["attention.temporal.weight"] = (1, 2, arch.attention_kernel)
    shapes["attention.temporal.bias"] = (1,)
    shapes["attention.spectral.weight"] = (1, 2, arch.attention_kernel)
    shapes["attention.spectral.bias"] = (1,)
    shapes["head.weight"] = (num_classes, c_in)
    shapes["head.bias"] = (num_classes,)
    return shapes


def fingerprint(arch: ArchConfig, num_classes: int) -> str:
    meta = {
        "shapes": {k: list(v) for k, v in param_shapes(arch, num_classes).items()},
        "groups": arch.groups,
        "num_classes": num_classes,
    }
    return hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()[:16]


def is_regularized(name: str) -> bool:
    return name.endswith(".weight")


@dataclass
class ParamSet:
    """Named model arrays plus the architecture they belong to.

    Treated as immutable: every update builds a new instance.
    """

    arrays: dict[str, np.ndarray]
    arch: ArchConfig
    num_classes: int
    fingerprint: str = field(default="")

    def __post_init__(self):
        expected = param_shapes(self.arch, self.num_classes)
        if list(self.arrays) != list(expected):
            raise ConfigError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.arrays[name].shape} != {shape}")
        fp = fingerprint(self.arch, self.num_classes)
        if self.fingerprint and self.fingerprint != fp:
            raise FingerprintMismatch("stored fingerprint does not match shapes")
        self.fingerprint = fp

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def replace(self, arrays: dict[str, np.ndarray]) -> "ParamSet":
        return ParamSet(arrays, self.arch, self.num_classes, self.fingerprint)

    def map(self, fn) -> "ParamSet":
        return self.replace({k: fn(v) for k, v in self.arrays.items()})

    def copy(self) -> "ParamSet":
        return self.map(np.copy)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def check_compatible(self, other: "ParamSet") -> None:
        if self.fingerprint != other.fingerprint:
            raise FingerprintMismatch(f"fingerprint {other.fingerprint} != {self.fingerprint}")

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays.values())


def init_params(arch: ArchConfig, num_classes: int, seed: int) -> ParamSet:
    """He-normal convolutions, Glorot-uniform dense layers, zero biases."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(arch.dtype)
    arrays = {}
    for name, shape in param_shapes(arch, num_classes).items():
        if name.endswith("norm.scale"):
            a = np.ones(shape)
        elif name.endswith((".bias", "norm.offset")):
            a = np.zeros(shape)
        elif len(shape) == 3:
            fan_in = shape[1] * shape[2]
            a = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            a = rng.uniform(-limit, limit, size=shape)
        arrays[name] = a.astype(dtype)
    return ParamSet(arrays, arch, num_classes)


def zeros_like(params: ParamSet) -> ParamSet:
    return params.map(np.zeros_like)


# ---------------------------------------------------------------- forward / backward

class Cache:
    """Intermediates of one forward pass; consumed by exactly one backward."""

    def __init__(self, params: ParamSet, train: bool):
        self.params = params
        self.train = train
        self.blocks: list[dict] = []
        self.attention = None
        self.pooled_ctx = None
        self.head_ctx = None
        self.used = False


def _check_batch(params: ParamSet, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 3:
        raise ConfigError(f"batch must be (N, frames, mel_bins), got shape {batch.shape}")
    need = params.arch.min_input()
    if batch.shape[1] < need or batch.shape[2] < need:
        raise ConfigError(f"input {batch.shape[1:]} too small for {params.arch.blocks} blocks (min {need})")
    return batch.astype(params.arch.dtype, copy=False)[..., None]


def _block_rng(seed, block: int) -> np.random.Generator:
    # One independent stream per block: masks for a row prefix of the batch do
    # not depend on how many rows follow it.
    return np.random.default_rng([int(seed), block])


def forward(params: ParamSet, batch: np.ndarray, mode: str = "eval", rng_seed: int | None = None):
    """Return ``(logits, cache)`` for a batch of shape (N, frames, mel_bins)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng_seed is None:
        raise ConfigError("train mode requires rng_seed")
    arch = params.arch
    x = _check_batch(params, batch)
    cache = Cache(params, train)

    for i in range(arch.blocks):
        p = f"block{i}."
        ctx = {}
        t_out, ctx["temporal"] = layers.conv_axis_forward(x, params[p + "temporal.weight"], params[p + "temporal.bias"], 1)
        s_out, ctx["spectral"] = layers.conv_axis_forward(x, params[p + "spectral.weight"], params[p + "spectral.bias"], 2)
        joined = np.concatenate([t_out, s_out], axis=-1)
        j_out, ctx["joint"] = layers.dense_forward(joined, params[p + "joint.weight"], params[p + "joint.bias"])
        n_out, ctx["norm"] = layers.group_norm_forward(j_out, params[p + "norm.scale"], params[p + "norm.offset"], arch.groups)
        x, ctx["relu"] = layers.relu_forward(n_out)
        rng = _block_rng(rng_seed, i) if train else None
        x, ctx["dropout"] = layers.spatial_dropout_forward(x, arch.dropout, rng)
        if i < arch.blocks - 1:
            x, ctx["pool"] = layers.max_pool_forward(x)
        cache.blocks.append(ctx)

    attn = {k[len("attention."):]: v for k, v in params.items() if k.startswith("attention.")}
    x, cache.attention = layers.stc_attention_forward(x, attn)
    cache.pooled_ctx = x.shape
    pooled = x.mean(axis=(1, 2))
    logits, cache.head_ctx = layers.dense_forward(pooled, params["head.weight"], params["head.bias"])
    return logits, cache


def backward(cache: Cache, dlogits: np.ndarray) -> ParamSet:
    """Gradient of (upstream-weighted logits + L2 penalty) w.r.t. every parameter.

    The penalty is ``l2_rate / 2 * sum(w**2)`` over all ``*.weight`` arrays,
    so each weight gradient gains ``l2_rate * w``.
    """
    if cache.used:
        raise RuntimeError("forward cache already consumed by a previous backward call")
    cache.used = True
    params = cache.params
    arch = params.arch
    dlogits = np.asarray(dlogits, dtype=arch.dtype)
    grads: dict[str, np.ndarray] = {}

    dpooled, grads["head.weight"], grads["head.bias"] = layers.dense_backward(cache.head_ctx, dlogits)
    n, t, f, c = cache.pooled_ctx
    dx = np.broadcast_to(dpooled[:, None, None, :] / (t * f), cache.pooled_ctx)
    dx, attn_grads = layers.stc_attention_backward(cache.attention, dx)
    for k, v in attn_grads.items():
        grads["attention." + k] = v

    for i in reversed(range(arch.blocks)):
        p = f"block{i}."
        ctx = cache.blocks[i]
        if "pool" in ctx:
            dx = layers.max_pool_backward(ctx["pool"], dx)
        dx = layers.spatial_dropout_backward(ctx["dropout"], dx)
        dx = layers.relu_backward(ctx["relu"], dx)
        dx, grads[p + "norm.scale"], grads[p + "norm.offset"] = layers.group_norm_backward(ctx["norm"], dx)
        dx, grads[p + "joint.weight"], grads[p + "joint.bias"] = layers.dense_backward(ctx["joint"], dx)
        c_blk = dx.shape[-1] // 2
        dt, grads[p + "temporal.weight"], grads[p + "temporal.bias"] = layers.conv_axis_backward(ctx["temporal"], dx[..., :c_blk])
        ds, grads[p + "spectral.weight"], grads[p + "spectral.bias"] = layers.conv_axis_backward(ctx["spectral"], dx[..., c_blk:])
        dx = dt + ds

    out = {}
    for name, value in params.items():
        g = grads[name].astype(arch.dtype, copy=False)
        if is_regularized(name):
            g = g + arch.l2_rate * value
        out[name] = g
    return params.replace(out)


def l2_penalty(params: ParamSet) -> float:
    return 0.5 * params.arch.l2_rate * sum(float(np.sum(v.astype(np.float64) ** 2)) for k, v in params.items() if is_regularized(k))


def predict_proba(params: ParamSet, batch: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Eval-mode softmax probabilities, computed in chunks."""
    batch = np.asarray(batch)
    out = []
    for start in range(0, len(batch), chunk):
        logits, _ = forward(params, batch[start:start + chunk], "eval")
        out.append(softmax_t(logits, 1.0))
    return np.concatenate(out) if out else np.zeros((0, params.num_classes))


# ---------------------------------------------------------------- probabilities and loss

def softmax_t(z, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax over the last axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=np.result_type(z, np.float32)) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    """Weighted sum of per-sample cross-entropies and its gradient w.r.t. logits.

    ``weights`` carries the reduction (e.g. ``1/n`` for a mean).
    """
    logits = np.asarray(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(len(targets))
    nll = logsum - z[rows, targets]
    loss = float(np.dot(weights.astype(np.float64), nll.astype(np.float64)))
    probs = np.exp(z - logsum[:, None])
    probs[rows, targets] -= 1.0
    return loss, probs * weights[:, None].astype(probs.dtype)


def arch_to_dict(arch: ArchConfig) -> dict:
    d = asdict(arch)
    d["channels"] = list(arch.channels)
    return d
