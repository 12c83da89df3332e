"""Local semi-supervised update: pseudo-labels, confidence scheduling, combined loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .model import ParamSet, adam_init, adam_step, backward, cross_entropy, forward, softmax_t

SCHEDULER_MODES = ("corrected", "paper_literal")


@dataclass(frozen=True)
class SelfTrainConfig:
    beta: float = 1.0
    temperature: float = 2.0
    tau_min: float = 0.5
    tau_max: float = 0.9
    delta: float = 0.5
    scheduler_mode: str = "corrected"

    def __post_init__(self):
        if not 0.0 <= self.tau_min <= self.tau_max <= 1.0:
            raise ConfigError("need 0 <= tau_min <= tau_max <= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not self.beta >= 0:
            raise ConfigError("beta must be non-negative")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError("delta must lie in [0, 1]")
        if self.scheduler_mode not in SCHEDULER_MODES:
            raise ConfigError(f"scheduler_mode must be one of {SCHEDULER_MODES}")


@dataclass(frozen=True)
class PseudoLabel:
    label: int
    confidence: float
    source: int | None = None


def pseudo_labels(logits: np.ndarray, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized labeling: (argmax class, max softened probability) per row.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class.
    """
    logits = np.asarray(logits)
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logits")
    probs = softmax_t(logits, temperature)
    labels = probs.argmax(axis=-1)
    return labels, np.take_along_axis(probs, labels[..., None], -1)[..., 0]


def pseudo_label(z, temperature: float, source: int | None = None) -> PseudoLabel:
    labels, conf = pseudo_labels(np.asarray(z, dtype=np.float64)[None, :], temperature)
    return PseudoLabel(int(labels[0]), float(conf[0]), source)


def confidence_threshold(total_rounds: int, completed: int, device_completed: int, cfg: SelfTrainConfig) -> float:
    """Device-specific cosine confidence threshold.

    The schedule position discounts global progress by the device's lag:
    ``x = C - delta * (C - C_s)``. In "corrected" mode the threshold rises
    from ``tau_min`` (x = 0) to ``tau_max`` (x = R); "paper_literal" keeps
    the printed form ``(tau_max - tau_min) / 2 * (1 + cos(pi x / R))``.
    """
    R, C, Cs = total_rounds, completed, device_completed
    if R <= 0:
        raise ValueError("total_rounds must be positive")
    if not 0 <= Cs <= C <= R:
        raise ValueError(f"need 0 <= C_s ({Cs}) <= C ({C}) <= R ({R})")
    x = min(max(C - cfg.delta * (C - Cs), 0.0), float(R))
    phase = math.cos(math.pi * x / R)
    if cfg.scheduler_mode == "corrected":
        return cfg.tau_min + 0.5 * (cfg.tau_max - cfg.tau_min) * (1.0 - phase)
    return 0.5 * (cfg.tau_max - cfg.tau_min) * (1.0 + phase)


@dataclass
class LossBreakdown:
    total: float
    supervised: float
    unsupervised: float
    d_sup: np.ndarray
    d_unsup: np.ndarray


def combined_loss(sup_logits, y, unsup_logits, y_hat, mask, beta: float) -> LossBreakdown:
    """``L_s + beta * L_u`` with ``L_u`` the mean CE over retained pseudo-labels.

    Gradients w.r.t. both logit blocks are returned alongside the values.
    """
    sup_logits = np.asarray(sup_logits)
    unsup_logits = np.asarray(unsup_logits)
    y = np.asarray(y, dtype=np.int64)
    y_hat = np.asarray(y_hat, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if len(sup_logits) != len(y) or len(unsup_logits) != len(y_hat) or len(mask) != len(y_hat):
        raise ValueError("logits, targets and mask lengths disagree")

    if len(y):
        l_s, d_sup = cross_entropy(sup_logits, y, np.full(len(y), 1.0 / len(y)))
    else:
        l_s, d_sup = 0.0, np.zeros_like(sup_logits)

    kept = int(mask.sum())
    if kept:
        w = mask / kept
        l_u, d_unsup = cross_entropy(unsup_logits, y_hat, w)
        d_unsup = d_unsup * beta
    else:
        l_u, d_unsup = 0.0, np.zeros_like(unsup_logits)
    return LossBreakdown(l_s + beta * l_u, l_s, l_u, d_sup, d_unsup)


def paired_batches(
    n_labeled: int, n_unlabeled: int, batch_size: int | None, rng: np.random.Generator
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (labeled idx, unlabeled idx) pairs of equal size.

    The longer stream is visited once; the shorter one cycles through fresh
    permutations. ``batch_size=None`` yields a single full batch of each.
    """
    if batch_size is None:
        yield rng.permutation(n_labeled), rng.permutation(n_unlabeled)
        return
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    longest = max(n_labeled, n_unlabeled)
    steps = -(-longest // batch_size)

    def stream(n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        if n == longest:
            return rng.permutation(n)
        reps = -(-longest // n)
        return np.concatenate([rng.permutation(n) for _ in range(reps)])[:longest]

    lab = stream(n_labeled)
    unl = stream(n_unlabeled)
    for s in range(steps):
        sl = slice(s * batch_size, (s + 1) * batch_size)
        yield lab[sl], unl[sl]


@dataclass
class UpdateStats:
    steps: int = 0
    skipped: bool = False
    labeled: int = 0
    unlabeled: int = 0
    considered: int = 0
    retained: int = 0
    confidence_sum: float = 0.0
    loss_sup_sum: float = 0.0
    loss_unsup_sum: float = 0.0

    @property
    def retained_fraction(self) -> float:
        return self.retained / self.considered if self.considered else 0.0

    @property
    def mean_confidence(self) -> float:
        return self.confidence_sum / self.considered if self.considered else 0.0

    @property
    def loss_sup(self) -> float:
        return self.loss_sup_sum / self.steps if self.steps else 0.0

    @property
    def loss_unsup(self) -> float:
        return self.loss_unsup_sum / self.steps if self.steps else 0.0

    def as_dict(self) -> dict:
        return {
            "steps": self.steps,
            "skipped": self.skipped,
            "labeled": self.labeled,
            "unlabeled": self.unlabeled,
            "retained_fraction": self.retained_fraction,
            "mean_confidence": self.mean_confidence,
            "loss_sup": self.loss_sup,
            "loss_unsup": self.loss_unsup,
        }


def device_update(
    params: ParamSet,
    labeled: tuple[np.ndarray, np.ndarray],
    unlabeled: np.ndarray,
    tau: float,
    cfg: SelfTrainConfig,
    epochs: int,
    rng_seed: int,
    batch_size: int | None = 16,
    learning_rate: float = 1e-3,
) -> tuple[ParamSet, UpdateStats]:
    """Run ``epochs`` passes of self-training from ``params`` with a fresh Adam state.

    Pseudo-labels come from an eval-mode pass of the current local model at
    every step. Unlabeled rows under ``tau`` are left out of the training
    batch entirely, so a fully masked step is exactly a supervised step.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    x_l, y_l = labeled
    x_l = np.asarray(x_l)
    y_l = np.asarray(y_l, dtype=np.int64)
    x_u = np.asarray(unlabeled)
    n_l, n_u = len(x_l), len(x_u)
    use_unlabeled = cfg.beta > 0 and n_u > 0
    stats = UpdateStats(labeled=n_l, unlabeled=n_u)

    if n_l == 0 and not use_unlabeled:
        stats.skipped = True
        return params, stats

    rng = np.random.default_rng(rng_seed)
    opt = adam_init(params, learning_rate)
    for _ in range(epochs):
        for idx_l, idx_u in paired_batches(n_l, n_u, batch_size, rng):
            step_seed = int(rng.integers(2**31))
            xb_l, yb_l = x_l[idx_l], y_l[idx_l]
            if use_unlabeled and len(idx_u):
                xb_u = x_u[idx_u]
                z_u, _ = forward(params, xb_u, "eval")
                y_hat, conf = pseudo_labels(z_u, cfg.temperature)
                keep = conf >= tau
                stats.considered += len(idx_u)
                stats.retained += int(keep.sum())
                stats.confidence_sum += float(conf.sum())
                xb_u, y_hat = xb_u[keep], y_hat[keep]
            else:
                xb_u, y_hat = None, np.zeros(0, dtype=np.int64)

            parts = [b for b in (xb_l, xb_u) if b is not None and len(b)]
            if not parts:
                continue
            batch = np.concatenate(parts) if len(parts) > 1 else parts[0]
            logits, cache = forward(params, batch, "train", step_seed)
            n_b = len(xb_l)
            loss = combined_loss(
                logits[:n_b], yb_l, logits[n_b:], y_hat, np.ones(len(y_hat), bool), cfg.beta
            )
            grads = backward(cache, np.concatenate([loss.d_sup, loss.d_unsup]))
            params, opt = adam_step(params, grads, opt)
            stats.steps += 1
            stats.loss_sup_sum += loss.supervised
            stats.loss_unsup_sum += loss.unsupervised

    if stats.steps == 0:
        stats.skipped = True
    return params, stats
