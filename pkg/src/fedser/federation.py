"""Coordinator side of federated self-training: sampling, local updates, FedAvg."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, PartitionPlan
from .errors import ConfigError, FingerprintMismatch
from .model import ArchConfig, ParamSet, init_params, serialize
from .selftrain import SelfTrainConfig, confidence_threshold, device_update

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederationConfig:
    num_devices: int = 10
    total_rounds: int = 100
    participation: float = 0.8
    local_epochs: int = 1
    seed: int = 0
    batch_size: int | None = 16
    learning_rate: float = 1e-3
    workers: int = 1
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.num_devices < 1:
            raise ConfigError("num_devices must be >= 1")
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be >= 1")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must lie in (0, 1]")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def per_round(self) -> int:
        # tolerance keeps e.g. 0.7 * 10 from rounding up to 8
        return max(1, math.ceil(self.participation * self.num_devices - 1e-9))


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    sample_counts: list[int]
    weights: list[float]
    taus: list[float]
    device_stats: list[dict]
    metrics: dict | None = None

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "participants": self.participants,
            "sample_counts": self.sample_counts,
            "weights": self.weights,
            "taus": self.taus,
            "device_stats": self.device_stats,
            "metrics": self.metrics,
        }


@dataclass
class FederationState:
    params: ParamSet
    device_completed: list[int]
    completed: int = 0
    records: list[RoundRecord] = field(default_factory=list)


class RoundAborted(RuntimeError):
    pass


def sample_participants(cfg: FederationConfig, round_index: int, state: FederationState | None = None) -> list[int]:
    """Uniform draw of ``ceil(q K)`` distinct devices, fixed per (seed, round)."""
    if not 0 <= round_index < cfg.total_rounds:
        raise ValueError(f"round {round_index} outside [0, {cfg.total_rounds})")
    rng = np.random.default_rng([cfg.seed, round_index, 0x5A3])
    chosen = rng.choice(cfg.num_devices, size=cfg.per_round, replace=False)
    return sorted(int(k) for k in chosen)


def aggregation_weights(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("aggregation needs a positive total sample count")
    return counts / total


def aggregate(updates: list[tuple[ParamSet, int]]) -> ParamSet:
    """Sample-weighted average, reduced in the given (ascending device id) order."""
    if not updates:
        raise ValueError("nothing to aggregate")
    first = updates[0][0]
    for p, _ in updates[1:]:
        if p.fingerprint != first.fingerprint:
            raise FingerprintMismatch("cannot average parameter sets of different architectures")
    weights = aggregation_weights([n for _, n in updates])
    out = {}
    for name, ref in first.items():
        acc = np.zeros(ref.shape, dtype=np.float64)
        for (p, _), w in zip(updates, weights):
            acc += w * p[name].astype(np.float64)
        out[name] = acc.astype(ref.dtype)
    return first.replace(out)


def device_seed(seed: int, round_index: int, device: int) -> int:
    return int(np.random.SeedSequence([seed, round_index, device]).generate_state(1)[0])


@dataclass
class DeviceData:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    num_samples: int


def device_data(ds: Dataset, plan: PartitionPlan) -> list[DeviceData]:
    out = []
    for shard in plan.devices:
        xl, yl = ds.stack(shard.labeled)
        xu, _ = ds.stack(shard.unlabeled)
        out.append(DeviceData(xl, yl, xu, shard.size))
    return out


@dataclass
class FederationResult:
    params: ParamSet
    records: list[RoundRecord]
    state: FederationState


def run_federation(
    cfg: FederationConfig,
    ds: Dataset,
    plan: PartitionPlan,
    stcfg: SelfTrainConfig,
    arch: ArchConfig = ArchConfig(),
    evaluate: Callable[[ParamSet], dict] | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
    checkpoint_dir=None,
    init: ParamSet | None = None,
) -> FederationResult:
    """Run every round of federated self-training and return the final global model.

    Any device failure aborts the round before aggregation.
    """
    if plan.num_devices != cfg.num_devices:
        raise ConfigError(f"plan has {plan.num_devices} devices, config expects {cfg.num_devices}")
    data = device_data(ds, plan)
    params = init if init is not None else init_params(arch, ds.num_classes, cfg.seed)
    state = FederationState(params, [0] * cfg.num_devices)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    R = cfg.total_rounds

    def local(k: int, global_params: ParamSet, tau: float, r: int):
        d = data[k]
        unlabeled = d.unlabeled_x if stcfg.beta > 0 else d.unlabeled_x[:0]
        return device_update(
            global_params, (d.labeled_x, d.labeled_y), unlabeled, tau, stcfg,
            cfg.local_epochs, device_seed(cfg.seed, r, k), cfg.batch_size, cfg.learning_rate,
        )

    try:
        for r in range(R):
            participants = sample_participants(cfg, r, state)
            taus = [confidence_threshold(R, state.completed, state.device_completed[k], stcfg) for k in participants]
            if pool is None:
                results = [_guarded(local, k, state.params, tau, r) for k, tau in zip(participants, taus)]
            else:
                futures = [pool.submit(_guarded, local, k, state.params, tau, r) for k, tau in zip(participants, taus)]
                results = [f.result() for f in futures]
            failures = [(k, res) for k, res in zip(participants, results) if isinstance(res, BaseException)]
            if failures:
                k, exc = failures[0]
                raise RoundAborted(f"round {r}: device {k} failed: {exc!r}") from exc

            counts = [data[k].num_samples for k in participants]
            state.params = aggregate([(p, n) for (p, _), n in zip(results, counts)])
            state.completed += 1
            for k in participants:
                state.device_completed[k] += 1

            record = RoundRecord(
                round=r,
                participants=participants,
                sample_counts=counts,
                weights=[float(w) for w in aggregation_weights(counts)],
                taus=taus,
                device_stats=[s.as_dict() for _, s in results],
            )
            last = r == R - 1
            if evaluate is not None and cfg.eval_every and ((r + 1) % cfg.eval_every == 0 or last):
                record.metrics = evaluate(state.params)
            state.records.append(record)
            if on_round is not None:
                on_round(record)
            if checkpoint_dir is not None and cfg.checkpoint_every and ((r + 1) % cfg.checkpoint_every == 0 or last):
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                serialize.save(state.params, Path(checkpoint_dir) / f"round_{r + 1:04d}.params")
            log.debug("round %d done: participants=%s", r, participants)
    finally:
        if pool is not None:
            pool.shutdown()
    return FederationResult(state.params, state.records, state)


def _guarded(fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # reported per device, re-raised as RoundAborted
        return exc
