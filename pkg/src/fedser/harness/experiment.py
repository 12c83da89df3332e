"""Experiment configuration and the fold x trial driver."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..data import Dataset, PartitionConfig, SynthConfig, assign_devices, make_folds, synth_dataset
from ..errors import ConfigError
from ..federation import FederationConfig, run_federation
from ..model import ArchConfig, serialize
from ..model.network import arch_to_dict
from ..selftrain import SelfTrainConfig
from .metrics import evaluate

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    federation: FederationConfig = field(default_factory=FederationConfig)
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    dataset: str | None = None  # path to a saved dataset; synthetic when unset
    trials: int = 5
    seeds: list[int] | None = None
    max_folds: int | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.seeds is not None and len(self.seeds) != self.trials:
            raise ConfigError("need exactly one seed per trial")

    def trial_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else list(range(self.trials))

    def to_dict(self) -> dict:
        return {
            "federation": dataclasses.asdict(self.federation),
            "selftrain": dataclasses.asdict(self.selftrain),
            "partition": dataclasses.asdict(self.partition),
            "arch": arch_to_dict(self.arch),
            "synth": {**dataclasses.asdict(self.synth), "segments": list(self.synth.segments)},
            "dataset": self.dataset,
            "trials": self.trials,
            "seeds": self.trial_seeds(),
            "max_folds": self.max_folds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"federation", "selftrain", "partition", "arch", "synth", "dataset", "trials", "seeds", "max_folds", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        synth = dict(d.get("synth", {}))
        if "segments" in synth:
            synth["segments"] = tuple(synth["segments"])
        arch = dict(d.get("arch", {}))
        if "channels" in arch:
            arch["channels"] = tuple(arch["channels"])
        trials = d.get("trials", 5)
        seeds = d.get("seeds")
        if seeds is not None and "trials" not in d:
            trials = len(seeds)
        return cls(
            federation=FederationConfig(**d.get("federation", {})),
            selftrain=SelfTrainConfig(**d.get("selftrain", {})),
            partition=PartitionConfig(**d.get("partition", {})),
            arch=ArchConfig(**arch),
            synth=SynthConfig(**synth),
            dataset=d.get("dataset"),
            trials=trials,
            seeds=seeds,
            max_folds=d.get("max_folds"),
            output_dir=d.get("output_dir"),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    return Dataset.load(cfg.dataset) if cfg.dataset else synth_dataset(cfg.synth)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_experiment(cfg: ExperimentConfig, ds: Dataset | None = None, output_dir=None) -> dict:
    """Run every fold x trial, write per-trial reports, and return the summary.

    Outputs (when an output directory is set): ``config.json``,
    ``metrics.jsonl`` with one record per round, ``fold*/trial*/report.json``
    and ``final.params``, and ``summary.json``.
    """
    ds = ds if ds is not None else load_dataset(cfg)
    out = Path(output_dir or cfg.output_dir) if (output_dir or cfg.output_dir) else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        metrics_fh = open(out / "metrics.jsonl", "w")

    folds = make_folds(ds, cfg.partition)
    if cfg.max_folds is not None:
        folds = folds[: cfg.max_folds]

    fold_summaries = []
    complete = True
    try:
        for f, (train_ids, test_ids) in enumerate(folds):
            trials = []
            for t, seed in enumerate(cfg.trial_seeds()):
                entry = {"trial": t, "seed": seed}
                try:
                    entry.update(_run_trial(cfg, ds, f, t, seed, train_ids, test_ids, out, metrics_fh))
                    entry["status"] = "ok"
                except Exception as exc:
                    log.exception("fold %d trial %d failed", f, t)
                    entry.update(status="failed", error=repr(exc), ua=None)
                    complete = False
                trials.append(entry)
            uas = [t["ua"] for t in trials if t["ua"] is not None]
            fold_summaries.append({
                "fold": f,
                "test_size": int(len(test_ids)),
                "trials": trials,
                "mean_ua": float(np.mean(uas)) if uas else None,
                "std_ua": float(np.std(uas)) if uas else None,
            })
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    all_ua = [t["ua"] for fs in fold_summaries for t in fs["trials"] if t["ua"] is not None]
    trial_means = []
    for t in range(cfg.trials):
        vals = [fs["trials"][t]["ua"] for fs in fold_summaries if fs["trials"][t]["ua"] is not None]
        if vals:
            trial_means.append(float(np.mean(vals)))
    summary = {
        "config_digest": cfg.digest(),
        "num_classes": ds.num_classes,
        "class_names": list(ds.class_names),
        "folds": fold_summaries,
        "trial_mean_ua": trial_means,
        "ua_mean": float(np.mean(all_ua)) if all_ua else None,
        "ua_std": float(np.std(trial_means)) if trial_means else None,
        "complete": complete,
    }
    if out is not None:
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _run_trial(cfg, ds, fold, trial, seed, train_ids, test_ids, out, metrics_fh) -> dict:
    part = replace(cfg.partition, seed=seed)
    plan = assign_devices(train_ids, ds, part, cfg.federation.num_devices, fold=fold, test_ids=test_ids)
    fed = replace(cfg.federation, seed=seed)
    trial_dir = out / f"fold{fold}" / f"trial{trial}" if out is not None else None
    if trial_dir is not None:
        trial_dir.mkdir(parents=True, exist_ok=True)
        plan.save(trial_dir / "plan.json")

    def eval_fn(params):
        rep = evaluate(params, ds, test_ids)
        return {"ua": rep.ua, "wa": rep.wa, "segment_accuracy": rep.segment_accuracy}

    def on_round(record):
        if metrics_fh is not None:
            metrics_fh.write(_dump({"fold": fold, "trial": trial, **record.to_dict()}) + "\n")

    result = run_federation(
        fed, ds, plan, cfg.selftrain, cfg.arch, evaluate=eval_fn, on_round=on_round,
        checkpoint_dir=trial_dir / "checkpoints" if trial_dir is not None else None,
    )
    report = evaluate(result.params, ds, test_ids)
    curve = [r.metrics["ua"] for r in result.records if r.metrics is not None]
    if trial_dir is not None:
        (trial_dir / "report.json").write_text(
            json.dumps({**report.to_dict(), "ua_curve": curve, "plan_warnings": plan.warnings}, indent=2, sort_keys=True) + "\n"
        )
        serialize.save(result.params, trial_dir / "final.params")
    if metrics_fh is not None:
        metrics_fh.write(_dump({"fold": fold, "trial": trial, "final": report.to_dict()}) + "\n")
    return {"ua": report.ua, "wa": report.wa, "ua_curve": curve}
