"""Command-line entry point: ``fedser {synth,partition,run,eval,compare}``."""
from __future__ import annotations

import dataclasses
import json
import logging
import sys
from pathlib import Path

import click

from ..data import Dataset, PartitionConfig, PartitionPlan, SynthConfig, assign_devices, make_folds, synth_dataset
from ..model import serialize
from .experiment import ExperimentConfig, load_dataset, run_experiment
from .metrics import compare_runs, evaluate


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


def _override(obj, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    return dataclasses.replace(obj, **kw) if kw else obj


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose: int):
    """Semi-supervised federated SER simulator."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--classes", default=4, show_default=True)
@click.option("--samples-per-class", default=100, show_default=True)
@click.option("--speakers", default=8, show_default=True)
@click.option("--speakers-per-session", default=2, show_default=True)
@click.option("--frames", default=32, show_default=True)
@click.option("--mel-bins", default=32, show_default=True)
@click.option("--noise", default=SynthConfig.noise, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth(out, classes, samples_per_class, speakers, speakers_per_session, frames, mel_bins, noise, seed):
    """Generate a synthetic log-Mel dataset (.npz)."""
    cfg = SynthConfig(classes, samples_per_class, speakers, speakers_per_session, frames, mel_bins, noise=noise, seed=seed)
    ds = synth_dataset(cfg)
    ds.save(out)
    click.echo(f"wrote {len(ds)} samples, {ds.num_classes} classes, {len(set(ds.speakers))} speakers to {out}")


def partition_options(fn):
    opts = [
        click.option("--partition-mode", type=click.Choice(["random", "per_speaker"])),
        click.option("--folds", "fold_strategy", type=click.Choice(["loso", "kfold"])),
        click.option("--sigma", type=float, help="device-size coefficient of variation"),
        click.option("--labeled-fraction", "-L", type=float),
    ]
    for o in reversed(opts):
        fn = o(fn)
    return fn


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--devices", "-K", default=10, show_default=True)
@click.option("--fold", default=0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@partition_options
def partition(data, out, devices, fold, seed, partition_mode, fold_strategy, sigma, labeled_fraction):
    """Emit the PartitionPlan for one fold."""
    ds = Dataset.load(data)
    cfg = _override(PartitionConfig(seed=seed), mode=partition_mode, folds=fold_strategy, sigma=sigma,
                    labeled_fraction=labeled_fraction)
    folds = make_folds(ds, cfg)
    if not 0 <= fold < len(folds):
        raise click.BadParameter(f"fold must lie in [0, {len(folds)})")
    train, test = folds[fold]
    plan = assign_devices(train, ds, cfg, devices, fold=fold, test_ids=test)
    plan.check()
    plan.save(out)
    click.echo(f"fold {fold}/{len(folds)}: {len(train)} train, {len(test)} test over {devices} devices -> {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", type=click.Path(exists=True, dir_okay=False), help="saved dataset; synthetic if omitted")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--devices", "-K", type=int)
@click.option("--rounds", "-R", type=int)
@click.option("--participation", "-q", type=float)
@click.option("--local-epochs", "-E", type=int)
@partition_options
@click.option("--beta", type=float)
@click.option("--temperature", "-T", type=float)
@click.option("--tau-min", type=float)
@click.option("--tau-max", type=float)
@click.option("--delta", type=float)
@click.option("--scheduler-mode", type=click.Choice(["corrected", "paper_literal"]))
@click.option("--batch-size", type=int)
@click.option("--lr", type=float)
@click.option("--workers", type=int)
@click.option("--trials", type=int)
@click.option("--max-folds", type=int)
@click.option("--seed", type=int, help="first trial seed; trials use seed, seed+1, ...")
def run(config_path, data, out, devices, rounds, participation, local_epochs, partition_mode, fold_strategy,
        sigma, labeled_fraction, beta, temperature, tau_min, tau_max, delta, scheduler_mode, batch_size, lr,
        workers, trials, max_folds, seed):
    """Run a full experiment (folds x trials) and write metrics + summary."""
    cfg = ExperimentConfig.load(config_path) if config_path else ExperimentConfig()
    cfg.federation = _override(cfg.federation, num_devices=devices, total_rounds=rounds, participation=participation,
                               local_epochs=local_epochs, batch_size=batch_size, learning_rate=lr, workers=workers)
    cfg.partition = _override(cfg.partition, mode=partition_mode, folds=fold_strategy, sigma=sigma,
                              labeled_fraction=labeled_fraction)
    cfg.selftrain = _override(cfg.selftrain, beta=beta, temperature=temperature, tau_min=tau_min, tau_max=tau_max,
                              delta=delta, scheduler_mode=scheduler_mode)
    if data:
        cfg.dataset = data
    if trials is not None:
        cfg.trials = trials
        cfg.seeds = None if seed is None else list(range(seed, seed + trials))
    elif seed is not None:
        cfg.seeds = list(range(seed, seed + cfg.trials))
    if max_folds is not None:
        cfg.max_folds = max_folds
    ExperimentConfig.__post_init__(cfg)
    summary = run_experiment(cfg, output_dir=out)
    click.echo(f"UA mean {summary['ua_mean']:.4f} (std {summary['ua_std']:.4f}) complete={summary['complete']}")
    if not summary["complete"]:
        sys.exit(1)


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--plan", type=click.Path(exists=True, dir_okay=False), help="evaluate on the plan's test ids")
def eval_cmd(checkpoint, data, plan):
    """Evaluate a parameter checkpoint on a dataset (or a plan's test fold)."""
    ds = Dataset.load(data)
    params = serialize.load(checkpoint)
    ids = PartitionPlan.load(plan).test if plan else list(range(len(ds)))
    _echo_json(evaluate(params, ds, ids).to_dict())


@main.command()
@click.argument("summary_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("summary_b", type=click.Path(exists=True, dir_okay=False))
def compare(summary_a, summary_b):
    """UA deltas (A - B) per fold with a sign test across trials."""
    a = json.loads(Path(summary_a).read_text())
    b = json.loads(Path(summary_b).read_text())
    try:
        _echo_json(compare_runs(a, b))
    except ValueError as exc:
        raise click.ClickException(str(exc))


if __name__ == "__main__":
    main()
