import json

import numpy as np
import pytest
from click.testing import CliRunner

from fedser.data import PartitionConfig, SynthConfig, synth_dataset
from fedser.errors import ConfigError
from fedser.features import utterance_predict
from fedser.federation import FederationConfig
from fedser.harness import ExperimentConfig, run_experiment
from fedser.harness.cli import main
from fedser.harness.metrics import (
    MetricsReport, compare_runs, confusion_matrix, evaluate, report_from_predictions, sign_test,
)
from fedser.model import ArchConfig, init_params
from fedser.selftrain import SelfTrainConfig

TINY_ARCH = ArchConfig(channels=(4, 8), groups=2, temporal_kernel=3, spectral_kernel=3, attention_kernel=3)
TINY_SYNTH = SynthConfig(samples_per_class=10, num_speakers=4, frames=8, mel_bins=8)


def smoke_config(**kw):
    base = dict(
        federation=FederationConfig(num_devices=2, total_rounds=1, batch_size=8),
        partition=PartitionConfig(sigma=0.0),
        arch=TINY_ARCH, synth=TINY_SYNTH, trials=1, max_folds=1,
    )
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------- metrics

def test_hand_checked_ua():
    rep = MetricsReport(np.array([[5, 0], [2, 3]]))
    np.testing.assert_allclose(rep.recalls, [1.0, 0.6])
    assert rep.ua == pytest.approx(0.8, abs=1e-12)
    assert rep.wa == pytest.approx(0.8, abs=1e-12)


def test_perfect_predictor():
    y = np.repeat(np.arange(4), [3, 5, 2, 7])
    rep = report_from_predictions(y, y, 4)
    np.testing.assert_array_equal(rep.confusion, np.diag([3, 5, 2, 7]))
    assert rep.ua == 1.0


def test_constant_predictor_on_balanced_classes():
    y = np.repeat(np.arange(4), 10)
    assert report_from_predictions(y, np.full(40, 2), 4).ua == pytest.approx(0.25)


def test_row_sums_are_class_counts():
    rng = np.random.default_rng(0)
    y, p = rng.integers(0, 5, 300), rng.integers(0, 5, 300)
    cm = confusion_matrix(y, p, 5)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(y, minlength=5))
    assert cm.sum() == 300


@pytest.mark.parametrize("seed", range(5))
def test_ua_invariant_under_relabeling(seed):
    rng = np.random.default_rng(seed)
    y, p = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
    perm = rng.permutation(4)
    a = report_from_predictions(y, p, 4).ua
    b = report_from_predictions(perm[y], perm[p], 4).ua
    assert a == pytest.approx(b, abs=1e-12)


def test_absent_class_warns_and_is_skipped():
    rep = report_from_predictions([0, 0, 1], [0, 1, 1], 3)
    assert rep.warnings and np.isnan(rep.recalls[2])
    assert rep.ua == pytest.approx(0.75)
    assert rep.to_dict()["recalls"][2] is None


def test_evaluate_averages_segments():
    ds = synth_dataset(SynthConfig(samples_per_class=4, segments=(1, 3), frames=8, mel_bins=8))
    params = init_params(TINY_ARCH, 4, 0)
    rep = evaluate(params, ds, range(len(ds)))
    preds = [int(np.argmax(utterance_predict(list(ds.segments[i]), params))) for i in range(len(ds))]
    np.testing.assert_array_equal(rep.confusion, confusion_matrix(ds.labels, preds, 4))
    assert 0 <= rep.segment_accuracy <= 1


def test_sign_test_values():
    assert sign_test([]) == 1.0
    assert sign_test([0.1] * 5) == pytest.approx(2 / 32)
    assert sign_test([0.1, -0.1]) == 1.0


def _summary(uas, num_classes=4, folds=(0,)):
    return {
        "num_classes": num_classes,
        "ua_mean": float(np.mean(uas)),
        "folds": [
            {"fold": f, "mean_ua": float(np.mean(uas)), "trials": [{"trial": t, "ua": u} for t, u in enumerate(uas)]}
            for f in folds
        ],
    }


def test_compare_identical_runs():
    s = _summary([0.5, 0.6, 0.7])
    out = compare_runs(s, s)
    assert out["mean_delta"] == 0.0 and out["folds"][0]["trial_deltas"] == [0.0] * 3
    assert out["sign_test_p"] == 1.0


def test_compare_positive_delta():
    out = compare_runs(_summary([0.6, 0.7, 0.8]), _summary([0.5, 0.6, 0.7]))
    assert out["mean_delta"] == pytest.approx(0.1)
    assert out["wins"] == 3


def test_compare_guards():
    with pytest.raises(ValueError):
        compare_runs(_summary([0.5], num_classes=4), _summary([0.5], num_classes=3))
    with pytest.raises(ValueError):
        compare_runs(_summary([0.5], folds=(0, 1)), _summary([0.5], folds=(0,)))


# ---------------------------------------------------------------- experiment

def test_smoke_experiment(tmp_path):
    summary = run_experiment(smoke_config(), output_dir=tmp_path)
    assert summary["complete"]
    assert len(summary["folds"]) == 1 and len(summary["folds"][0]["trials"]) == 1
    trial = summary["folds"][0]["trials"][0]
    assert 0 <= trial["ua"] <= 1 and len(trial["ua_curve"]) == 1
    report = json.loads((tmp_path / "fold0/trial0/report.json").read_text())
    assert sum(map(sum, report["confusion"])) == summary["folds"][0]["test_size"]
    assert (tmp_path / "fold0/trial0/final.params").exists()
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and "final" in json.loads(lines[-1])


def test_experiment_rerun_byte_identical(tmp_path):
    cfg = smoke_config(selftrain=SelfTrainConfig(beta=1.0), partition=PartitionConfig(labeled_fraction=0.5))
    run_experiment(cfg, output_dir=tmp_path / "a")
    run_experiment(cfg, output_dir=tmp_path / "b")
    for name in ("summary.json", "metrics.jsonl", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_three_table_modes_from_one_config():
    base = smoke_config()
    modes = {
        "sup100": (1.0, 0.0), "sup10": (0.1, 0.0), "semi10": (0.1, 1.0),
    }
    for L, beta in modes.values():
        cfg = ExperimentConfig.from_dict({
            **base.to_dict(),
            "partition": {**base.to_dict()["partition"], "labeled_fraction": L},
            "selftrain": {**base.to_dict()["selftrain"], "beta": beta},
        })
        assert run_experiment(cfg)["complete"]


def test_failed_trial_marks_incomplete(monkeypatch):
    from fedser.harness import experiment

    def boom(*a, **kw):
        raise RuntimeError("simulated")

    monkeypatch.setattr(experiment, "run_federation", boom)
    summary = run_experiment(smoke_config())
    assert not summary["complete"]
    assert summary["folds"][0]["trials"][0]["status"] == "failed"


def test_config_roundtrip_and_validation(tmp_path):
    cfg = smoke_config(seeds=[7], trials=1)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back.digest() == cfg.digest()
    with pytest.raises(ConfigError):
        ExperimentConfig(trials=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(trials=2, seeds=[1])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"optimizer": {}})


# ---------------------------------------------------------------- CLI

def test_cli_end_to_end(tmp_path):
    runner = CliRunner()
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(smoke_config().to_dict()))
    data = tmp_path / "d.npz"

    res = runner.invoke(main, ["synth", "--out", str(data), "--samples-per-class", "10", "--speakers", "4",
                               "--frames", "8", "--mel-bins", "8"])
    assert res.exit_code == 0, res.output

    res = runner.invoke(main, ["partition", "--data", str(data), "--out", str(tmp_path / "plan.json"), "-K", "4",
                               "--partition-mode", "per_speaker", "-L", "0.1"])
    assert res.exit_code == 0, res.output
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert len(plan["devices"]) == 4

    for name, extra in [("a", ["--beta", "1.0"]), ("b", ["--beta", "0"])]:
        res = runner.invoke(main, ["run", "--config", str(cfg_path), "--data", str(data), "--out", str(tmp_path / name),
                                   "-K", "2", "-R", "1", "-q", "1.0", "-E", "1", "-L", "0.5", "--sigma", "0",
                                   "-T", "2", "--tau-min", "0.5", "--tau-max", "0.9", "--delta", "0.5",
                                   "--scheduler-mode", "corrected", *extra])
        assert res.exit_code == 0, res.output
        assert "UA mean" in res.output

    res = runner.invoke(main, ["eval", "--checkpoint", str(tmp_path / "a/fold0/trial0/final.params"),
                               "--data", str(data), "--plan", str(tmp_path / "a/fold0/trial0/plan.json")])
    assert res.exit_code == 0, res.output
    assert 0 <= json.loads(res.output)["ua"] <= 1

    res = runner.invoke(main, ["compare", str(tmp_path / "a/summary.json"), str(tmp_path / "b/summary.json")])
    assert res.exit_code == 0, res.output
    assert "mean_delta" in json.loads(res.output)


def test_cli_rejects_bad_flags(tmp_path):
    res = CliRunner().invoke(main, ["run", "--out", str(tmp_path), "--scheduler-mode", "cosine"])
    assert res.exit_code != 0
