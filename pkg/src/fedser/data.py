"""Datasets, cross-validation folds and device partitioning."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

EMOTIONS = ("neutral", "happy", "sad", "angry")


@dataclass
class Dataset:
    """Utterances as stacks of feature segments, each ``(n_seg, frames, mel_bins)``."""

    segments: list[np.ndarray]
    labels: np.ndarray
    speakers: np.ndarray
    sessions: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.speakers = np.asarray(self.speakers).astype(str)
        self.sessions = np.asarray(self.sessions).astype(str)
        self.class_names = tuple(self.class_names)
        n = len(self.segments)
        if not (len(self.labels) == len(self.speakers) == len(self.sessions) == n):
            raise InputError("per-sample fields have different lengths")
        if n == 0:
            raise InputError("no samples")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InputError("label outside the class vocabulary")
        missing = set(range(self.num_classes)) - set(self.labels.tolist())
        if missing:
            raise InputError(f"classes without samples: {sorted(self.class_names[i] for i in missing)}")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def segment_shape(self) -> tuple[int, int]:
        return tuple(self.segments[0].shape[1:])

    def stack(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """Flatten utterances ``ids`` into (segments, labels) training arrays."""
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) == 0:
            return np.zeros((0,) + self.segment_shape, np.float32), np.zeros(0, np.int64)
        segs = [self.segments[i] for i in ids]
        x = np.concatenate(segs)
        y = np.repeat(self.labels[ids], [len(s) for s in segs])
        return x, y

    def save(self, path) -> None:
        lengths = np.array([len(s) for s in self.segments])
        np.savez(
            path,
            segments=np.concatenate(self.segments).astype(np.float32),
            lengths=lengths,
            labels=self.labels,
            speakers=self.speakers,
            sessions=self.sessions,
            class_names=np.array(self.class_names),
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            bounds = np.cumsum(np.concatenate([[0], z["lengths"]]))
            flat = z["segments"]
            segs = [flat[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
            return cls(segs, z["labels"], z["speakers"], z["sessions"], tuple(z["class_names"].tolist()))


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class PartitionConfig:
    mode: str = "random"  # random | per_speaker
    sigma: float = 0.25  # coefficient of variation of device sizes
    labeled_fraction: float = 1.0
    folds: str = "kfold"  # loso | kfold
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random", "per_speaker"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.folds not in ("loso", "kfold"):
            raise ConfigError(f"unknown fold strategy {self.folds!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must lie in (0, 1]")
        if self.k < 2:
            raise ConfigError("k must be >= 2")


@dataclass
class DeviceShard:
    labeled: list[int]
    unlabeled: list[int]
    speakers: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.labeled) + len(self.unlabeled)


@dataclass
class PartitionPlan:
    devices: list[DeviceShard]
    test: list[int]
    fold: int
    num_samples: int
    provenance: dict
    warnings: list[str] = field(default_factory=list)

    @property
    def num_devices(self) -> int:
        return len(self.devices)

    def check(self) -> None:
        """Shards and the test fold must be pairwise disjoint and cover every sample."""
        seen: set[int] = set()
        total = 0
        for part in [d.labeled for d in self.devices] + [d.unlabeled for d in self.devices] + [self.test]:
            seen.update(part)
            total += len(part)
        if total != len(seen):
            raise AssertionError("partition shards overlap")
        if seen != set(range(self.num_samples)):
            raise AssertionError("partition does not cover the dataset")

    def to_dict(self) -> dict:
        assignment = {}
        for k, d in enumerate(self.devices):
            for i in d.labeled:
                assignment[i] = {"device": k, "labeled": True, "split": "train"}
            for i in d.unlabeled:
                assignment[i] = {"device": k, "labeled": False, "split": "train"}
        for i in self.test:
            assignment[i] = {"device": None, "labeled": True, "split": "test"}
        return {
            "fold": self.fold,
            "num_samples": self.num_samples,
            "provenance": self.provenance,
            "warnings": self.warnings,
            "devices": [asdict(d) for d in self.devices],
            "test": list(self.test),
            "samples": [dict(id=i, **assignment[i]) for i in sorted(assignment)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        devices = [DeviceShard(**x) for x in d["devices"]]
        return cls(devices, list(d["test"]), d["fold"], d["num_samples"], d["provenance"], list(d.get("warnings", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "PartitionPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- folds

def make_folds(ds: Dataset, cfg: PartitionConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Train/test id pairs: one per session (LOSO) or ``k`` stratified folds."""
    ids = np.arange(len(ds))
    if cfg.folds == "loso":
        groups = sorted(set(ds.sessions.tolist()))
        if len(groups) < 2:
            raise ConfigError("LOSO needs at least two sessions")
        return [(ids[ds.sessions != g], ids[ds.sessions == g]) for g in groups]

    rng = np.random.default_rng([cfg.seed, 0xF01D])
    if len(ds) < cfg.k:
        raise ConfigError(f"{len(ds)} samples cannot fill {cfg.k} folds")
    # Deal class-sorted shuffled ids round robin: fold sizes and per-class
    # counts then differ by at most one across folds.
    order = np.concatenate([rng.permutation(ids[ds.labels == c]) for c in range(ds.num_classes)])
    fold_of = np.empty(len(ds), dtype=np.int64)
    fold_of[order] = np.arange(len(ds)) % cfg.k
    return [(ids[fold_of != f], ids[fold_of == f]) for f in range(cfg.k)]


# ---------------------------------------------------------------- labeled split

@dataclass
class LabelSplit:
    labeled: np.ndarray
    unlabeled: np.ndarray
    empty_classes: list[int]


def _round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def split_labeled(ids, labels, fraction: float, seed) -> LabelSplit:
    """Pick ``round(fraction * count)`` labeled ids per class, keeping class ratios.

    Per-class counts are nudged by one where needed so the labeled total equals
    ``round(fraction * len(ids))``.
    """
    if not 0 < fraction <= 1:
        raise ConfigError("labeled fraction must lie in (0, 1]")
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels[ids]) if len(ids) else np.zeros(0, np.int64)
    counts = np.array([(labels[ids] == c).sum() for c in classes])
    exact = fraction * counts
    take = np.minimum(_round_half_up(exact), counts)
    target = int(_round_half_up(fraction * len(ids)))
    remainder = exact - take
    while take.sum() < target:
        room = np.where(take < counts, remainder, -np.inf)
        j = int(np.argmax(room))
        take[j] += 1
        remainder[j] -= 1
    while take.sum() > target:
        room = np.where(take > 0, remainder, np.inf)
        j = int(np.argmin(room))
        take[j] -= 1
        remainder[j] += 1

    rng = np.random.default_rng(seed)
    labeled, unlabeled, empty = [], [], []
    for c, n in zip(classes, take):
        members = rng.permutation(ids[labels[ids] == c])
        labeled.append(members[:n])
        unlabeled.append(members[n:])
        if n == 0:
            empty.append(int(c))
    if empty:
        log.warning("classes %s received no labeled samples", empty)
    cat = lambda xs: np.sort(np.concatenate(xs)) if xs else np.zeros(0, np.int64)
    return LabelSplit(cat(labeled), cat(unlabeled), empty)


# ---------------------------------------------------------------- device assignment

def device_sizes(n: int, num_devices: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Shard sizes drawn around ``n / K`` with coefficient of variation ``sigma``.

    Draws are truncated below at one sample, then rescaled to sum to ``n``
    with largest-remainder rounding.
    """
    if num_devices > n:
        raise ConfigError(f"{num_devices} devices but only {n} samples")
    mean = n / num_devices
    if sigma == 0:
        raw = np.full(num_devices, mean)
    else:
        raw = rng.normal(mean, sigma * mean, num_devices)
        while (bad := raw < 1).any():
            raw[bad] = rng.normal(mean, sigma * mean, bad.sum())
    scaled = raw * n / raw.sum()
    sizes = np.floor(scaled).astype(np.int64)
    short = n - sizes.sum()
    order = np.argsort(-(scaled - sizes), kind="stable")
    sizes[order[:short]] += 1
    for k in np.flatnonzero(sizes == 0):
        donor = int(np.argmax(sizes))
        sizes[donor] -= 1
        sizes[k] += 1
    return sizes


def assign_devices(train_ids, ds: Dataset, cfg: PartitionConfig, num_devices: int, fold: int = 0,
                   test_ids=None) -> PartitionPlan:
    """Distribute training ids over devices, then split each shard into labeled/unlabeled."""
    train_ids = np.asarray(train_ids, dtype=np.int64)
    rng = np.random.default_rng([cfg.seed, fold, 0xDE71CE])
    if cfg.mode == "random":
        sizes = device_sizes(len(train_ids), num_devices, cfg.sigma, rng)
        shuffled = rng.permutation(train_ids)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        groups = [shuffled[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        speaker_sets = [sorted(set(ds.speakers[g].tolist())) for g in groups]
    else:
        speakers = sorted(set(ds.speakers[train_ids].tolist()))
        if num_devices > len(speakers):
            raise ConfigError(f"per_speaker partition needs K <= speakers ({num_devices} > {len(speakers)})")
        order = rng.permutation(len(speakers))
        speaker_sets = [sorted(speakers[j] for j in order[k::num_devices]) for k in range(num_devices)]
        groups = [train_ids[np.isin(ds.speakers[train_ids], s)] for s in speaker_sets]

    devices, warnings = [], []
    for k, g in enumerate(groups):
        split = split_labeled(g, ds.labels, cfg.labeled_fraction, [cfg.seed, fold, k])
        if split.empty_classes:
            warnings.append(f"device {k}: no labeled samples for classes {split.empty_classes}")
        devices.append(DeviceShard(split.labeled.tolist(), split.unlabeled.tolist(), speaker_sets[k]))

    if test_ids is None:
        test_ids = np.setdiff1d(np.arange(len(ds)), train_ids)
    provenance = {"partition": asdict(cfg), "num_devices": num_devices, "fold": fold}
    return PartitionPlan(devices, sorted(int(i) for i in test_ids), fold, len(ds), provenance, warnings)


def build_plans(ds: Dataset, cfg: PartitionConfig, num_devices: int) -> list[PartitionPlan]:
    return [
        assign_devices(train, ds, cfg, num_devices, fold=f, test_ids=test)
        for f, (train, test) in enumerate(make_folds(ds, cfg))
    ]


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    samples_per_class: int = 100
    num_speakers: int = 8
    speakers_per_session: int = 2
    frames: int = 32
    mel_bins: int = 32
    segments: tuple[int, int] = (1, 1)  # inclusive range of segments per utterance
    noise: float = 0.6
    speaker_shift: float = 3.0  # max band shift in mel bins
    speaker_gain: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.num_speakers < 1 or self.samples_per_class < 1:
            raise ConfigError("need at least one speaker and one sample per class")
        lo, hi = self.segments
        if not 1 <= lo <= hi:
            raise ConfigError("segments range must satisfy 1 <= lo <= hi")


def _class_prototypes(cfg: SynthConfig):
    """Band center, ripple rate and envelope kind per class."""
    c = cfg.num_classes
    centers = np.linspace(0.3, 0.7, c) * cfg.mel_bins
    rates = 1.0 + (np.arange(c) * 3) % (c + 1)  # temporal modulation cycles per segment
    kinds = [k % 4 for k in range(c)]
    perm = np.random.default_rng(1234).permutation(c)  # decorrelate the three cues
    return centers[perm], rates, kinds


def _envelope(kind: int, t: np.ndarray) -> np.ndarray:
    if kind == 0:
        return t
    if kind == 1:
        return 1.0 - t
    if kind == 2:
        return np.exp(-((t - 0.5) ** 2) / 0.05)
    return np.full_like(t, 0.6)


def synth_dataset(cfg: SynthConfig = SynthConfig()) -> Dataset:
    """Log-Mel-like tensors with class prototypes and per-speaker distortions.

    Each class is a spectral band with its own temporal ripple rate and
    envelope; each speaker shifts the band and the overall gain, so device
    shards built per speaker are not identically distributed.
    """
    rng = np.random.default_rng([cfg.seed, 0x5E7])
    centers, rates, kinds = _class_prototypes(cfg)
    spk_shift = rng.uniform(-cfg.speaker_shift, cfg.speaker_shift, cfg.num_speakers)
    spk_gain = rng.normal(0.0, cfg.speaker_gain, cfg.num_speakers)
    spk_tilt = rng.normal(0.0, 0.5, cfg.num_speakers)
    t = np.linspace(0.0, 1.0, cfg.frames)[:, None]
    m = np.arange(cfg.mel_bins)[None, :]

    segments, labels, speakers, sessions = [], [], [], []
    for c in range(cfg.num_classes):
        for i in range(cfg.samples_per_class):
            s = (i + c) % cfg.num_speakers
            n_seg = int(rng.integers(cfg.segments[0], cfg.segments[1] + 1))
            segs = []
            for _ in range(n_seg):
                phase = rng.uniform(0, 2 * np.pi)
                width = rng.uniform(2.0, 3.5)
                amp = rng.uniform(1.5, 2.5)
                center = centers[c] + spk_shift[s] + rng.normal(0, 1.0)
                band = np.exp(-((m - center) ** 2) / (2 * width**2))
                ripple = 0.5 + 0.5 * np.sin(2 * np.pi * rates[c] * t + phase)
                x = amp * _envelope(kinds[c], t) * ripple * band
                x = x + spk_gain[s] + spk_tilt[s] * (m / cfg.mel_bins - 0.5)
                x = x + rng.normal(0, cfg.noise, x.shape)
                segs.append(x.astype(np.float32))
            segments.append(np.stack(segs))
            labels.append(c)
            speakers.append(f"spk{s:02d}")
            sessions.append(f"ses{s // cfg.speakers_per_session:02d}")
    names = EMOTIONS if cfg.num_classes == len(EMOTIONS) else tuple(f"class{c}" for c in range(cfg.num_classes))
    return Dataset(segments, np.array(labels), np.array(speakers), np.array(sessions), names)


# ---------------------------------------------------------------- manifest loading

class ManifestError(InputError):
    def __init__(self, message: str, report: list[str]):
        super().__init__(message + ("\n  " + "\n  ".join(report) if report else ""))
        self.report = report


def load_manifest(path, feature_cfg=None, class_names=EMOTIONS, permissive: bool = False):
    """Read ``path,speaker_id,label[,session]`` rows pointing at WAV or feature files.

    Returns ``(dataset, report)``. Any problem row raises :class:`ManifestError`
    unless ``permissive`` is set, in which case bad rows are skipped and listed.
    """
    from . import features

    feature_cfg = feature_cfg or features.FeatureConfig()
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    vocab = {name.lower(): i for i, name in enumerate(class_names)}
    report: list[str] = []
    segments, labels, speakers, sessions = [], [], [], []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ManifestError("no samples", [])
    for line, row in enumerate(rows, start=2):
        try:
            raw = (row.get("label") or "").strip()
            if raw.lower() in vocab:
                label = vocab[raw.lower()]
            elif raw.isdigit() and int(raw) < len(class_names):
                label = int(raw)
            else:
                raise InputError(f"unknown label {raw!r}")
            fpath = Path(row["path"])
            if not fpath.is_absolute():
                fpath = path.parent / fpath
            if not fpath.exists():
                raise InputError(f"missing file {fpath}")
            if fpath.suffix.lower() == ".wav":
                clip = features.read_wav(fpath)
                if clip.sample_rate != feature_cfg.sample_rate:
                    raise InputError(f"sample rate {clip.sample_rate} != {feature_cfg.sample_rate}")
                segs = features.extract(clip, feature_cfg)
            else:
                segs = np.stack(features.segment(features.read_features(fpath), feature_cfg)).astype(np.float32)
        except (InputError, KeyError, OSError, EOFError) as exc:
            report.append(f"line {line}: {exc}")
            continue
        speaker = row["speaker_id"].strip()
        segments.append(segs)
        labels.append(label)
        speakers.append(speaker)
        sessions.append((row.get("session") or speaker).strip())
    if report and not permissive:
        raise ManifestError(f"{len(report)} bad manifest rows", report)
    if not segments:
        raise ManifestError("no samples", report)
    return Dataset(segments, np.array(labels), np.array(speakers), np.array(sessions), tuple(class_names)), report
