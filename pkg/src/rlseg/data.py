"""Sequences, segments, datasets: file ingestion, synthesis and LOUO splits.

Class labels are 1-based in files and 0-based everywhere in memory.
"""
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class DataError(ValueError):
    """Raised for malformed datasets; the message names the offending trial."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray  # (n_t, n_x)
    trial_id: str
    subject_id: str

    def __post_init__(self):
        frames = _frozen(self.frames, np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise DataError(f"trial {self.trial_id}: features must be a non-empty (n_t, n_x) array")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass(frozen=True)
class LabelSequence:
    labels: np.ndarray  # 0-based class ids
    n_classes: int

    def __post_init__(self):
        labels = _frozen(self.labels, np.int64)
        if labels.ndim != 1 or labels.size < 1:
            raise DataError("label sequence must be non-empty and one-dimensional")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise DataError(f"labels must lie in 1..{self.n_classes}")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]


@dataclass(frozen=True)
class Segment:
    class_id: int
    start: int
    end: int  # inclusive

    @property
    def length(self):
        return self.end - self.start + 1


def segments_from_labels(labels) -> List[Segment]:
    """Run-length encode a label sequence into maximal same-class segments."""
    y = labels.labels if isinstance(labels, LabelSequence) else np.asarray(labels)
    if y.size == 0:
        return []
    cuts = np.flatnonzero(y[1:] != y[:-1]) + 1
    starts = np.concatenate(([0], cuts))
    ends = np.concatenate((cuts - 1, [y.size - 1]))
    return [Segment(int(y[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def labels_from_segments(segments: Sequence[Segment]) -> np.ndarray:
    return np.concatenate([np.full(s.length, s.class_id, dtype=np.int64) for s in segments])


@dataclass(frozen=True)
class Trial:
    features: FeatureSequence
    labels: LabelSequence

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DataError(
                f"trial {self.features.trial_id}: {len(self.features)} feature rows "
                f"but {len(self.labels)} labels (length mismatch)"
            )

    @property
    def trial_id(self):
        return self.features.trial_id

    @property
    def subject_id(self):
        return self.features.subject_id

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class Dataset:
    trials: Tuple[Trial, ...]
    vocab: Tuple[str, ...]
    # generator ground truth for synthetic datasets (transition matrix, durations)
    meta: Dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if not self.trials:
            raise DataError("no trials")
        dims = {t.features.dim for t in self.trials}
        if len(dims) != 1:
            first = self.trials[0].features.dim
            bad = next(t for t in self.trials if t.features.dim != first)
            raise DataError(f"trial {bad.trial_id}: feature dimension {bad.features.dim} != {first}")
        for t in self.trials:
            if t.labels.n_classes != len(self.vocab):
                raise DataError(f"trial {t.trial_id}: n_y {t.labels.n_classes} != vocab size {len(self.vocab)}")

    @property
    def n_classes(self):
        return len(self.vocab)

    @property
    def feature_dim(self):
        return self.trials[0].features.dim

    @property
    def subjects(self):
        return sorted({t.subject_id for t in self.trials})

    def subset(self, trials):
        return Dataset(tuple(trials), self.vocab, self.meta)

    def __len__(self):
        return len(self.trials)


# --- file formats -----------------------------------------------------------

def read_features(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2))


def write_features(path, frames):
    np.savetxt(path, frames, delimiter=",", fmt="%.17g")


def read_labels(path) -> np.ndarray:
    """Read a 1-based label file, returning 1-based integers."""
    return np.loadtxt(path, dtype=np.int64, ndmin=1)


def write_labels(path, labels0):
    """Write 0-based labels as a 1-based label file."""
    np.savetxt(path, np.asarray(labels0, dtype=np.int64) + 1, fmt="%d")


def load_dataset(root_path, manifest) -> Dataset:
    """Load trials listed in a JSON manifest.

    Manifest paths are resolved relative to ``root_path``. The manifest holds
    ``n_classes`` (or ``class_names``) and a ``trials`` list of
    ``{trial_id, subject_id, feature_path, label_path}``.
    """
    root_path = os.fspath(root_path)
    mpath = manifest if os.path.isabs(os.fspath(manifest)) else os.path.join(root_path, manifest)
    with open(mpath) as fh:
        spec = json.load(fh)
    entries = spec.get("trials") or []
    if not entries:
        raise DataError("no trials")
    names = spec.get("class_names")
    n_y = int(spec.get("n_classes", len(names) if names else 0))
    if names is None:
        names = [f"G{i + 1}" for i in range(n_y)]
    if n_y < 1 or len(names) != n_y:
        raise DataError("manifest must declare n_classes matching class_names")

    trials = []
    dim = None
    for e in entries:
        tid = str(e["trial_id"])
        fpath = os.path.join(root_path, e["feature_path"])
        lpath = os.path.join(root_path, e["label_path"])
        for p in (fpath, lpath):
            if not os.path.exists(p):
                raise DataError(f"trial {tid}: missing file {p}")
        x = read_features(fpath)
        y = read_labels(lpath)
        if dim is None:
            dim = x.shape[1]
        elif x.shape[1] != dim:
            raise DataError(f"trial {tid}: feature dimension {x.shape[1]} != {dim} (dimension mismatch)")
        if y.min() < 1 or y.max() > n_y:
            raise DataError(f"trial {tid}: label out of range 1..{n_y}")
        if len(x) != len(y):
            raise DataError(f"trial {tid}: {len(x)} feature rows but {len(y)} labels (length mismatch)")
        trials.append(Trial(FeatureSequence(x, tid, str(e["subject_id"])), LabelSequence(y - 1, n_y)))
    return Dataset(tuple(trials), tuple(names))


def save_dataset(dataset: Dataset, root_path, manifest_name="manifest.json"):
    """Write ``dataset`` in the on-disk format read by :func:`load_dataset`."""
    os.makedirs(root_path, exist_ok=True)
    entries = []
    for t in dataset.trials:
        fname, lname = f"{t.trial_id}.features.csv", f"{t.trial_id}.labels.txt"
        write_features(os.path.join(root_path, fname), t.features.frames)
        write_labels(os.path.join(root_path, lname), t.labels.labels)
        entries.append(dict(trial_id=t.trial_id, subject_id=t.subject_id,
                            feature_path=fname, label_path=lname))
    spec = dict(n_classes=dataset.n_classes, class_names=list(dataset.vocab), trials=entries)
    path = os.path.join(root_path, manifest_name)
    with open(path, "w") as fh:
        json.dump(spec, fh, indent=1)
    return path


# --- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 8
    feature_dim: int = 16
    n_trials: int = 20
    n_subjects: int = 4
    segments_per_trial: int = 12
    # per-class duration statistics; None -> evenly spread defaults
    duration_mean: Optional[Tuple[float, ...]] = None
    duration_std: Optional[Tuple[float, ...]] = None
    sparsity: float = 0.5
    noise: float = 1.3
    # AR(1) coefficient of the per-dimension noise; 0 gives i.i.d. frames
    noise_corr: float = 0.0
    # std (frames) of a Gaussian blur of the evidence along time; 0 keeps sharp boundaries
    evidence_blur: float = 0.0
    evidence_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.feature_dim < self.n_classes:
            raise ValueError("feature_dim must be >= n_classes")
        if self.n_trials < 1 or self.n_subjects < 1 or self.segments_per_trial < 1:
            raise ValueError("trial, subject and segment counts must be positive")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0.0 <= self.noise_corr < 1.0:
            raise ValueError("noise_corr must lie in [0, 1)")
        if self.evidence_blur < 0:
            raise ValueError("evidence_blur must be >= 0")
        mu, sd = self.durations()
        if mu.shape != (self.n_classes,) or sd.shape != (self.n_classes,):
            raise ValueError("duration tables must have one entry per class")
        if np.any(mu <= 0) or np.any(sd <= 0):
            raise ValueError("durations must be strictly positive")

    def durations(self):
        if self.duration_mean is None:
            mu = np.linspace(20.0, 60.0, self.n_classes)
        else:
            mu = np.asarray(self.duration_mean, dtype=np.float64)
        sd = 0.3 * mu if self.duration_std is None else np.asarray(self.duration_std, dtype=np.float64)
        return mu, sd


def random_bigram(n_classes, sparsity, rng) -> np.ndarray:
    """Row-stochastic matrix with zero diagonal and a fraction ``sparsity`` of
    the off-diagonal entries removed (each row keeps at least one)."""
    P = np.zeros((n_classes, n_classes))
    for j in range(n_classes):
        others = np.array([i for i in range(n_classes) if i != j])
        keep = max(1, int(round((1.0 - sparsity) * others.size)))
        cols = rng.choice(others, size=keep, replace=False)
        P[j, cols] = rng.dirichlet(np.ones(keep))
    return P


def _blur(e, sigma):
    """Gaussian smoothing of the rows of ``e`` along time (edge-padded)."""
    if sigma <= 0:
        return e
    r = int(np.ceil(3 * sigma))
    w = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    w /= w.sum()
    padded = np.concatenate([np.repeat(e[:1], r, axis=0), e, np.repeat(e[-1:], r, axis=0)])
    return np.stack([np.convolve(padded[:, j], w, mode="valid") for j in range(e.shape[1])], axis=1)


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Sample a dataset from a Gaussian-duration semi-Markov process.

    Frames carry ``evidence_scale`` times the one-hot of their class in the
    first ``n_classes`` feature dimensions, plus Gaussian noise of marginal
    scale ``noise`` on every dimension. With ``noise_corr > 0`` the noise is
    a stationary AR(1) process along time, and ``evidence_blur > 0`` smears
    the evidence across segment boundaries. Both mimic the temporally smooth
    activations of a learned feature extractor.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_classes
    P = random_bigram(n, cfg.sparsity, rng)
    mu, sd = cfg.durations()
    trials = []
    for k in range(cfg.n_trials):
        c = int(rng.integers(n))
        labels = []
        for _ in range(cfg.segments_per_trial):
            d = max(1, int(np.rint(rng.normal(mu[c], sd[c]))))
            labels.append(np.full(d, c, dtype=np.int64))
            c = int(rng.choice(n, p=P[c]))
        y = np.concatenate(labels)
        x = rng.normal(0.0, 1.0, (y.size, cfg.feature_dim))
        if cfg.noise_corr > 0:
            rho = cfg.noise_corr
            x[1:] *= np.sqrt(1.0 - rho * rho)
            for t in range(1, y.size):
                x[t] += rho * x[t - 1]
        x *= cfg.noise
        x[:, :n] += cfg.evidence_scale * _blur(np.eye(n)[y], cfg.evidence_blur)
        sid = f"S{k % cfg.n_subjects + 1:02d}"
        trials.append(Trial(FeatureSequence(x, f"T{k + 1:03d}", sid), LabelSequence(y, n)))
    meta = dict(transition=P, duration_mean=mu, duration_std=sd)
    return Dataset(tuple(trials), tuple(f"G{i + 1}" for i in range(n)), meta)


def argmax_baseline(trial: Trial) -> np.ndarray:
    """Per-frame argmax over the class-evidence dimensions."""
    n = trial.labels.n_classes
    return np.argmax(trial.features.frames[:, :n], axis=1).astype(np.int64)


# --- cross-validation -------------------------------------------------------

def louo_splits(dataset: Dataset) -> List[Tuple[Dataset, Dataset]]:
    """Leave-one-user-out folds, ordered by subject id."""
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise DataError("leave-one-user-out needs at least two subjects")
    folds = []
    for s in subjects:
        test = [t for t in dataset.trials if t.subject_id == s]
        train = [t for t in dataset.trials if t.subject_id != s]
        folds.append((dataset.subset(train), dataset.subset(test)))
    return folds
