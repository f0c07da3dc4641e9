"""Bigram gesture-transition model with Gaussian segment durations.

The probability of moving from class ``j`` to ``i`` after ``l`` frames in
``j`` is ``P[j, i] * CDF_j(l)`` for ``i != j``, and ``1 - CDF_j(l)`` for
staying, where ``P`` is the smoothed, row-normalized bigram table and
``CDF_j`` the Gaussian CDF of class ``j``'s duration.
"""
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, segments_from_labels

SMOOTHING_EPS = 1e-3
STD_FLOOR = 1.0


@dataclass(frozen=True)
class DurationLanguageModel:
    bigram_counts: np.ndarray  # N(j, i), zero diagonal
    unigram_counts: np.ndarray  # N(j)
    duration_mean: np.ndarray
    duration_std: np.ndarray
    smoothing_eps: float = SMOOTHING_EPS

    def __post_init__(self):
        for name in ("bigram_counts", "unigram_counts", "duration_mean", "duration_std"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        n = self.n_classes
        off = self.bigram_counts + self.smoothing_eps
        np.fill_diagonal(off, 0.0)
        rows = off / off.sum(axis=1, keepdims=True)
        rows.flags.writeable = False
        object.__setattr__(self, "_rows", rows)
        assert self.bigram_counts.shape == (n, n)

    @property
    def n_classes(self):
        return self.unigram_counts.shape[0]

    @property
    def transition_rows(self) -> np.ndarray:
        """Smoothed off-diagonal bigram rows, each summing to 1."""
        return self._rows

    def cdf(self, j, l):
        z = (l - self.duration_mean[j]) / (self.duration_std[j] * math.sqrt(2.0))
        return 0.5 * math.erfc(-z)

    def transition_probs(self, j, l) -> np.ndarray:
        """Probability of each next class given ``l`` frames spent in class ``j``."""
        c = self.cdf(j, l)
        p = self._rows[j] * c
        p[j] = 1.0 - c
        return p

    def duration_stats(self):
        return self.duration_mean.copy(), self.duration_std.copy()

    # --- text serialization -------------------------------------------------

    def save(self, path):
        n = self.n_classes
        with open(path, "w") as fh:
            fh.write(f"# duration-language-model n_classes {n} smoothing_eps {self.smoothing_eps!r}\n")
            fh.write("unigram " + " ".join(repr(float(v)) for v in self.unigram_counts) + "\n")
            fh.write("mean " + " ".join(repr(float(v)) for v in self.duration_mean) + "\n")
            fh.write("std " + " ".join(repr(float(v)) for v in self.duration_std) + "\n")
            for j in range(n):
                fh.write("bigram " + " ".join(repr(float(v)) for v in self.bigram_counts[j]) + "\n")

    @classmethod
    def load(cls, path):
        rows = {"bigram": []}
        eps = SMOOTHING_EPS
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "#":
                    eps = float(parts[parts.index("smoothing_eps") + 1])
                    continue
                vals = [float(v) for v in parts[1:]]
                if parts[0] == "bigram":
                    rows["bigram"].append(vals)
                else:
                    rows[parts[0]] = vals
        return cls(np.array(rows["bigram"]), np.array(rows["unigram"]),
                   np.array(rows["mean"]), np.array(rows["std"]), eps)


def fit(train: Dataset, smoothing_eps=SMOOTHING_EPS, std_floor=STD_FLOOR) -> DurationLanguageModel:
    """Count ordered segment pairs and fit per-class Gaussian durations by MLE.

    Classes absent from ``train`` get the mean duration over all segments and
    ``std_floor``; their bigram rows fall back to the uniform smoothing mass.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    n = train.n_classes
    N = np.zeros((n, n))
    lengths = [[] for _ in range(n)]
    for trial in train.trials:
        segs = segments_from_labels(trial.labels)
        for a, b in zip(segs[:-1], segs[1:]):
            N[a.class_id, b.class_id] += 1
        for s in segs:
            lengths[s.class_id].append(s.length)
    unigram = np.array([len(x) for x in lengths], dtype=np.float64)
    pooled = np.concatenate([np.asarray(x, dtype=np.float64) for x in lengths if x])
    mean = np.empty(n)
    std = np.empty(n)
    for j, x in enumerate(lengths):
        if x:
            x = np.asarray(x, dtype=np.float64)
            mean[j] = x.mean()
            std[j] = max(x.std(), std_floor)
        else:
            mean[j] = pooled.mean()
            std[j] = std_floor
    return DurationLanguageModel(N, unigram, mean, std, smoothing_eps)


def default_step_sizes(train: Dataset):
    """Small step = shortest training segment; large step = smallest per-class
    mean segment length (rounded). Returns a strictly increasing pair."""
    shortest = None
    lengths = [[] for _ in range(train.n_classes)]
    for trial in train.trials:
        for s in segments_from_labels(trial.labels):
            lengths[s.class_id].append(s.length)
            shortest = s.length if shortest is None else min(shortest, s.length)
    k_s = max(1, int(shortest))
    k_l = max(1, int(round(min(np.mean(x) for x in lengths if x))))
    if k_l <= k_s:
        k_l = k_s + 1
    return k_s, k_l
