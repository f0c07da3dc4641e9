import sys

import numpy as np
import pytest

from rlseg.data import FeatureSequence, LabelSequence, SynthConfig, Trial, synth_generate


def make_trial(labels, n_classes=None, dim=None, trial_id="T", subject_id="S", rng=0, scale=3.0, noise=0.5):
    y = np.asarray(labels, dtype=np.int64)
    n_classes = n_classes or int(y.max()) + 1
    dim = dim or n_classes
    x = np.random.default_rng(rng).normal(0.0, noise, (y.size, dim))
    x[np.arange(y.size), y] += scale
    return Trial(FeatureSequence(x, trial_id, subject_id), LabelSequence(y, n_classes))


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(SynthConfig(n_classes=4, feature_dim=6, n_trials=6, n_subjects=3,
                                      segments_per_trial=6, duration_mean=(8, 10, 12, 14), seed=3))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
