"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats N] [--frames N]

Both backends are importable in one process: the env flag only chooses which
one the package calls by default.
"""
import argparse
import time

import numpy as np

from rlseg import kernels
from rlseg.env import ABLATIONS, ActionSpace
from rlseg.lm import DurationLanguageModel
from rlseg.policy import MlpPolicy


def best_of(fn, repeats):
    fn()  # warm-up (numba compiles here)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def rollout_args(n_frames, n_feat=32, n_classes=10, seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n_frames, n_feat))
    truth = np.repeat(rng.integers(0, n_classes, n_frames // 20 + 1), 20)[:n_frames]
    counts = rng.integers(0, 5, (n_classes, n_classes)).astype(float)
    np.fill_diagonal(counts, 0)
    model = DurationLanguageModel(counts, np.ones(n_classes), np.full(n_classes, 20.0), np.full(n_classes, 6.0))
    acts = ActionSpace((4, 21), n_classes)
    flags = np.array(ABLATIONS["none"], dtype=np.int64)
    dim = int(kernels.state_dim(n_feat, n_classes, flags))
    pol = MlpPolicy.init(dim, acts.n_actions, 64, rng)
    return (feats, truth, acts.steps_array(), model.transition_rows, model.duration_mean,
            model.duration_std, flags, pol.w1, pol.b1, pol.w2, pol.b2, pol.obs_mean, pol.obs_scale,
            0.1, rng.random(n_frames), False)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--frames", type=int, default=5000, help="trial length for the rollout kernel")
    args = p.parse_args(argv)
    if kernels.rollout_numba is None:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(1)
    rows = []
    for n in (50, 500):
        a, b = rng.integers(0, 10, n), rng.integers(0, 10, n)
        t_nb = best_of(lambda: kernels.levenshtein_numba(a, b), args.repeats)
        t_np = best_of(lambda: kernels.levenshtein_numpy(a, b), args.repeats)
        t_py = best_of(lambda: kernels.levenshtein_loop(a, b), max(1, args.repeats // 2))
        assert kernels.levenshtein_numba(a, b) == kernels.levenshtein_numpy(a, b)
        rows.append((f"levenshtein n={n}", t_nb, t_np, t_py))

    ra = rollout_args(args.frames)
    t_nb = best_of(lambda: kernels.rollout_numba(*ra), args.repeats)
    t_np = best_of(lambda: kernels.rollout_numpy(*ra), max(1, args.repeats // 2))
    rows.append((f"rollout n_t={args.frames}", t_nb, t_np, float("nan")))

    print(f"{'kernel':<24}{'numba ms':>12}{'numpy ms':>12}{'loop ms':>12}{'speedup':>10}")
    for name, a, b, c in rows:
        print(f"{name:<24}{a * 1e3:>12.3f}{b * 1e3:>12.3f}{c * 1e3:>12.3f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
