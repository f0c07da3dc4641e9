import numpy as np
import pytest

from rlseg.env import ActionSpace, RewardConfig
from rlseg.experiment import train_agent
from rlseg import lm
from rlseg.policy import MlpPolicy, kl_divergence
from rlseg.trpo import (Batch, NonFiniteUpdate, TrpoConfig, ValueBaseline, compute_returns,
                        conjugate_gradient, estimate_advantages, fisher_operator, fisher_vector_product,
                        surrogate, surrogate_gradient, trpo_update)


def test_returns_examples():
    np.testing.assert_allclose(compute_returns([1, 1, 1], 0.0), [1, 1, 1])
    np.testing.assert_allclose(compute_returns([1, 1, 1], 0.9), [2.71, 1.9, 1.0], rtol=1e-12)
    for g in (0.0, 0.5, 1.0):
        np.testing.assert_allclose(compute_returns([5.0], g), [5.0])


def _batch(seed=0, n=40, d=5, a=6):
    rng = np.random.default_rng(seed)
    pol = MlpPolicy.init(d, a, 8, rng)
    pol = pol.with_flat(rng.normal(0, 0.5, pol.n_params))
    S = rng.normal(size=(n, d))
    batch = Batch(S, rng.integers(0, a, n), rng.normal(2, 3, n), rng.uniform(0, 1, n))
    batch.advantages = rng.normal(size=n)
    return pol, batch


def test_advantages_standardized_and_baseline_refit():
    _, batch = _batch(1)
    base = ValueBaseline()
    adv = estimate_advantages(batch, base)
    ret = batch.returns
    np.testing.assert_allclose(adv, (ret - ret.mean()) / ret.std(), atol=1e-12)
    assert abs(adv.mean()) < 1e-8 and abs(adv.std() - 1) < 1e-8
    before = np.mean((ret - 0.0) ** 2)
    after = np.mean((ret - base.predict(batch.states, batch.positions)) ** 2)
    assert after < before
    # single step: no standardization
    one = Batch(batch.states[:1], batch.actions[:1], np.array([3.0]), np.array([0.0]))
    assert estimate_advantages(one, ValueBaseline(), refit=False)[0] == 3.0


def test_surrogate_gradient_finite_differences_and_linearity():
    pol, batch = _batch(2)
    idx = np.arange(len(batch.actions))
    old_lp = pol.log_probs_batch(batch.states)[idx, batch.actions]
    g = surrogate_gradient(pol, batch)
    theta = pol.get_flat()
    fd = np.empty_like(theta)
    h = 1e-5
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (surrogate(pol.with_flat(theta + e), batch, old_lp)
                 - surrogate(pol.with_flat(theta - e), batch, old_lp)) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-3
    batch.advantages = 2 * batch.advantages
    np.testing.assert_allclose(surrogate_gradient(pol, batch), 2 * g, atol=1e-10)
    batch.advantages = np.zeros_like(batch.advantages)
    assert not surrogate_gradient(pol, batch).any()


def test_fvp_properties():
    pol, batch = _batch(3)
    rng = np.random.default_rng(3)
    u, v = rng.normal(size=pol.n_params), rng.normal(size=pol.n_params)
    F = fisher_operator(pol, batch.states, damping=0.0)
    assert not F(np.zeros(pol.n_params)).any()
    a, b = u @ F(v), v @ F(u)
    assert abs(a - b) <= 1e-6 * max(abs(a), abs(b))
    lam = 0.1
    for _ in range(10):
        w = rng.normal(size=pol.n_params)
        assert w @ fisher_vector_product(pol, batch.states, w, lam) >= lam * (w @ w) - 1e-12


def test_fvp_matches_kl_second_difference():
    # independent oracle: mixed second difference of the KL scalar itself
    pol, batch = _batch(4)
    rng = np.random.default_rng(4)
    u, v = rng.normal(size=pol.n_params), rng.normal(size=pol.n_params)
    theta, eps = pol.get_flat(), 1e-3

    def kl(x):
        return kl_divergence(pol, pol.with_flat(x), batch.states)

    mixed = (kl(theta + eps * (u + v)) - kl(theta + eps * (u - v))
             - kl(theta - eps * (u - v)) + kl(theta - eps * (u + v))) / (4 * eps ** 2)
    assert u @ fisher_vector_product(pol, batch.states, v) == pytest.approx(mixed, rel=1e-4)


def test_conjugate_gradient():
    b = np.random.default_rng(0).normal(size=7)
    assert np.allclose(conjugate_gradient(lambda x: x, b, iterations=1), b)
    assert not conjugate_gradient(lambda x: x, np.zeros(7)).any()
    rng = np.random.default_rng(1)
    M = rng.normal(size=(20, 20))
    A = M @ M.T / 20 + np.eye(20)
    b = rng.normal(size=20)
    want = np.linalg.solve(A, b)
    errs = []
    x = conjugate_gradient(lambda p: A @ p, b, iterations=20, residual_tol=0.0,
                           callback=lambda x, r: errs.append((x - want) @ A @ (x - want)))
    assert np.linalg.norm(x - want) <= 1e-6 * np.linalg.norm(want)
    # CG minimizes the A-norm error over growing Krylov spaces: monotone
    assert all(e2 <= e1 * (1 + 1e-9) + 1e-20 for e1, e2 in zip(errs[:-1], errs[1:]))


def test_update_respects_trust_region():
    pol, batch = _batch(5, n=200)
    for delta in (0.001, 0.01, 0.05):
        new, diag = trpo_update(pol, batch, TrpoConfig(kl_bound=delta))
        assert diag.accepted
        assert diag.kl == pytest.approx(kl_divergence(pol, new, batch.states))
        assert diag.kl <= delta and diag.surrogate_delta > 0
    assert np.array_equal(pol.get_flat(), _batch(5, n=200)[0].get_flat())  # input untouched


def test_zero_advantages_and_rejection_leave_parameters():
    pol, batch = _batch(6)
    theta = pol.get_flat()
    batch.advantages = np.zeros_like(batch.advantages)
    new, diag = trpo_update(pol, batch, TrpoConfig())
    assert not diag.accepted and new.get_flat().tobytes() == theta.tobytes()
    pol, batch = _batch(6)
    new, diag = trpo_update(pol, batch, TrpoConfig(max_backtracks=0))
    assert not diag.accepted and new.get_flat().tobytes() == theta.tobytes()


def test_non_finite_gradient_raises():
    pol, batch = _batch(7)
    batch.advantages[3] = np.nan
    with pytest.raises(NonFiniteUpdate):
        trpo_update(pol, batch, TrpoConfig())


def test_training_is_deterministic_and_improves(small_synth):
    model = lm.fit(small_synth)
    acts = ActionSpace(lm.default_step_sizes(small_synth), small_synth.n_classes)
    cfg = TrpoConfig(iterations=60, batch_trials=3, cg_damping=0.01)
    runs = []
    for _ in range(2):
        traj = []
        agent = train_agent(small_synth, model, acts, RewardConfig(), cfg, init_seed=1, rollout_seed=2,
                            callback=lambda it, old, new, d: traj.append(new.get_flat().tobytes()))
        runs.append((traj, agent))
    assert runs[0][0] == runs[1][0]
    log = runs[0][1].log
    assert all(r["kl"] <= cfg.kl_bound for r in log if r["accepted"])
    ret = np.array([r["mean_return"] for r in log])
    assert ret[-10:].mean() > ret[:10].mean()
