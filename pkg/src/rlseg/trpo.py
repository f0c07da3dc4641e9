"""Trust-region policy optimization for :class:`~rlseg.policy.MlpPolicy`.

Natural-gradient direction by conjugate gradient on Fisher-vector products,
then a KL-constrained backtracking line search on the importance-sampled
surrogate.
"""
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .env import Trajectory
from .policy import MlpPolicy, kl_divergence, softmax

__all__ = [
    "Trajectory", "TrpoConfig", "ValueBaseline", "Batch", "TrpoDiagnostics", "NonFiniteUpdate",
    "compute_returns", "estimate_advantages", "make_batch", "surrogate", "surrogate_gradient",
    "fisher_operator", "fisher_vector_product", "conjugate_gradient", "trpo_update",
]


class NonFiniteUpdate(FloatingPointError):
    """The policy gradient or search direction was not finite."""


@dataclass(frozen=True)
class TrpoConfig:
    gamma: float = 0.9
    kl_bound: float = 0.01
    cg_iterations: int = 10
    cg_damping: float = 0.1
    backtrack_ratio: float = 0.5
    max_backtracks: int = 10
    batch_trials: int = 5
    iterations: int = 200
    seed: int = 0
    # Fisher-vector products use every ``fvp_stride``-th batch state
    fvp_stride: int = 1

    def __post_init__(self):
        if self.fvp_stride < 1:
            raise ValueError("fvp_stride must be >= 1")
        if self.kl_bound <= 0:
            raise ValueError("kl_bound must be > 0")
        if not 0 < self.backtrack_ratio < 1:
            raise ValueError("backtrack_ratio must lie in (0, 1)")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")


def compute_returns(rewards, gamma) -> np.ndarray:
    """Discounted reward-to-go ``G_t = r_t + gamma * G_{t+1}``."""
    rewards = np.asarray(getattr(rewards, "rewards", rewards), dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for i in range(rewards.size - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


class ValueBaseline:
    """Linear return predictor on ``(state, t / n_t, 1)``, refit by least squares."""

    def __init__(self, dim=None):
        self.weights = None if dim is None else np.zeros(dim + 2)

    @staticmethod
    def design(states, positions):
        n = len(states)
        return np.hstack([np.asarray(states).reshape(n, -1), np.asarray(positions).reshape(n, 1), np.ones((n, 1))])

    def predict(self, states, positions):
        X = self.design(states, positions)
        if self.weights is None:
            return np.zeros(len(X))
        return X @ self.weights

    def fit(self, states, positions, returns):
        X = self.design(states, positions)
        self.weights = np.linalg.lstsq(X, returns, rcond=None)[0]
        if not np.all(np.isfinite(self.weights)):
            self.weights = np.zeros(X.shape[1])
        return self


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    positions: np.ndarray
    advantages: np.ndarray = None
    episode_returns: np.ndarray = None


def make_batch(trajectories: Sequence[Trajectory], gamma) -> Batch:
    return Batch(
        states=np.concatenate([t.states for t in trajectories]),
        actions=np.concatenate([t.actions for t in trajectories]),
        returns=np.concatenate([compute_returns(t.rewards, gamma) for t in trajectories]),
        positions=np.concatenate([t.positions for t in trajectories]),
        episode_returns=np.array([t.rewards.sum() for t in trajectories]),
    )


def estimate_advantages(batch: Batch, baseline: ValueBaseline, refit=True) -> np.ndarray:
    """Returns minus baseline, standardized across the batch; then refit the baseline."""
    adv = batch.returns - baseline.predict(batch.states, batch.positions)
    if adv.size > 1:
        std = adv.std()
        adv = (adv - adv.mean()) / (std if std > 0 else 1.0)
    batch.advantages = adv
    if refit:
        baseline.fit(batch.states, batch.positions, batch.returns)
    return adv


def surrogate(policy: MlpPolicy, batch: Batch, old_log_probs) -> float:
    """Mean of ``pi(a|s) / pi_old(a|s) * advantage``."""
    lp = policy.log_probs_batch(batch.states)[np.arange(len(batch.actions)), batch.actions]
    return float(np.mean(np.exp(lp - old_log_probs) * batch.advantages))


def surrogate_gradient(policy: MlpPolicy, batch: Batch) -> np.ndarray:
    """Gradient of the surrogate at the sampling policy: mean of grad log pi * advantage."""
    n = len(batch.actions)
    return policy.grad_weighted_log_prob(batch.states, batch.actions, batch.advantages / n)


def fisher_operator(policy: MlpPolicy, states, damping=0.0):
    """Return ``v -> (H + damping I) v`` with ``H`` the Hessian of mean
    KL(old || new) at new = old.

    For a softmax head that Hessian is ``J^T (diag(p) - p p^T) J`` averaged
    over states, ``J`` being the logit Jacobian; each product costs one
    forward-mode and one reverse-mode pass over a cached forward.
    """
    states = np.atleast_2d(states)
    cache = policy.logits_batch(states)
    p = softmax(cache[2])
    n = len(states)

    def apply(v):
        jv = policy.logits_jvp(states, v, cache)
        u = p * jv - p * np.sum(p * jv, axis=1, keepdims=True)
        return policy.logits_vjp(states, u, cache) / n + damping * v

    return apply


def fisher_vector_product(policy: MlpPolicy, states, v, damping=0.0) -> np.ndarray:
    return fisher_operator(policy, states, damping)(v)


def conjugate_gradient(apply, b, iterations=10, residual_tol=1e-10, callback=None) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A`` given as ``apply(v)``."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iterations):
        if rr <= residual_tol:
            break
        Ap = apply(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        new_rr = r @ r
        if callback is not None:
            callback(x, np.sqrt(new_rr))
        p = r + (new_rr / rr) * p
        rr = new_rr
    return x


@dataclass
class TrpoDiagnostics:
    accepted: bool
    surrogate_delta: float
    expected_improve: float
    kl: float
    backtracks: int
    grad_norm: float


def trpo_update(policy: MlpPolicy, batch: Batch, cfg: TrpoConfig):
    """One constrained step; returns ``(new_policy, diagnostics)``.

    On rejection the returned policy carries bitwise the original
    parameters. ``policy`` itself is never modified.
    """
    if len(batch.actions) == 0:
        raise ValueError("empty batch")
    theta = policy.get_flat()
    g = surrogate_gradient(policy, batch)
    if not np.all(np.isfinite(g)):
        raise NonFiniteUpdate("non-finite policy gradient")
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return policy.copy(), TrpoDiagnostics(False, 0.0, 0.0, 0.0, 0, 0.0)

    fvp = fisher_operator(policy, batch.states[::cfg.fvp_stride], cfg.cg_damping)

    x = conjugate_gradient(fvp, g, cfg.cg_iterations)
    shs = float(x @ fvp(x))
    if not (np.isfinite(shs) and np.all(np.isfinite(x))):
        raise NonFiniteUpdate("non-finite natural-gradient direction")
    if shs <= 0.0:
        # gradient below the CG residual tolerance: nothing to step along
        return policy.copy(), TrpoDiagnostics(False, 0.0, 0.0, 0.0, 0, gnorm)
    step = np.sqrt(2.0 * cfg.kl_bound / shs) * x
    expected = float(g @ step)

    idx = np.arange(len(batch.actions))
    old_lp = policy.log_probs_batch(batch.states)[idx, batch.actions]
    old_surr = float(np.mean(batch.advantages))
    frac = 1.0
    for n_back in range(cfg.max_backtracks):
        cand = policy.with_flat(theta + frac * step)
        improve = surrogate(cand, batch, old_lp) - old_surr
        kl = kl_divergence(policy, cand, batch.states)
        if np.isfinite(improve) and np.isfinite(kl) and improve > 0 and kl <= cfg.kl_bound:
            return cand, TrpoDiagnostics(True, improve, expected * frac, kl, n_back, gnorm)
        frac *= cfg.backtrack_ratio
    return policy.copy(), TrpoDiagnostics(False, 0.0, expected, 0.0, cfg.max_backtracks, gnorm)
