"""The segmentation MDP: an agent walks a trial choosing (step size, class).

``SegmentationEnv`` is the step-by-step reference implementation;
:func:`rollout` runs whole episodes, through the compiled kernel when the
policy is an :class:`~rlseg.policy.MlpPolicy`.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels
from .data import Trial
from .lm import DurationLanguageModel
from .policy import MlpPolicy, mode as dist_mode, sample as dist_sample

ABLATIONS = {
    "none": (1, 1, 1, 1, 1),
    "no-tcn": (0, 0, 0, 1, 1),
    "no-future": (1, 0, 0, 1, 1),
    "no-trans": (1, 1, 1, 0, 1),
}


def component_flags(ablation: Union[str, Sequence[int]] = "none") -> np.ndarray:
    """Inclusion flags for (now, future small, future large, trans, hot)."""
    if isinstance(ablation, str):
        try:
            ablation = ABLATIONS[ablation]
        except KeyError:
            raise ValueError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}") from None
    flags = np.asarray(ablation, dtype=np.int64)
    if flags.shape != (5,):
        raise ValueError("ablation mask needs five entries")
    return flags


@dataclass(frozen=True)
class ActionSpace:
    step_sizes: Tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        ks = tuple(int(k) for k in self.step_sizes)
        if not ks or any(k <= 0 for k in ks):
            raise ValueError("step sizes must be positive")
        if any(b <= a for a, b in zip(ks[:-1], ks[1:])):
            raise ValueError("step sizes must be strictly increasing")
        object.__setattr__(self, "step_sizes", ks)

    @property
    def n_actions(self):
        return len(self.step_sizes) * self.n_classes

    @property
    def k_small(self):
        return self.step_sizes[0]

    @property
    def k_large(self):
        return self.step_sizes[-1]

    def encode(self, k_index, c):
        return k_index * self.n_classes + c

    def decode(self, a):
        if not 0 <= a < self.n_actions:
            raise ValueError(f"action {a} outside 0..{self.n_actions - 1}")
        return self.step_sizes[a // self.n_classes], a % self.n_classes

    def steps_array(self):
        return np.asarray(self.step_sizes, dtype=np.int64)


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.1
    gamma: float = 0.9

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def state_dim(n_feat, n_classes, ablation="none"):
    return int(kernels.state_dim(n_feat, n_classes, component_flags(ablation)))


class EpisodeDone(RuntimeError):
    pass


class SegmentationEnv:
    """Mutable episode state over one trial.

    ``features`` are the per-frame state features (any provider); ``truth``
    is only needed for rewards and may be omitted at prediction time.
    """

    def __init__(self, features, model: DurationLanguageModel, actions: ActionSpace,
                 truth=None, reward: RewardConfig = RewardConfig(), ablation="none"):
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ValueError("empty trial")
        if truth is not None and len(truth) != len(self.features):
            raise ValueError("features and labels differ in length")
        self.truth = None if truth is None else np.asarray(truth, dtype=np.int64)
        self.model = model
        self.actions = actions
        self.reward_cfg = reward
        self.flags = component_flags(ablation)
        self.reset()

    @property
    def n_t(self):
        return self.features.shape[0]

    @property
    def state_dim(self):
        return int(kernels.state_dim(self.features.shape[1], self.actions.n_classes, self.flags))

    def reset(self):
        self.t = 0
        self.last_class = -1
        self.stay_len = 0
        self.emitted = np.full(self.n_t, -1, dtype=np.int64)
        return self.assemble_state()

    @property
    def done(self):
        return self.t >= self.n_t

    def assemble_state(self):
        if self.done:
            raise EpisodeDone("episode finished")
        out = np.zeros(self.state_dim)
        kernels.fill_state_loop(out, self.features, self.t, self.actions.k_small, self.actions.k_large,
                                self.model.transition_rows, self.model.duration_mean,
                                self.model.duration_std, self.last_class, self.stay_len, self.flags)
        return out

    def step(self, action: int):
        """Apply a joint action; returns ``(state or None, reward, done)``."""
        if self.done:
            raise EpisodeDone("episode finished")
        k, c = self.actions.decode(int(action))
        k_eff = min(k, self.n_t - self.t)
        window = slice(self.t, self.t + k_eff)
        self.emitted[window] = c
        wrong = 0 if self.truth is None else int(np.count_nonzero(self.truth[window] != c))
        reward = self.reward_cfg.alpha * k_eff - wrong
        if c == self.last_class:
            self.stay_len += k_eff
        else:
            self.last_class, self.stay_len = c, k_eff
        self.t += k_eff
        return (None if self.done else self.assemble_state()), reward, self.done


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    trial_id: str = ""
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    n_frames: int = 0

    def __len__(self):
        return len(self.actions)

    @property
    def positions(self):
        """Normalized decision times ``t / n_t``."""
        return self.starts / max(self.n_frames, 1)

    def history(self, actions: ActionSpace):
        """Per-action ``(t, k, c)`` rows."""
        return [(int(t),) + actions.decode(int(a)) for t, a in zip(self.starts, self.actions)]


def rollout(policy, trial: Union[Trial, np.ndarray], model: DurationLanguageModel, actions: ActionSpace,
            reward: RewardConfig = RewardConfig(), rng_seed=None, mode="sample", ablation="none",
            truth=None, trial_id=None) -> Trajectory:
    """Run one full episode.

    ``policy`` is an :class:`MlpPolicy` (compiled path) or a callable
    ``policy(env, state) -> action`` (reference path, used for injected
    agents). ``trial`` is a :class:`Trial` or a bare feature array.
    """
    if isinstance(trial, Trial):
        feats, truth, trial_id = trial.features.frames, trial.labels.labels, trial.trial_id
    else:
        feats = trial
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    known = truth is not None
    truth = np.zeros(len(feats), dtype=np.int64) if truth is None else np.asarray(truth, dtype=np.int64)
    if mode not in ("sample", "greedy"):
        raise ValueError("mode must be 'sample' or 'greedy'")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    flags = component_flags(ablation)

    if isinstance(policy, MlpPolicy):
        max_steps = -(-len(feats) // actions.k_small)
        uniforms = rng.random(max_steps) if mode == "sample" else np.zeros(max_steps)
        states, acts, rewards, errors, starts, pred, n = kernels.rollout_kernel(
            feats, truth, actions.steps_array(), model.transition_rows, model.duration_mean,
            model.duration_std, flags, policy.w1, policy.b1, policy.w2, policy.b2,
            policy.obs_mean, policy.obs_scale, float(reward.alpha), uniforms, mode == "greedy")
        traj = Trajectory(states[:n], acts[:n], rewards[:n], trial_id or "", starts[:n], errors[:n], pred, len(feats))
    else:
        env = SegmentationEnv(feats, model, actions, truth, reward, flags)
        s = env.reset()
        S, A, R, E, T = [], [], [], [], []
        while True:
            t0 = env.t
            a = int(policy(env, s))
            k, c = actions.decode(a)
            k_eff = min(k, env.n_t - t0)
            S.append(s)
            A.append(a)
            T.append(t0)
            E.append(int(np.count_nonzero(truth[t0:t0 + k_eff] != c)))
            s, r, done = env.step(a)
            R.append(r)
            if done:
                break
        traj = Trajectory(np.array(S), np.array(A, dtype=np.int64), np.array(R), trial_id or "",
                          np.array(T, dtype=np.int64), np.array(E, dtype=np.int64), env.emitted.copy(), len(feats))
    if not known:
        traj.rewards = np.full(len(traj), np.nan)
        traj.errors = np.zeros(len(traj), dtype=np.int64)
    return traj


def policy_agent(policy: MlpPolicy, mode="greedy", rng=None) -> Callable:
    """Wrap an MLP policy as a reference-path callable."""
    rng = np.random.default_rng(rng)

    def act(env, state):
        dist = policy.forward(state)
        return dist_mode(dist) if mode == "greedy" else dist_sample(dist, rng)

    return act
