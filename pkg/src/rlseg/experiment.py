"""Training and evaluation harness shared by the CLI and the acceptance tests."""
import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import lm as lm_mod
from .data import Dataset, SynthConfig, Trial, load_dataset, louo_splits, synth_generate
from .env import ABLATIONS, ActionSpace, RewardConfig, rollout, state_dim
from .lm import DurationLanguageModel
from .metrics import DEFAULT_THRESHOLDS, EvalReport, TrialMetrics, edit_score, frame_accuracy, trial_metrics
from .policy import MlpPolicy, RunningNormalizer
from .trpo import TrpoConfig, ValueBaseline, estimate_advantages, make_batch, trpo_update

# independent random streams derived from the master seed
SYNTH, INIT, ROLLOUT, EVAL = 0, 1, 2, 3

LOG_COLUMNS = ("iteration", "mean_return", "surrogate_delta", "kl", "backtracks", "accepted",
               "mean_step", "val_return", "val_accuracy", "val_edit")


def stream(master_seed, purpose, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(purpose,) + tuple(int(k) for k in key))


def stream_int(master_seed, purpose, *key) -> int:
    return int(stream(master_seed, purpose, *key).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    manifest: Optional[str] = None
    data_root: Optional[str] = None
    synth: Dict = field(default_factory=dict)
    step_sizes: Optional[List[int]] = None
    alpha: float = 0.1
    gamma: float = 0.9
    trpo: Dict = field(default_factory=dict)
    hidden_units: int = 64
    ablation: str = "none"
    agent_seeds: int = 1
    eval_repeats: int = 10
    eval_interval: int = 10
    seed: int = 0
    out: str = "runs/experiment"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {sorted(ABLATIONS)}")
        if self.agent_seeds < 1 or self.eval_repeats < 1:
            raise ValueError("repeat counts must be >= 1")
        known = {f.name for f in fields(TrpoConfig)}
        extra = set(self.trpo) - known
        if extra:
            raise ValueError(f"unknown trpo keys: {sorted(extra)}")
        extra = set(self.synth) - {f.name for f in fields(SynthConfig)}
        if extra:
            raise ValueError(f"unknown synth keys: {sorted(extra)}")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    @property
    def reward(self):
        return RewardConfig(self.alpha, self.gamma)

    @property
    def trpo_config(self):
        return TrpoConfig(**{**self.trpo, "gamma": self.gamma})

    def synth_config(self):
        kw = dict(self.synth)
        kw.setdefault("seed", stream_int(self.seed, SYNTH))
        for key in ("duration_mean", "duration_std"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return SynthConfig(**kw)

    def dataset(self) -> Dataset:
        if self.manifest:
            return load_dataset(self.data_root or os.path.dirname(os.path.abspath(self.manifest)), self.manifest)
        return synth_generate(self.synth_config())


def action_space_for(train: Dataset, step_sizes=None) -> ActionSpace:
    if step_sizes is None:
        step_sizes = lm_mod.default_step_sizes(train)
    return ActionSpace(tuple(step_sizes), train.n_classes)


# --- training ---------------------------------------------------------------

@dataclass
class TrainedAgent:
    policy: MlpPolicy
    model: DurationLanguageModel
    actions: ActionSpace
    ablation: str
    log: List[dict]
    final_policy: MlpPolicy = None

    def header(self, **extra):
        h = dict(step_sizes=list(self.actions.step_sizes), n_classes=self.actions.n_classes,
                 ablation=self.ablation, state_dim=self.policy.input_dim)
        h.update(extra)
        return h


def greedy_scores(policy, trials, model, actions, reward, ablation):
    rets, accs, edits = [], [], []
    for trial in trials:
        traj = rollout(policy, trial, model, actions, reward, mode="greedy", ablation=ablation)
        rets.append(traj.rewards.sum())
        accs.append(frame_accuracy(traj.labels, trial.labels))
        edits.append(edit_score(traj.labels, trial.labels))
    return float(np.mean(rets)), float(np.mean(accs)), float(np.mean(edits))


def train_agent(train: Dataset, model: DurationLanguageModel, actions: ActionSpace,
                reward: RewardConfig = RewardConfig(), cfg: TrpoConfig = TrpoConfig(),
                ablation="none", hidden_units=64, init_seed=None, rollout_seed=None,
                eval_interval=10, callback: Callable = None, log_file=None) -> TrainedAgent:
    """Train one policy with TRPO on whole-trial batches.

    The returned policy is the snapshot with the best greedy return on the
    training trials among the periodic validation points.
    ``callback(iteration, old_policy, new_policy, diagnostics)`` runs after
    every update. Seeds default to streams derived from ``cfg.seed``.
    """
    if init_seed is None:
        init_seed = stream(cfg.seed, INIT)
    if rollout_seed is None:
        rollout_seed = stream(cfg.seed, ROLLOUT)
    dim = state_dim(train.feature_dim, train.n_classes, ablation)
    policy = MlpPolicy.init(dim, actions.n_actions, hidden_units, np.random.default_rng(init_seed))
    rng = np.random.default_rng(rollout_seed)
    norm = RunningNormalizer(dim)
    baseline = ValueBaseline()
    trials = list(train.trials)
    n_batch = min(cfg.batch_trials, len(trials))
    best, best_ret = policy.copy(), -np.inf
    log = []
    fh = None
    if log_file is not None:
        fh = open(log_file, "w")
        fh.write("\t".join(LOG_COLUMNS) + "\n")
    try:
        for it in range(1, cfg.iterations + 1):
            chosen = rng.choice(len(trials), size=n_batch, replace=False)
            trajs = [rollout(policy, trials[i], model, actions, reward, rng, "sample", ablation) for i in chosen]
            batch = make_batch(trajs, cfg.gamma)
            estimate_advantages(batch, baseline)
            new, diag = trpo_update(policy, batch, cfg)
            if callback is not None:
                callback(it, policy, new, diag)
            norm.update(batch.states)
            new.set_normalization(norm.mean, norm.scale)
            policy = new
            row = dict(iteration=it, mean_return=float(batch.episode_returns.mean()),
                       surrogate_delta=diag.surrogate_delta, kl=diag.kl, backtracks=diag.backtracks,
                       accepted=int(diag.accepted),
                       mean_step=float(np.mean(actions.steps_array()[batch.actions // actions.n_classes])),
                       val_return=np.nan, val_accuracy=np.nan, val_edit=np.nan)
            if it % eval_interval == 0 or it == cfg.iterations:
                vr, va, ve = greedy_scores(policy, trials, model, actions, reward, ablation)
                row.update(val_return=vr, val_accuracy=va, val_edit=ve)
                if vr > best_ret:
                    best, best_ret = policy.copy(), vr
            log.append(row)
            if fh is not None:
                fh.write("\t".join(_fmt_cell(row[c]) for c in LOG_COLUMNS) + "\n")
    finally:
        if fh is not None:
            fh.close()
    return TrainedAgent(best, model, actions, ablation, log, final_policy=policy)


def _fmt_cell(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# --- evaluation -------------------------------------------------------------

def predict_trials(agent, trials: Sequence[Trial], mode="greedy", rng=None, reward=RewardConfig()):
    """Roll out ``agent`` (a :class:`TrainedAgent`) on each trial; returns trajectories by trial id."""
    rng = np.random.default_rng(rng)
    out = {}
    for trial in trials:
        out[trial.trial_id] = rollout(agent.policy, trial, agent.model, agent.actions, reward,
                                      rng, mode, agent.ablation)
    return out


def score_predictions(preds: Dict[str, np.ndarray], trials: Sequence[Trial], thresholds=DEFAULT_THRESHOLDS):
    return [trial_metrics(t.trial_id, preds[t.trial_id], t.labels, thresholds) for t in trials]


def mean_metrics(per: Sequence[TrialMetrics], thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    return EvalReport.from_trials(list(per), thresholds)


@dataclass
class FoldResult:
    subject: str
    agents: List[TrainedAgent]
    train: Dataset
    test: Dataset
    greedy: EvalReport = None
    sampled: EvalReport = None
    trajectories: Dict = field(default_factory=dict)


def evaluate_agents(agents, test: Dataset, reward, master_seed, fold_index, eval_repeats=0):
    """Greedy (once per agent) and sampled (``eval_repeats`` per agent) reports."""
    greedy, sampled, trajs = [], [], {}
    for r, agent in enumerate(agents):
        tr = predict_trials(agent, test.trials, "greedy", reward=reward)
        trajs[r] = tr
        greedy += score_predictions({k: v.labels for k, v in tr.items()}, test.trials)
        for rep in range(eval_repeats):
            rng = np.random.default_rng(stream(master_seed, EVAL, fold_index, r, rep))
            ts = predict_trials(agent, test.trials, "sample", rng, reward)
            sampled += score_predictions({k: v.labels for k, v in ts.items()}, test.trials)
    return mean_metrics(greedy), (mean_metrics(sampled) if sampled else None), trajs


def run_cv(dataset: Dataset, cfg: ExperimentConfig, step_sizes=None, ablation=None,
           folds: Optional[Sequence[int]] = None, callback=None, eval_repeats=None,
           out_dir=None) -> List[FoldResult]:
    """Leave-one-user-out train + evaluate. Writes fold artifacts when ``out_dir`` is given."""
    ablation = cfg.ablation if ablation is None else ablation
    step_sizes = cfg.step_sizes if step_sizes is None else step_sizes
    eval_repeats = cfg.eval_repeats if eval_repeats is None else eval_repeats
    results = []
    for f, (train, test) in enumerate(louo_splits(dataset)):
        if folds is not None and f not in folds:
            continue
        subject = test.trials[0].subject_id
        model = lm_mod.fit(train)
        actions = action_space_for(train, step_sizes)
        fold_dir = None
        if out_dir is not None:
            fold_dir = os.path.join(out_dir, f"fold_{subject}")
            os.makedirs(fold_dir, exist_ok=True)
            model.save(os.path.join(fold_dir, "lm.txt"))
            with open(os.path.join(fold_dir, "fold.json"), "w") as fh:
                json.dump(dict(fold=f, subject=subject, step_sizes=list(actions.step_sizes),
                               train=[t.trial_id for t in train.trials],
                               test=[t.trial_id for t in test.trials]), fh, indent=1)
        agents = []
        for r in range(cfg.agent_seeds):
            log_file = None
            if fold_dir is not None:
                agent_dir = os.path.join(fold_dir, f"agent{r}")
                os.makedirs(agent_dir, exist_ok=True)
                log_file = os.path.join(agent_dir, "train_log.tsv")
            cb = None if callback is None else (lambda *a, _f=f, _r=r: callback(_f, _r, *a))
            agent = train_agent(train, model, actions, cfg.reward, cfg.trpo_config, ablation,
                                cfg.hidden_units, stream(cfg.seed, INIT, f, r), stream(cfg.seed, ROLLOUT, f, r),
                                cfg.eval_interval, cb, log_file)
            if fold_dir is not None:
                agent.policy.save(os.path.join(agent_dir, "checkpoint.txt"),
                                  agent.header(fold=f, subject=subject, agent=r,
                                               feature_dim=train.feature_dim))
            agents.append(agent)
        greedy, sampled, trajs = evaluate_agents(agents, test, cfg.reward, cfg.seed, f, eval_repeats)
        results.append(FoldResult(subject, agents, train, test, greedy, sampled, trajs))
    return results


def overall(reports: Sequence[EvalReport], thresholds=DEFAULT_THRESHOLDS):
    """Unweighted mean of per-fold means."""
    return dict(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        edit=float(np.mean([r.edit_score for r in reports])),
        **{f"f1@{t}": float(np.mean([r.f1[t] for r in reports])) for t in thresholds},
    )


def baseline_report(dataset: Dataset, predict: Callable[[Trial], np.ndarray]) -> List[EvalReport]:
    """Per-fold reports of a training-free per-frame predictor on each LOUO test split."""
    reps = []
    for _, test in louo_splits(dataset):
        reps.append(mean_metrics(score_predictions({t.trial_id: predict(t) for t in test.trials}, test.trials)))
    return reps


def boundary_step_usage(results: Sequence[FoldResult], radius_factor=2):
    """Fraction of large-step actions in segment interiors vs near true boundaries.

    An action is near a boundary when its start frame lies within
    ``radius_factor * k_s`` frames of a frame where the true label changes.
    """
    counts = np.zeros((2, 2))  # [near, interior] x [small, large]
    for res in results:
        for agent, trajs in zip(res.agents, res.trajectories.values()):
            k_s, k_l = agent.actions.k_small, agent.actions.k_large
            radius = radius_factor * k_s
            for trial in res.test.trials:
                traj = trajs[trial.trial_id]
                y = trial.labels.labels
                bounds = np.flatnonzero(y[1:] != y[:-1]) + 1
                large = (traj.actions // agent.actions.n_classes) == len(agent.actions.step_sizes) - 1
                if bounds.size:
                    pos = np.searchsorted(bounds, traj.starts)
                    left = np.abs(traj.starts - bounds[np.clip(pos - 1, 0, bounds.size - 1)])
                    right = np.abs(bounds[np.clip(pos, 0, bounds.size - 1)] - traj.starts)
                    near = np.minimum(left, right) <= radius
                else:
                    near = np.zeros(len(traj), dtype=bool)
                for is_near in (True, False):
                    sel = near == is_near
                    counts[0 if is_near else 1, 1] += np.count_nonzero(large & sel)
                    counts[0 if is_near else 1, 0] += np.count_nonzero(~large & sel)
    frac = counts[:, 1] / np.maximum(counts.sum(axis=1), 1)
    return dict(near_boundary=float(frac[0]), interior=float(frac[1]), counts=counts)


# --- checkpoints on disk ----------------------------------------------------

def load_agent(checkpoint_path, model: DurationLanguageModel = None, feature_dim=None) -> TrainedAgent:
    """Rebuild a :class:`TrainedAgent` from a checkpoint and its fold's ``lm.txt``.

    Raises ``ValueError`` when ``feature_dim`` disagrees with the network's
    input layer.
    """
    policy, header = MlpPolicy.load(checkpoint_path)
    if model is None:
        model = DurationLanguageModel.load(os.path.join(os.path.dirname(os.path.dirname(
            os.path.abspath(checkpoint_path))), "lm.txt"))
    actions = ActionSpace(tuple(int(k) for k in header["step_sizes"].split()), int(header["n_classes"]))
    ablation = header.get("ablation", "none")
    if actions.n_actions != policy.n_actions:
        raise ValueError(f"{checkpoint_path}: header declares {actions.n_actions} actions, network has {policy.n_actions}")
    if model.n_classes != actions.n_classes:
        raise ValueError(f"{checkpoint_path}: model has {model.n_classes} classes, checkpoint {actions.n_classes}")
    if feature_dim is not None:
        want = state_dim(feature_dim, actions.n_classes, ablation)
        if want != policy.input_dim:
            raise ValueError(f"{checkpoint_path}: features of dimension {feature_dim} give a {want}-dim state, "
                             f"network expects {policy.input_dim} (architecture mismatch)")
    return TrainedAgent(policy, model, actions, ablation, [], final_policy=policy)


def fold_dirs(run_dir) -> List[str]:
    return sorted(os.path.join(run_dir, d) for d in os.listdir(run_dir)
                  if d.startswith("fold_") and os.path.isdir(os.path.join(run_dir, d)))


def evaluate_run(run_dir, dataset: Dataset, cfg: ExperimentConfig, agent_override: Callable = None):
    """Evaluate every fold checkpoint under ``run_dir`` on its test split.

    ``agent_override(test_trial) -> labels`` replaces the checkpoints
    (used for injected oracle agents). Returns ``(greedy, sampled)`` lists of
    per-fold reports, sampled being empty when no repeats are configured.
    """
    splits = louo_splits(dataset)
    greedy, sampled = [], []
    for fdir in fold_dirs(run_dir):
        with open(os.path.join(fdir, "fold.json")) as fh:
            info = json.load(fh)
        f = int(info["fold"])
        _, test = splits[f]
        if [t.trial_id for t in test.trials] != info["test"]:
            raise ValueError(f"{fdir}: test split does not match the dataset")
        if agent_override is not None:
            preds = {t.trial_id: agent_override(t) for t in test.trials}
            greedy.append(mean_metrics(score_predictions(preds, test.trials)))
            continue
        model = DurationLanguageModel.load(os.path.join(fdir, "lm.txt"))
        ckpts = sorted(d for d in os.listdir(fdir) if d.startswith("agent"))
        agents = [load_agent(os.path.join(fdir, d, "checkpoint.txt"), model, dataset.feature_dim) for d in ckpts]
        g, s, _ = evaluate_agents(agents, test, cfg.reward, cfg.seed, f, cfg.eval_repeats)
        greedy.append(g)
        sampled.append(s)
    if not greedy:
        raise ValueError(f"{run_dir}: no fold directories with checkpoints")
    return greedy, sampled
