"""Command-line entry point: ``rlseg {synth,train,evaluate,predict,sweep-step}``.

Output layout of ``train`` (and of each agent directory under ``sweep-step``)::

    <out>/config.json                 config as given (verbatim copy)
    <out>/fold_<subject>/fold.json    split membership and step sizes
    <out>/fold_<subject>/lm.txt       duration/language model of the split
    <out>/fold_<subject>/agent<r>/checkpoint.txt
    <out>/fold_<subject>/agent<r>/train_log.tsv
"""
import argparse
import json
import os
import shutil
import sys


from .data import DataError, read_features, save_dataset, synth_generate, write_labels
from .env import ABLATIONS, rollout
from .experiment import ExperimentConfig, evaluate_run, fold_dirs, load_agent, overall, run_cv
from .metrics import DEFAULT_THRESHOLDS
from .trpo import NonFiniteUpdate


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "ablate", None):
        cfg.ablation = args.ablate
    return cfg


def _archive_config(args, cfg, out):
    os.makedirs(out, exist_ok=True)
    dest = os.path.join(out, "config.json")
    if args.config:
        if os.path.abspath(args.config) != os.path.abspath(dest):
            shutil.copyfile(args.config, dest)
    else:
        with open(dest, "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=1)
    # command-line overrides are kept next to the verbatim copy
    with open(os.path.join(out, "overrides.json"), "w") as fh:
        json.dump({k: getattr(args, k) for k in ("seed", "ablate") if getattr(args, k, None) is not None}, fh)


def _summary_header(thresholds=DEFAULT_THRESHOLDS):
    return ["fold", "accuracy", "edit"] + [f"f1@{t:g}" for t in thresholds]


def _summary_rows(subjects, reports, thresholds=DEFAULT_THRESHOLDS):
    rows = []
    for subj, rep in zip(subjects, reports):
        rows.append([subj, rep.accuracy, rep.edit_score] + [rep.f1[t] for t in thresholds])
    o = overall(reports, thresholds)
    rows.append(["overall", o["accuracy"], o["edit"]] + [o[f"f1@{t}"] for t in thresholds])
    return rows


def _write_tsv(path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(v if isinstance(v, str) else f"{v:.4f}" for v in r) + "\n")


def _print_table(header, rows, stream=sys.stdout):
    cells = [header] + [[v if isinstance(v, str) else f"{v:.2f}" for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        stream.write("  ".join(c.rjust(w) for c, w in zip(r, widths)) + "\n")


def cmd_synth(args):
    cfg = _load_config(args)
    out = args.out or cfg.out
    ds = synth_generate(cfg.synth_config())
    try:
        save_dataset(ds, out)
    except OSError as exc:
        raise SystemExit(f"cannot write dataset to {out}: {exc}")
    P = ds.meta["transition"]
    mean, std = ds.meta["duration_mean"], ds.meta["duration_std"]
    header = ["from"] + [ds.vocab[j] for j in range(ds.n_classes)]
    rows = [[ds.vocab[i]] + list(P[i]) for i in range(ds.n_classes)]
    _write_tsv(os.path.join(out, "truth_transition.tsv"), header, rows)
    drows = [[ds.vocab[i], mean[i], std[i]] for i in range(ds.n_classes)]
    _write_tsv(os.path.join(out, "truth_durations.tsv"), ["class", "mean", "std"], drows)
    print(f"wrote {len(ds)} trials from {len(ds.subjects)} subjects to {out}")
    print("ground-truth bigram:")
    _print_table(header, rows)
    print("ground-truth durations:")
    _print_table(["class", "mean", "std"], drows)
    return 0


def _train(cfg, out, step_sizes=None, ablation=None):
    ds = cfg.dataset()
    try:
        results = run_cv(ds, cfg, step_sizes=step_sizes, ablation=ablation, eval_repeats=1, out_dir=out)
    except NonFiniteUpdate as exc:
        raise SystemExit(f"training failed: {exc}")
    return ds, results


def cmd_train(args):
    cfg = _load_config(args)
    out = cfg.out
    _archive_config(args, cfg, out)
    _, results = _train(cfg, out)
    rows = _summary_rows([r.subject for r in results], [r.greedy for r in results])
    _write_tsv(os.path.join(out, "train_summary.tsv"), _summary_header(), rows)
    _print_table(_summary_header(), rows)
    return 0


def cmd_evaluate(args):
    cfg = _load_config(args)
    run_dir = args.checkpoints or cfg.out
    ds = cfg.dataset()
    try:
        greedy, sampled = evaluate_run(run_dir, ds, cfg)
    except (ValueError, DataError) as exc:
        raise SystemExit(f"evaluate: {exc}")
    subjects = [os.path.basename(d)[len("fold_"):] for d in fold_dirs(run_dir)]
    out = args.out or run_dir
    os.makedirs(out, exist_ok=True)
    for name, reps in (("greedy", greedy), ("sample", sampled)):
        _write_tsv(os.path.join(out, f"eval_{name}.tsv"), _summary_header(), _summary_rows(subjects, reps))
        with open(os.path.join(out, f"eval_{name}_trials.tsv"), "w") as fh:
            for subj, rep in zip(subjects, reps):
                for line in rep.to_tsv().splitlines()[1:]:
                    fh.write(f"{subj}\t{line}\n")
    shown = greedy if args.mode == "greedy" else sampled
    print(f"{args.mode} evaluation")
    _print_table(_summary_header(), _summary_rows(subjects, shown))
    return 0


def cmd_predict(args):
    try:
        x = read_features(args.features)
    except (OSError, ValueError) as exc:
        raise SystemExit(f"cannot read features: {exc}")
    if x.size == 0:
        raise SystemExit(f"{args.features}: no feature rows")
    try:
        agent = load_agent(args.checkpoint, feature_dim=x.shape[1])
    except ValueError as exc:
        raise SystemExit(f"predict: {exc}")
    traj = rollout(agent.policy, x, agent.model, agent.actions, mode=args.mode,
                   rng_seed=args.seed, ablation=agent.ablation)
    os.makedirs(args.out, exist_ok=True)
    write_labels(os.path.join(args.out, "labels.txt"), traj.labels)
    with open(os.path.join(args.out, "steps.tsv"), "w") as fh:
        fh.write("t\tk\tc\n")
        for t, k, c in traj.history(agent.actions):
            fh.write(f"{t}\t{k}\t{c + 1}\n")
    print(f"{len(traj.labels)} frames, {len(traj)} actions -> {args.out}")
    return 0


def cmd_sweep_step(args):
    cfg = _load_config(args)
    out = cfg.out
    steps = [int(s) for s in args.steps.split(",")]
    if any(s <= 0 for s in steps):
        raise SystemExit("steps must be positive")
    _archive_config(args, cfg, out)
    header = ["steps", "k_small", "k_large", "accuracy", "edit"] + [f"f1@{t:g}" for t in DEFAULT_THRESHOLDS]
    rows = []
    for entry in [[s] for s in steps] + [None]:
        name = "binary" if entry is None else f"step{entry[0]}"
        _, results = _train(cfg, os.path.join(out, name), step_sizes=entry)
        o = overall([r.greedy for r in results])
        ks = sorted({r.agents[0].actions.step_sizes for r in results})
        label = name if entry is None else str(entry[0])
        k_s = ",".join(str(k[0]) for k in ks)
        k_l = ",".join(str(k[-1]) for k in ks)
        rows.append([label, k_s, k_l, o["accuracy"], o["edit"]] + [o[f"f1@{t}"] for t in DEFAULT_THRESHOLDS])
        print(f"{label}: accuracy {o['accuracy']:.2f} edit {o['edit']:.2f}", flush=True)
    _write_tsv(os.path.join(out, "sweep.tsv"), header, rows)
    _print_table(header, rows)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="rlseg", description="Reinforcement-learning temporal segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ablate=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", help="output directory")
        if ablate:
            sp.add_argument("--ablate", choices=sorted(ABLATIONS), help="state ablation")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp, ablate=False)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="LOUO training; one directory per fold")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="score saved checkpoints on their test splits")
    common(sp)
    sp.add_argument("--checkpoints", help="training output directory (default: config out)")
    sp.add_argument("--mode", choices=("greedy", "sample"), default="greedy", help="mode shown on stdout")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("predict", help="label one feature file with a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True, help="CSV feature file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("sweep-step", help="single-step agents plus the binary agent")
    common(sp)
    sp.add_argument("--steps", default="1,2,4,8,16,32", help="comma-separated step sizes")
    sp.set_defaults(fn=cmd_sweep_step)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, DataError, FileNotFoundError) as exc:
        raise SystemExit(f"rlseg {args.command}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
