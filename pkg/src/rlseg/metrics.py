"""Frame accuracy, segmental edit score and F1@IoU, plus report aggregation."""
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from . import kernels
from .data import LabelSequence, segments_from_labels

DEFAULT_THRESHOLDS = (10, 25, 50)


def _labels(y):
    return y.labels if isinstance(y, LabelSequence) else np.asarray(y, dtype=np.int64)


def frame_accuracy(pred, truth) -> float:
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predicted vs {t.size} true frames")
    return 100.0 * float(np.count_nonzero(p == t)) / t.size


def segment_string(y) -> np.ndarray:
    y = _labels(y)
    if y.size == 0:
        return y
    return y[np.concatenate(([True], y[1:] != y[:-1]))]


def edit_score(pred, truth) -> float:
    """``100 * (1 - levenshtein / max length)`` over the segment-class strings."""
    P, T = segment_string(pred), segment_string(truth)
    if P.size == 0 or T.size == 0:
        raise ValueError("edit score needs non-empty sequences")
    d = kernels.levenshtein(np.ascontiguousarray(P), np.ascontiguousarray(T))
    return max(0.0, 100.0 * (1.0 - d / max(P.size, T.size)))


def f1_at_iou(pred, truth, thresholds=DEFAULT_THRESHOLDS) -> Dict[float, float]:
    """Segment F1 (percent) per IoU threshold (percent).

    Predicted segments are visited in order; each takes its best-IoU
    same-class true segment and counts as a hit when the IoU strictly
    exceeds the threshold and that true segment is still unmatched.
    """
    ps, ts = segments_from_labels(_labels(pred)), segments_from_labels(_labels(truth))
    t_cls = np.array([s.class_id for s in ts])
    t_lo = np.array([s.start for s in ts])
    t_hi = np.array([s.end + 1 for s in ts])
    out = {}
    for thr in thresholds:
        if not 0 < thr < 100:
            raise ValueError("IoU thresholds are percentages in (0, 100)")
        hit = np.zeros(len(ts), dtype=bool)
        tp = fp = 0
        for s in ps:
            lo, hi = s.start, s.end + 1
            inter = np.clip(np.minimum(hi, t_hi) - np.maximum(lo, t_lo), 0, None)
            union = np.maximum(hi, t_hi) - np.minimum(lo, t_lo)
            iou = np.where(t_cls == s.class_id, inter / union, -1.0)
            j = int(np.argmax(iou))
            if iou[j] * 100.0 > thr and not hit[j]:
                tp += 1
                hit[j] = True
            else:
                fp += 1
        fn = len(ts) - int(hit.sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        out[thr] = 0.0 if precision + recall == 0 else 100.0 * 2 * precision * recall / (precision + recall)
    return out


@dataclass
class TrialMetrics:
    trial_id: str
    accuracy: float
    edit: float
    f1: Dict[float, float]

    def row(self, thresholds):
        return [self.accuracy, self.edit] + [self.f1[t] for t in thresholds]


@dataclass
class EvalReport:
    accuracy: float
    edit_score: float
    f1: Dict[float, float]
    per_trial: List[TrialMetrics] = field(default_factory=list)
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS

    @classmethod
    def from_trials(cls, per_trial: List[TrialMetrics], thresholds=DEFAULT_THRESHOLDS):
        if not per_trial:
            raise ValueError("no trials to report")
        return cls(
            accuracy=float(np.mean([m.accuracy for m in per_trial])),
            edit_score=float(np.mean([m.edit for m in per_trial])),
            f1={t: float(np.mean([m.f1[t] for m in per_trial])) for t in thresholds},
            per_trial=list(per_trial),
            thresholds=tuple(thresholds),
        )

    def header(self):
        return ["trial_id", "accuracy", "edit"] + [f"f1@{_fmt(t)}" for t in self.thresholds]

    def rows(self):
        out = [[m.trial_id] + m.row(self.thresholds) for m in self.per_trial]
        out.append(["mean", self.accuracy, self.edit_score] + [self.f1[t] for t in self.thresholds])
        return out

    def to_tsv(self):
        lines = ["\t".join(self.header())]
        for r in self.rows():
            lines.append("\t".join([r[0]] + [f"{v:.6f}" for v in r[1:]]))
        return "\n".join(lines) + "\n"

    def to_table(self):
        head = self.header()
        rows = [[r[0]] + [f"{v:.2f}" for v in r[1:]] for r in self.rows()]
        widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
        fmt = "  ".join("{:<%d}" % w if i == 0 else "{:>%d}" % w for i, w in enumerate(widths))
        return "\n".join([fmt.format(*head)] + [fmt.format(*r) for r in rows]) + "\n"


def _fmt(t):
    return str(int(t)) if float(t).is_integer() else str(t)


def trial_metrics(trial_id, pred, truth, thresholds=DEFAULT_THRESHOLDS) -> TrialMetrics:
    return TrialMetrics(trial_id, frame_accuracy(pred, truth), edit_score(pred, truth),
                        f1_at_iou(pred, truth, thresholds))


def evaluate(preds, truths, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Per-trial metrics and their unweighted means.

    ``preds`` and ``truths`` map trial id to label arrays and must cover the
    same trials.
    """
    if set(preds) != set(truths):
        raise ValueError("prediction and ground-truth trial sets differ")
    per = [trial_metrics(tid, preds[tid], truths[tid], thresholds) for tid in truths]
    return EvalReport.from_trials(per, thresholds)
