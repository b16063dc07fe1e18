"""Discrimination metrics, concept regression skill and paired bootstrap CIs.

Timepoints are pooled across patients: every valid hour contributes one
(score, label) pair.  Bootstrap resampling is done over patients, since hours
within a stay are correlated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class UndefinedMetric(ValueError):
    """The metric has no value for this input (e.g. a single class)."""


@dataclass
class EvalSample:
    patient_id: int
    y_true: np.ndarray  # [T] binary
    y_pred: np.ndarray  # [T] in [0, 1]
    concept_labels: np.ndarray | None = None  # [T, N]
    concepts: np.ndarray | None = None  # [T, N]

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.float64)
        self.y_pred = np.asarray(self.y_pred, dtype=np.float64)
        if self.y_true.shape != self.y_pred.shape:
            raise ValueError(f"patient {self.patient_id}: y_true {self.y_true.shape} vs y_pred {self.y_pred.shape}")
        if np.any((self.y_pred < 0) | (self.y_pred > 1)):
            raise ValueError(f"patient {self.patient_id}: predictions outside [0, 1]")


@dataclass
class MetricReport:
    name: str
    point: float
    lower: float
    upper: float
    n_resamples: int

    def interval(self) -> str:
        return f"{self.point:.3f}[{self.lower:.3f}-{self.upper:.3f}]"

    def __str__(self) -> str:
        return f"{self.name}\t{self.interval()}\tn={self.n_resamples}"


@dataclass
class Comparison:
    report_a: MetricReport
    report_b: MetricReport
    delta: MetricReport  # a - b
    p_value: float
    n_redraws: int

    def overlapping(self) -> bool:
        a, b = self.report_a, self.report_b
        return a.lower <= b.upper and b.lower <= a.upper


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} vs labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if np.any(np.isnan(s)):
        raise ValueError("scores contain NaN")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Concordance probability via the rank-sum statistic; ties count one half."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both classes")
    ranks = rankdata(s)  # average ranks, multiples of 0.5
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _operating_points(s: np.ndarray, y: np.ndarray):
    """Cumulative TP/FP counts at each distinct score threshold, high to low."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def auprc(scores, labels) -> float:
    """Area under the precision envelope, stepping in recall.

    At each achievable recall the precision used is the best precision at
    that recall or higher; no linear interpolation in PR space.
    """
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("AUPRC needs at least one positive")
    _, tp, fp = _operating_points(s, y)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds), starting at (0, 0) with threshold +inf."""
    s, y = _check_binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC curve needs both classes")
    thr, tp, fp = _operating_points(s, y)
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos], np.r_[np.inf, thr]


def pr_curve(scores, labels):
    """(recall, precision, enveloped precision, thresholds) at each distinct threshold."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("PR curve needs at least one positive")
    thr, tp, fp = _operating_points(s, y)
    precision = tp / (tp + fp)
    return tp / n_pos, precision, np.maximum.accumulate(precision[::-1])[::-1], thr


def pooled(samples: Sequence[EvalSample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([x.y_pred for x in samples]), np.concatenate([x.y_true for x in samples]))


METRICS: dict[str, Callable] = {"AUROC": auroc, "AUPRC": auprc}


# ---------------------------------------------------------------------------
# concept regression
# ---------------------------------------------------------------------------


@dataclass
class ConceptReport:
    mse: np.ndarray  # [N]
    baseline_mse: np.ndarray  # [N], predicting the training mean
    train_mean: np.ndarray  # [N]
    actual: np.ndarray  # [n_points, N]
    predicted: np.ndarray  # [n_points, N]

    def rows(self, names: Sequence[str]) -> list[str]:
        return [f"{n}\t{float(m)!r}\t{float(b)!r}" for n, m, b in zip(names, self.mse, self.baseline_mse)]


def concept_regression_report(samples: Sequence[EvalSample], train_mean) -> ConceptReport:
    """Per-concept MSE over all pooled timepoints, against a constant
    ``train_mean`` predictor."""
    if not samples:
        raise ValueError("concept_regression_report: no samples")
    if any(x.concepts is None or x.concept_labels is None for x in samples):
        raise ValueError("concept_regression_report: samples lack concept predictions")
    actual = np.concatenate([x.concept_labels for x in samples])
    pred = np.concatenate([x.concepts for x in samples])
    train_mean = np.asarray(train_mean, dtype=np.float64)
    if train_mean.shape != (actual.shape[1],):
        raise ValueError(f"train_mean shape {train_mean.shape} vs {actual.shape[1]} concepts")
    mse = np.mean((pred - actual) ** 2, axis=0)
    base = np.mean((train_mean - actual) ** 2, axis=0)
    return ConceptReport(mse, base, train_mean, actual, pred)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


def _percentile_ci(values: np.ndarray, point: float, level: float) -> tuple[float, float]:
    lo, hi = np.percentile(values, [50 * (1 - level), 50 * (1 + level)])
    # percentile intervals can miss a point estimate at a skewed edge; widen
    return float(min(lo, point)), float(max(hi, point))


def _resample(rng, n: int, offsets: np.ndarray) -> np.ndarray:
    pick = rng.integers(0, n, size=n)
    return np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in pick])


def bootstrap_metric(samples: Sequence[EvalSample], metric: str = "AUROC", n_resamples: int = 1000,
                     seed: int = 0, level: float = 0.95) -> MetricReport:
    return bootstrap_compare(samples, None, metric, n_resamples, seed, level).report_a


def bootstrap_compare(samples_a: Sequence[EvalSample], samples_b: Sequence[EvalSample] | None,
                      metric: str = "AUROC", n_resamples: int = 1000, seed: int = 0,
                      level: float = 0.95, max_redraws: int = 100) -> Comparison:
    """Paired patient-level bootstrap of ``metric`` for two models.

    Resample ``k`` uses its own generator seeded from ``(seed, k)``.  Draws on
    which the metric is undefined are redrawn and counted.  The p-value is
    two-sided from the bootstrap distribution of ``a - b``.  With
    ``samples_b=None`` only model a is reported.
    """
    fn = METRICS[metric]
    if not samples_a:
        raise ValueError("bootstrap_compare: no samples")
    if n_resamples < 1:
        raise ValueError("n_resamples must be positive")
    paired = samples_b is not None
    if paired:
        ids_a = [x.patient_id for x in samples_a]
        ids_b = [x.patient_id for x in samples_b]
        if ids_a != ids_b:
            raise ValueError("bootstrap_compare: models were evaluated on different patients")
        for a, b in zip(samples_a, samples_b):
            if not np.array_equal(a.y_true, b.y_true):
                raise ValueError(f"patient {a.patient_id}: labels differ between models")
    pa, y = pooled(samples_a)
    pb = pooled(samples_b)[0] if paired else None
    point_a = fn(pa, y)
    point_b = fn(pb, y) if paired else np.nan

    n = len(samples_a)
    offsets = np.r_[0, np.cumsum([x.y_true.size for x in samples_a])]
    va, vb = np.empty(n_resamples), np.empty(n_resamples)
    redraws = 0
    for k in range(n_resamples):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        for attempt in range(max_redraws + 1):
            idx = _resample(rng, n, offsets)
            try:
                va[k] = fn(pa[idx], y[idx])
                vb[k] = fn(pb[idx], y[idx]) if paired else np.nan
                break
            except UndefinedMetric:
                redraws += 1
        else:
            raise UndefinedMetric(f"resample {k}: metric undefined after {max_redraws} redraws")
    if redraws > 0.01 * n_resamples:
        log.warning("bootstrap: %d redraws for %d resamples (%.1f%%)", redraws, n_resamples,
                    100.0 * redraws / n_resamples)

    rep_a = MetricReport(metric, point_a, *_percentile_ci(va, point_a, level), n_resamples)
    if not paired:
        nan = MetricReport(metric, np.nan, np.nan, np.nan, n_resamples)
        return Comparison(rep_a, nan, nan, np.nan, redraws)
    rep_b = MetricReport(metric, point_b, *_percentile_ci(vb, point_b, level), n_resamples)
    delta = va - vb
    point_d = point_a - point_b
    rep_d = MetricReport(f"delta_{metric}", point_d, *_percentile_ci(delta, point_d, level), n_resamples)
    p = min(1.0, 2.0 * min(np.mean(delta <= 0), np.mean(delta >= 0)))
    return Comparison(rep_a, rep_b, rep_d, float(p), redraws)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def write_roc(path, scores, labels) -> None:
    fpr, tpr, thr = roc_curve(scores, labels)
    with open(path, "w") as fh:
        fh.write("threshold\tfpr\ttpr\n")
        for t, f, r in zip(thr, fpr, tpr):
            fh.write(f"{float(t)!r}\t{float(f)!r}\t{float(r)!r}\n")


def write_pr(path, scores, labels) -> None:
    rec, prec, env, thr = pr_curve(scores, labels)
    with open(path, "w") as fh:
        fh.write("threshold\trecall\tprecision\tprecision_envelope\n")
        for t, r, p, e in zip(thr, rec, prec, env):
            fh.write("\t".join(repr(float(v)) for v in (t, r, p, e)) + "\n")


def write_concept_pairs(path, report: ConceptReport, names: Sequence[str]) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join([f"actual_{n}" for n in names] + [f"predicted_{n}" for n in names]) + "\n")
        for a, p in zip(report.actual, report.predicted):
            fh.write("\t".join(repr(float(v)) for v in np.r_[a, p]) + "\n")
