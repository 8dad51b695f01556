"""Evaluation metrics and cross-model statistics.

AUROC is the tie-aware Mann-Whitney statistic (average ranks), multi-class
AUROC is macro one-vs-rest, and sensitivity/specificity are macro-averaged
at the argmax operating point. Confidence intervals are percentile bootstrap;
model comparisons use the paired t-test and the paired Cohen's d
(mean(diff)/sd(diff), so d*sqrt(k) == t exactly).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import stats as sstats

from .errors import DegenerateMetricError
from .seeding import derived_rng

log = logging.getLogger(__name__)


def auroc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """(#concordant + 0.5 * #tied) / (#pos * #neg), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal 1-D")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMetricError("AUROC undefined: only one class present")
    ranks = sstats.rankdata(scores, method="average")
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_macro_ovr(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes c of auroc_binary(prob[:, c], labels == c)."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ValueError(f"probabilities {probs.shape} incompatible with {labels.size} labels")
    n_classes = probs.shape[1]
    present = set(np.unique(labels).tolist())
    missing = [c for c in range(n_classes) if c not in present]
    if missing:
        raise DegenerateMetricError(f"AUROC undefined: classes {missing} absent from labels")
    per_class = [auroc_binary(probs[:, c], (labels == c).astype(np.int64)) for c in range(n_classes)]
    return float(np.mean(per_class))


def sens_spec_macro(predictions: np.ndarray, labels: np.ndarray, n_classes: int | None = None):
    """Macro one-vs-rest sensitivity and specificity at the argmax point."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if n_classes is None:
        n_classes = int(max(labels.max(), predictions.max())) + 1
    present = set(np.unique(labels).tolist())
    missing = [c for c in range(n_classes) if c not in present]
    if missing:
        raise DegenerateMetricError(f"sensitivity/specificity undefined: classes {missing} absent")
    sens, spec = [], []
    for c in range(n_classes):
        is_c = labels == c
        pred_c = predictions == c
        tp = int(np.sum(is_c & pred_c))
        fn = int(np.sum(is_c & ~pred_c))
        tn = int(np.sum(~is_c & ~pred_c))
        fp = int(np.sum(~is_c & pred_c))
        sens.append(tp / (tp + fn))
        spec.append(tn / (tn + fp) if (tn + fp) else 0.0)
    return float(np.mean(sens)), float(np.mean(spec))


class BootstrapCI(NamedTuple):
    low: float
    high: float
    redraws: int


def bootstrap_ci(
    metric: Callable[[np.ndarray], float],
    n_items: int,
    n_resamples: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> BootstrapCI:
    """Percentile bootstrap over row indices. `metric` receives an index
    array (with replacement) and may raise DegenerateMetricError; such
    resamples are redrawn and counted, and more than 50% undefined aborts."""
    if n_resamples < 100:
        raise ValueError(f"n_resamples must be >= 100, got {n_resamples}")
    values = []
    redraws = 0
    attempt = 0
    max_attempts = 2 * n_resamples
    while len(values) < n_resamples:
        if attempt >= max_attempts:
            raise DegenerateMetricError(
                f"metric undefined on more than half of the bootstrap resamples "
                f"({redraws} of {attempt} draws)"
            )
        idx = derived_rng(seed, "bootstrap", attempt).integers(0, n_items, size=n_items)
        attempt += 1
        try:
            values.append(float(metric(idx)))
        except DegenerateMetricError:
            redraws += 1
    if redraws:
        log.info("bootstrap_ci: redrew %d degenerate resamples", redraws)
    lo, hi = np.quantile(np.asarray(values), [alpha / 2.0, 1.0 - alpha / 2.0], method="linear")
    return BootstrapCI(float(lo), float(hi), redraws)


def p_value_from_t(t: float, df: int) -> float:
    """Two-sided Student-t tail probability."""
    return float(2.0 * sstats.t.sf(abs(t), df))


def paired_t_test(runs_a: Sequence[float], runs_b: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError(f"need two equal-length run vectors with k >= 2, got {a.shape}, {b.shape}")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateMetricError("paired t-test undefined: zero variance of differences")
    k = d.size
    t = float(d.mean() / (sd / np.sqrt(k)))
    return t, p_value_from_t(t, k - 1)


def cohens_d(runs_a: Sequence[float], runs_b: Sequence[float]) -> float:
    """Paired effect size mean(diff)/sd(diff); equals t/sqrt(k) exactly."""
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError(f"need two equal-length run vectors with k >= 2, got {a.shape}, {b.shape}")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateMetricError("Cohen's d undefined: zero variance of differences")
    return float(d.mean() / sd)


def radar_normalize(values: Sequence[float]) -> list[float]:
    """0.2 + (x - min) * 0.8 / (max - min); min maps to 0.2, max to 1.0."""
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        raise DegenerateMetricError("radar normalization undefined: all values equal")
    return (0.2 + (arr - lo) * 0.8 / (hi - lo)).tolist()


@dataclass
class EvalReport:
    task: str
    model: str
    seed: int
    n_test: int
    auroc: float
    auroc_ci: tuple[float, float]
    sensitivity: float
    sensitivity_ci: tuple[float, float]
    specificity: float
    specificity_ci: tuple[float, float]
    per_class_auroc: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("auroc", "sensitivity", "specificity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of [0, 1]: {v}")
        for name in ("auroc_ci", "sensitivity_ci", "specificity_ci"):
            lo, hi = getattr(self, name)
            point = getattr(self, name.removesuffix("_ci"))
            if not lo <= point <= hi:
                raise ValueError(f"{name} ({lo}, {hi}) does not bracket {point}")


EVAL_CSV_HEADER = ["task", "model", "seed", "auroc", "auroc_lo", "auroc_hi", "sens", "spec"]


def eval_csv_row(r: EvalReport) -> list[str]:
    return [
        r.task,
        r.model,
        str(r.seed),
        repr(r.auroc),
        repr(r.auroc_ci[0]),
        repr(r.auroc_ci[1]),
        repr(r.sensitivity),
        repr(r.specificity),
    ]


def write_eval_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVAL_CSV_HEADER)
        writer.writerows(eval_csv_row(r) for r in reports)
    tmp.replace(path)


def read_eval_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != EVAL_CSV_HEADER:
            raise ValueError(f"{path}: header {header} != {EVAL_CSV_HEADER}")
        out = []
        for row in reader:
            out.append(
                {
                    "task": row[0],
                    "model": row[1],
                    "seed": int(row[2]),
                    "auroc": float(row[3]),
                    "auroc_lo": float(row[4]),
                    "auroc_hi": float(row[5]),
                    "sens": float(row[6]),
                    "spec": float(row[7]),
                }
            )
        return out


@dataclass
class PairedComparison:
    task: str
    n_runs: int
    mean_diff: float
    pct_diff: float
    t_statistic: float
    p_value: float
    cohens_d: float

    def __post_init__(self):
        if self.n_runs < 2:
            raise ValueError(f"n_runs must be >= 2, got {self.n_runs}")
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p_value out of [0, 1]: {self.p_value}")


COMPARISON_CSV_HEADER = ["task", "n_runs", "mean_diff", "pct_diff", "t", "p", "cohens_d"]


def compare_paired_runs(task: str, runs_a: Sequence[float], runs_b: Sequence[float]) -> PairedComparison:
    """Model A vs model B over matched runs: mean difference, percentage
    improvement relative to B's mean, t, p, and the paired effect size."""
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    t, p = paired_t_test(a, b)
    mean_diff = float((a - b).mean())
    base = float(b.mean())
    if base == 0.0:
        raise DegenerateMetricError("percentage difference undefined: comparator mean is zero")
    return PairedComparison(
        task=task,
        n_runs=a.size,
        mean_diff=mean_diff,
        pct_diff=100.0 * mean_diff / base,
        t_statistic=t,
        p_value=p,
        cohens_d=cohens_d(a, b),
    )


def write_comparison_csv(comparisons: Sequence[PairedComparison], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARISON_CSV_HEADER)
        for c in comparisons:
            writer.writerow(
                [
                    c.task,
                    str(c.n_runs),
                    repr(c.mean_diff),
                    repr(c.pct_diff),
                    repr(c.t_statistic),
                    repr(c.p_value),
                    repr(c.cohens_d),
                ]
            )
    tmp.replace(path)
