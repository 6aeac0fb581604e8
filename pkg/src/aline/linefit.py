"""Least-squares lines on probit-scaled scatter data and their diagnostics."""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .data import Split
from .errors import DegenerateError, ValidationError
from .metrics import MetricTable, metric_table

STRONG_R2 = 0.95
WEAK_R2 = 0.75


@dataclass(frozen=True)
class LineFit:
    slope: float
    bias: float
    r_squared: float
    n_points: int

    def predict(self, x):
        return self.slope * np.asarray(x, dtype=np.float64) + self.bias

    def to_json(self) -> dict:
        return {"slope": self.slope, "bias": self.bias, "r2": self.r_squared, "n_points": self.n_points}


def ols_fit(x, y) -> LineFit:
    """Ordinary least squares ``y ~ slope * x + bias``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValidationError(f"x and y differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise DegenerateError(f"need at least 2 points for a line fit, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("non-finite coordinate in scatter")
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    sxx = float(dx @ dx)
    if sxx == 0.0 or np.all(x == x[0]):
        raise DegenerateError("all x values are identical; the line is not identifiable")
    slope = float(dx @ dy) / sxx
    bias = float(ym - slope * xm)
    resid = y - (slope * x + bias)
    ss_res = float(resid @ resid)
    ss_tot = float(dy @ dy)
    if ss_tot == 0.0:
        r2 = 1.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return LineFit(slope, bias, r2, int(x.size))


def spearman_rho(xs, ys) -> float:
    """Rank correlation; tied values share the mean of their ranks."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValidationError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValidationError("need at least 2 observations")
    rx, ry = rankdata(x) - 0.5 * (x.size + 1), rankdata(y) - 0.5 * (y.size + 1)
    den = np.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        raise DegenerateError("zero rank variance")
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


def _same_models(id_metrics: MetricTable, ood_metrics: MetricTable) -> None:
    if id_metrics.model_ids != ood_metrics.model_ids:
        raise ValidationError("ID and OOD tables cover different model sets")


def agreement_points(id_metrics: MetricTable, ood_metrics: MetricTable) -> tuple[np.ndarray, np.ndarray]:
    _same_models(id_metrics, ood_metrics)
    return id_metrics.probit_pair_agreements(), ood_metrics.probit_pair_agreements()


def accuracy_points(id_metrics: MetricTable, ood_metrics: MetricTable) -> tuple[np.ndarray, np.ndarray]:
    _same_models(id_metrics, ood_metrics)
    return id_metrics.probit_accuracies(), ood_metrics.probit_accuracies()


def agreement_line(id_metrics: MetricTable, ood_metrics: MetricTable) -> LineFit:
    """Fit probit OOD agreement against probit ID agreement over unordered pairs."""
    if id_metrics.n_models < 3:
        raise ValidationError(f"agreement line needs at least 3 models, got {id_metrics.n_models}")
    return ols_fit(*agreement_points(id_metrics, ood_metrics))


def accuracy_line(id_metrics: MetricTable, ood_metrics: MetricTable) -> LineFit:
    """Fit probit OOD accuracy against probit ID accuracy over models (needs OOD labels)."""
    return ols_fit(*accuracy_points(id_metrics, ood_metrics))


class Verdict(str, enum.Enum):
    STRONG = "STRONG"
    WEAK = "WEAK"
    INCONCLUSIVE = "INCONCLUSIVE"


def diagnose(fit: LineFit, strong: float = STRONG_R2, weak: float = WEAK_R2) -> Verdict:
    if fit.r_squared >= strong:
        return Verdict.STRONG
    if fit.r_squared <= weak:
        return Verdict.WEAK
    return Verdict.INCONCLUSIVE


@dataclass(frozen=True)
class SlopeDiffCI:
    """Percentile interval of accuracy-line slope minus agreement-line slope."""

    lower: float
    upper: float
    n_resamples: int
    subset_size: int
    seed: int
    discarded: int = 0

    def contains(self, value: float = 0.0) -> bool:
        return self.lower <= value <= self.upper

    def to_json(self) -> dict:
        return asdict(self)


def worker_count() -> int:
    """Thread cap from ``AOL_THREADS``; defaults to min(8, cpu count)."""
    raw = os.environ.get("AOL_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return min(8, os.cpu_count() or 1)


def _resample_indices(seed: int, resample: int, n: int, size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), resample]))
    return np.sort(rng.choice(n, size=size, replace=False))


def slope_diff_ci_tables(id_metrics: MetricTable, ood_metrics: MetricTable, *, subset_size: int = 10,
                         n_resamples: int = 1000, seed: int = 0, max_discard: float = 0.10,
                         threads: int | None = None) -> SlopeDiffCI:
    """Bootstrap the slope difference over random model subsets.

    Models are put in lexicographic id order before sampling, so the result
    does not depend on the order the tables list them in.  Each resample draws
    its own stream from ``(seed, resample_index)``.
    """
    _same_models(id_metrics, ood_metrics)
    if not (id_metrics.has_accuracies and ood_metrics.has_accuracies):
        raise ValidationError("slope difference test needs accuracies on both splits")
    n = id_metrics.n_models
    if subset_size < 3:
        raise ValidationError(f"subset size must be at least 3, got {subset_size}")
    if subset_size > n:
        raise ValidationError(f"subset size {subset_size} exceeds the {n} available models")
    if n_resamples < 1:
        raise ValidationError("need at least one resample")

    order = sorted(range(n), key=lambda i: id_metrics.model_ids[i])
    id_c, ood_c = id_metrics.subset(order), ood_metrics.subset(order)

    def one(r: int) -> float:
        idx = _resample_indices(seed, r, n, subset_size)
        a, b = id_c.subset(idx), ood_c.subset(idx)
        try:
            return accuracy_line(a, b).slope - agreement_line(a, b).slope
        except DegenerateError:
            return float("nan")

    workers = threads or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            diffs = np.array(list(pool.map(one, range(n_resamples))))
    else:
        diffs = np.array([one(r) for r in range(n_resamples)])

    kept = diffs[np.isfinite(diffs)]
    discarded = int(n_resamples - kept.size)
    if discarded > max_discard * n_resamples:
        raise DegenerateError(f"{discarded} of {n_resamples} resamples had degenerate fits")
    lower, upper = np.quantile(kept, [0.025, 0.975])
    return SlopeDiffCI(float(lower), float(upper), n_resamples, subset_size, int(seed), discarded)


def slope_diff_ci(models, id_labels, ood_labels, subset_size: int = 10, n_resamples: int = 1000,
                  seed: int = 0, **kwargs) -> SlopeDiffCI:
    """:func:`slope_diff_ci_tables` starting from raw predictions and labels."""
    if ood_labels is None:
        raise ValidationError("slope difference test needs OOD labels")
    id_t = metric_table(models, id_labels, Split.ID_VAL)
    ood_t = metric_table(models, ood_labels, Split.OOD)
    return slope_diff_ci_tables(id_t, ood_t, subset_size=subset_size, n_resamples=n_resamples, seed=seed, **kwargs)
