"""Benchmark harness: MAE against OOD labels, correlation checks and ablations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .data import LabeledSplit, ModelSet, Split
from .errors import DegenerateError, ValidationError
from .estimators import EstimateReport, Method, aline_d, aline_s, confidence_baselines, naive_agreement
from .linefit import agreement_line, ols_fit, spearman_rho
from .metrics import MetricTable, metric_table

ALL_METHODS = tuple(m.value for m in Method)
LOGIT_METHODS = (Method.ATC.value, Method.AC.value, Method.DOC_FEAT.value)


def mae_percent(estimates, truths) -> float:
    """Mean absolute error in percentage points."""
    e = np.asarray(estimates, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if e.shape != t.shape or e.size == 0:
        raise ValidationError("estimates and truths must be nonempty and equally long")
    return float(100.0 * np.mean(np.abs(e - t)))


@dataclass
class MethodResult:
    method: str
    mae: float
    report: EstimateReport
    variant: str | None = None
    alternatives: dict[str, float] = field(default_factory=dict)
    rho: float | None = None
    r2: float | None = None

    def to_json(self) -> dict:
        out: dict[str, Any] = {"mae_percent": self.mae, "report": self.report.to_json()}
        if self.variant is not None:
            out["selected_variant"] = self.variant
            out["variant_mae_percent"] = self.alternatives
        out["rank_correlation"] = self.rho
        out["r2"] = self.r2
        return out


@dataclass
class BenchResult:
    model_ids: tuple[str, ...]
    truths: np.ndarray
    methods: dict[str, MethodResult]
    agreement_fit: Any = None

    def to_json(self) -> dict:
        return {
            "truth": {mid: float(v) for mid, v in zip(self.model_ids, self.truths)},
            "methods": {k: v.to_json() for k, v in self.methods.items()},
        }

    def scatter_rows(self) -> list[tuple[str, str, float, float]]:
        rows = []
        for name, res in self.methods.items():
            for mid, est, truth in zip(self.model_ids, res.report.estimates, self.truths):
                rows.append((name, mid, float(est), float(truth)))
        return rows


def _correlation(est: np.ndarray, truth: np.ndarray) -> tuple[float | None, float | None]:
    try:
        rho = spearman_rho(est, truth)
    except (DegenerateError, ValidationError):
        rho = None
    try:
        r2 = ols_fit(truth, est).r_squared
    except (DegenerateError, ValidationError):
        r2 = None
    return rho, r2


def run_bench(models: ModelSet, id_labels: LabeledSplit, ood_labels: LabeledSplit,
              methods: Sequence[str] = ALL_METHODS, *, calibrate: bool = True,
              id_metrics: MetricTable | None = None, ood_metrics: MetricTable | None = None) -> BenchResult:
    """Run the requested estimators and score them against OOD labels.

    For ATC, AC and DOC-Feat the uncalibrated and temperature-scaled variants
    are both scored and the lower MAE is reported, with the choice recorded.
    """
    if ood_labels is None:
        raise ValidationError("benchmarking needs OOD labels")
    methods = [Method(m).value for m in methods]
    id_t = id_metrics or metric_table(models, id_labels, Split.ID_VAL)
    ood_t = ood_metrics or metric_table(models, ood_labels, Split.OOD)
    truth = ood_t.accuracies
    results: dict[str, MethodResult] = {}

    fit = None
    if {Method.ALINE_S.value, Method.ALINE_D.value} & set(methods):
        fit = agreement_line(id_t, ood_t)
    unlabeled = ood_t.without_accuracies()
    for name in methods:
        if name == Method.ALINE_S.value:
            rep = aline_s(id_t, unlabeled, fit)
        elif name == Method.ALINE_D.value:
            rep = aline_d(id_t, unlabeled, fit)
        elif name == Method.AGREEMENT.value:
            _, rep = naive_agreement(unlabeled)
        else:
            continue
        results[name] = MethodResult(name, mae_percent(rep.estimates, truth), rep)

    wanted = [m for m in methods if m in LOGIT_METHODS]
    if wanted:
        if not models.has_logits:
            missing = next(r.id for r in models if not r.has_logits)
            raise ValidationError("missing logits", model_id=missing)
        by_method = confidence_baselines(models, id_labels, id_t, calibrate=calibrate)
        for name in wanted:
            scored = {variant: mae_percent(rep.estimates, truth) for variant, rep in by_method[name].items()}
            best = min(scored, key=lambda v: (scored[v], v != "uncalibrated"))
            results[name] = MethodResult(name, scored[best], by_method[name][best], best, scored)

    for res in results.values():
        res.rho, res.r2 = _correlation(res.report.estimates, truth)
    ordered = {m: results[m] for m in methods if m in results}
    return BenchResult(id_t.model_ids, truth, ordered, fit)


def run_bench_tables(id_t: MetricTable, ood_t: MetricTable, methods: Sequence[str]) -> BenchResult:
    """Label-free methods scored from precomputed tables (no logits available)."""
    truth = ood_t.accuracies
    if truth is None:
        raise ValidationError("benchmarking needs OOD accuracies")
    unlabeled = ood_t.without_accuracies()
    results: dict[str, MethodResult] = {}
    for name in methods:
        name = Method(name).value
        if name == Method.ALINE_S.value:
            rep = aline_s(id_t, unlabeled)
        elif name == Method.ALINE_D.value:
            rep = aline_d(id_t, unlabeled)
        elif name == Method.AGREEMENT.value:
            _, rep = naive_agreement(unlabeled)
        else:
            raise ValidationError(f"missing logits: {name} cannot run from metric tables alone")
        res = MethodResult(name, mae_percent(rep.estimates, truth), rep)
        res.rho, res.r2 = _correlation(rep.estimates, truth)
        results[name] = res
    return BenchResult(id_t.model_ids, truth, results)


# --------------------------------------------------------------------------
# ablation


def _subset_rng(seed: int, size: int, repeat: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), size, repeat]))


def aline_d_mae(id_t: MetricTable, ood_t: MetricTable, indices: Sequence[int]) -> float:
    a, b = id_t.subset(indices), ood_t.subset(indices)
    return mae_percent(aline_d(a, b).estimates, b.accuracies)


def ablate_sizes(id_t: MetricTable, ood_t: MetricTable, sizes: Iterable[int], repeats: int = 10,
                 seed: int = 0) -> list[dict]:
    """ALine-D MAE averaged over random model subsets of each requested size.

    Models are taken in lexicographic id order before sampling.
    """
    if not ood_t.has_accuracies:
        raise ValidationError("ablation needs OOD labels")
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    n = id_t.n_models
    order = sorted(range(n), key=lambda i: id_t.model_ids[i])
    id_c, ood_c = id_t.subset(order), ood_t.subset(order)
    rows = []
    for size in sizes:
        if size < 3:
            raise ValidationError(f"subset size {size} is below the 3-model minimum of ALine-D")
        if size > n:
            raise ValidationError(f"subset size {size} exceeds the {n} available models")
        maes, failed = [], 0
        for r in range(repeats):
            idx = np.arange(n) if size == n else np.sort(_subset_rng(seed, size, r).choice(n, size, replace=False))
            try:
                maes.append(aline_d_mae(id_c, ood_c, idx))
            except DegenerateError:
                failed += 1
        rows.append({"size": int(size), "repeats": repeats, "failed": failed,
                     "mae_percent": float(np.mean(maes)) if maes else None,
                     "mae_std": float(np.std(maes)) if maes else None})
    return rows


def ablate_architectures(id_t: MetricTable, ood_t: MetricTable, architectures: Mapping[str, str],
                         repeats: int = 10, seed: int = 0) -> list[dict]:
    """Homogeneous sets (one architecture) against mixed random sets of the same size."""
    groups: dict[str, list[int]] = {}
    for i, mid in enumerate(id_t.model_ids):
        arch = architectures.get(mid)
        if arch is not None:
            groups.setdefault(arch, []).append(i)
    n = id_t.n_models
    rows = []
    for g, (arch, members) in enumerate(sorted(groups.items())):
        size = len(members)
        if size < 3:
            rows.append({"architecture": arch, "size": size, "skipped": "fewer than 3 models"})
            continue
        row: dict[str, Any] = {"architecture": arch, "size": size}
        try:
            row["homogeneous_mae_percent"] = aline_d_mae(id_t, ood_t, members)
        except DegenerateError as exc:
            row["homogeneous_mae_percent"] = None
            row["homogeneous_error"] = str(exc)
        maes = []
        for r in range(repeats):
            rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 1_000_003, g, r]))
            try:
                maes.append(aline_d_mae(id_t, ood_t, np.sort(rng.choice(n, size, replace=False))))
            except DegenerateError:
                pass
        row["mixed_mae_percent"] = float(np.mean(maes)) if maes else None
        rows.append(row)
    return rows
