"""OOD accuracy estimators.

ALine-S maps each model's probit ID accuracy through the agreement line.
ALine-D solves the pair-averaging least-squares system, which uses each
model's own OOD agreements directly.  The confidence baselines (ATC, AC,
DOC-Feat) need logits; naive Agreement needs only OOD predictions.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax

from .errors import DegenerateError, ValidationError
from .linefit import LineFit, agreement_line, worker_count
from .metrics import MetricTable, inverse_probit


class Method(str, enum.Enum):
    ALINE_S = "aline-s"
    ALINE_D = "aline-d"
    ATC = "atc"
    AC = "ac"
    DOC_FEAT = "doc-feat"
    AGREEMENT = "agreement"


@dataclass
class EstimateReport:
    method: Method
    model_ids: tuple[str, ...]
    estimates: np.ndarray
    diagnostics: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {mid: float(v) for mid, v in zip(self.model_ids, self.estimates)}

    def to_json(self) -> dict:
        return {
            "method": Method(self.method).value,
            "estimates": self.as_dict(),
            "diagnostics": _jsonable(self.diagnostics),
            "provenance": dict(self.provenance),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, enum.Enum):
        return obj.value
    if hasattr(obj, "to_json"):
        return obj.to_json()
    return obj


# --------------------------------------------------------------------------
# ALine


def _check_tables(id_metrics: MetricTable, ood_metrics: MetricTable) -> None:
    if id_metrics.model_ids != ood_metrics.model_ids:
        raise ValidationError("ID and OOD tables cover different model sets")
    if not id_metrics.has_accuracies:
        raise ValidationError("ALine needs ID accuracies")
    if id_metrics.n_models < 3:
        raise ValidationError(f"ALine needs at least 3 models, got {id_metrics.n_models}")


def aline_s(id_metrics: MetricTable, ood_metrics: MetricTable, fit: LineFit | None = None) -> EstimateReport:
    """Push each probit ID accuracy through the fitted agreement line."""
    _check_tables(id_metrics, ood_metrics)
    fit = fit or agreement_line(id_metrics, ood_metrics)
    z = fit.slope * id_metrics.probit_accuracies() + fit.bias
    return EstimateReport(Method.ALINE_S, id_metrics.model_ids, np.atleast_1d(inverse_probit(z)),
                          {"slope": fit.slope, "bias": fit.bias, "r2": fit.r_squared})


@dataclass(frozen=True)
class PairSystem:
    """Least-squares system ``A w = b`` with one row per unordered model pair.

    Row ``(j, k)`` of ``A`` holds 1/2 in columns ``j`` and ``k``.  ``A`` is
    never materialized: ``normal_matrix`` builds ``A^T A`` directly.
    """

    n_models: int
    pairs: np.ndarray  # (n_pairs, 2), j < k
    rhs: np.ndarray

    def design_matrix(self) -> np.ndarray:
        a = np.zeros((len(self.pairs), self.n_models))
        rows = np.arange(len(self.pairs))
        a[rows, self.pairs[:, 0]] = 0.5
        a[rows, self.pairs[:, 1]] = 0.5
        return a

    def normal_matrix(self) -> np.ndarray:
        # Each row contributes 1/4 to two diagonal entries and to the (j, k), (k, j) entries.
        n = self.n_models
        ata = np.zeros((n, n))
        j, k = self.pairs[:, 0], self.pairs[:, 1]
        np.add.at(ata, (j, j), 0.25)
        np.add.at(ata, (k, k), 0.25)
        np.add.at(ata, (j, k), 0.25)
        np.add.at(ata, (k, j), 0.25)
        return ata

    def normal_rhs(self) -> np.ndarray:
        atb = np.zeros(self.n_models)
        half = 0.5 * self.rhs
        np.add.at(atb, self.pairs[:, 0], half)
        np.add.at(atb, self.pairs[:, 1], half)
        return atb

    def solve(self) -> np.ndarray:
        if self.n_models < 3:
            raise ValidationError(f"pair system needs at least 3 models, got {self.n_models}")
        try:
            chol = np.linalg.cholesky(self.normal_matrix())
        except np.linalg.LinAlgError:
            raise DegenerateError("pair system is rank deficient") from None
        y = np.linalg.solve(chol, self.normal_rhs())
        return np.linalg.solve(chol.T, y)


def build_pair_system(id_metrics: MetricTable, ood_metrics: MetricTable, slope: float) -> PairSystem:
    """Rows: probit OOD agreement + slope * (mean probit ID accuracy - probit ID agreement)."""
    n = id_metrics.n_models
    iu, ju = np.triu_indices(n, k=1)
    pa = id_metrics.probit_accuracies()
    rhs = (ood_metrics.probit_pair_agreements()
           + slope * (0.5 * (pa[iu] + pa[ju]) - id_metrics.probit_pair_agreements()))
    return PairSystem(n, np.column_stack([iu, ju]), rhs)


def aline_d(id_metrics: MetricTable, ood_metrics: MetricTable, fit: LineFit | None = None) -> EstimateReport:
    """Solve the pair-averaging system for probit OOD accuracies."""
    _check_tables(id_metrics, ood_metrics)
    fit = fit or agreement_line(id_metrics, ood_metrics)
    system = build_pair_system(id_metrics, ood_metrics, fit.slope)
    w = system.solve()
    resid = system.design_matrix() @ w - system.rhs if system.n_models <= 200 else None
    diag = {"slope": fit.slope, "bias": fit.bias, "r2": fit.r_squared, "probit_estimates": w}
    if resid is not None:
        diag["residual_norm"] = float(np.linalg.norm(resid))
    return EstimateReport(Method.ALINE_D, id_metrics.model_ids, np.atleast_1d(inverse_probit(w)), diag)


# --------------------------------------------------------------------------
# confidence baselines


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def negative_entropy(probs: np.ndarray) -> np.ndarray:
    """Row-wise sum of ``p log p`` with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return terms.sum(axis=1)


def mean_nll(logits, labels, temperature: float = 1.0) -> float:
    logp = log_softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=1)
    y = np.asarray(labels, dtype=np.int64)
    return float(-logp[np.arange(len(y)), y].mean())


def _nll_curve(logits: np.ndarray, labels: np.ndarray):
    """``T -> mean_nll(logits, labels, T)`` with the row-max shift done once.

    Dividing by ``T > 0`` keeps the row maximum in place, so the shifted
    block stays non-positive with a zero in every row at any temperature.
    """
    d = logits - logits.max(axis=1, keepdims=True)
    d_true = d[np.arange(len(labels)), labels]

    def nll(t: float) -> float:
        with np.errstate(over="ignore"):
            lse = np.log(np.exp(d / t).sum(axis=1))
        return float(np.mean(lse - d_true / t))

    return nll


@dataclass(frozen=True)
class CalibrationResult:
    temperature: float
    id_nll_before: float
    id_nll_after: float

    def to_json(self) -> dict:
        return {"temperature": self.temperature, "id_nll_before": self.id_nll_before,
                "id_nll_after": self.id_nll_after}


IDENTITY_CALIBRATION = CalibrationResult(1.0, float("nan"), float("nan"))

_LOG_T_BOUNDS = (math.log(1e-2), math.log(1e2))


def temperature_scale(id_logits, id_labels, tol: float = 1e-6) -> CalibrationResult:
    """Temperature in [1e-2, 1e2] minimizing ID mean NLL.

    A coarse log-spaced scan brackets the minimum, then a bounded scalar
    search refines it in log-temperature.
    """
    logits = np.asarray(id_logits, dtype=np.float64)
    labels = np.asarray(getattr(id_labels, "labels", id_labels), dtype=np.int64)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValidationError("temperature scaling needs a nonempty 2-D logit block")
    if len(labels) != len(logits):
        raise ValidationError(f"{len(labels)} labels for {len(logits)} logit rows")

    curve = _nll_curve(logits, labels)

    def f(log_t: float) -> float:
        v = curve(math.exp(log_t))
        return v if math.isfinite(v) else math.inf

    grid = np.linspace(*_LOG_T_BOUNDS, 81)
    values = np.array([f(g) for g in grid])
    if not np.isfinite(values).any():
        raise DegenerateError("NLL is non-finite at every probed temperature")
    best = int(np.argmin(values))
    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, len(grid) - 1)]
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": tol})
    log_t, nll = (float(res.x), float(res.fun)) if res.fun <= values[best] else (float(grid[best]), float(values[best]))

    before = curve(1.0)
    if not nll <= before:
        log_t, nll = 0.0, before
    return CalibrationResult(math.exp(log_t), before, nll)


def atc_threshold(id_scores: np.ndarray, id_accuracy: float) -> float:
    """k-th smallest ID score with ``k = round((1 - acc) * m)``; ``-inf`` when ``k = 0``.

    Counting scores strictly above this threshold reproduces the ID accuracy
    up to one order statistic.
    """
    s = np.sort(np.asarray(id_scores, dtype=np.float64))
    m = s.size
    if m == 0:
        raise ValidationError("ATC needs at least one ID example")
    k = int(round((1.0 - id_accuracy) * m))
    return -math.inf if k <= 0 else float(s[min(k, m) - 1])


@dataclass(frozen=True)
class ATCResult:
    estimate: float
    threshold: float
    temperature: float


def atc(id_logits, ood_logits, id_labels, calibration: CalibrationResult | None = None) -> ATCResult:
    """Average Threshold Confidence with the negative-entropy score."""
    if id_logits is None or ood_logits is None:
        raise ValidationError("ATC needs logits on both splits")
    t_cal = (calibration or IDENTITY_CALIBRATION).temperature
    id_logits = np.asarray(id_logits, dtype=np.float64)
    labels = np.asarray(getattr(id_labels, "labels", id_labels))
    if len(id_logits) == 0:
        raise ValidationError("ATC needs at least one ID example")
    acc = float(np.mean(np.argmax(id_logits, axis=1) == labels))
    id_scores = negative_entropy(softmax(id_logits, t_cal))
    ood_scores = negative_entropy(softmax(ood_logits, t_cal))
    t = atc_threshold(id_scores, acc)
    return ATCResult(float(np.mean(ood_scores > t)), t, t_cal)


def average_confidence(ood_logits, temperature: float = 1.0) -> float:
    """Mean max-softmax probability."""
    if ood_logits is None:
        raise ValidationError("AC needs OOD logits")
    return float(softmax(ood_logits, temperature).max(axis=1).mean())


@dataclass(frozen=True)
class DocResult:
    estimate: float
    raw: float
    clipped: bool


def doc_feat(id_logits, ood_logits, id_accuracy: float, temperature: float = 1.0) -> DocResult:
    """ID accuracy lowered by the drop in mean max-confidence, clipped to [0, 1]."""
    if id_logits is None or ood_logits is None:
        raise ValidationError("DOC-Feat needs logits on both splits")
    drop = average_confidence(id_logits, temperature) - average_confidence(ood_logits, temperature)
    raw = id_accuracy - drop
    est = min(1.0, max(0.0, raw))
    return DocResult(est, raw, est != raw)


def naive_agreement(ood_metrics: MetricTable, pairing: Iterable[tuple[str, str]] | None = None
                    ) -> tuple[dict[tuple[str, str], float], EstimateReport]:
    """OOD agreement of each pair as the guess for the pair's mean OOD accuracy.

    Returns the per-pair values and a per-model report averaging over every
    pair that contains the model.
    """
    ids = ood_metrics.model_ids
    if pairing is None:
        pairing = [(ids[i], ids[j]) for i, j in ood_metrics.pairs()]
    per_pair: dict[tuple[str, str], float] = {}
    sums = np.zeros(len(ids))
    counts = np.zeros(len(ids), dtype=np.int64)
    for a, b in pairing:
        i, j = ood_metrics.index(a), ood_metrics.index(b)
        v = float(ood_metrics.agreements[i, j])
        per_pair[(a, b)] = v
        for idx in {i, j}:
            sums[idx] += v
            counts[idx] += 1
    with np.errstate(invalid="ignore"):
        agg = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    report = EstimateReport(Method.AGREEMENT, ids, agg,
                            {"pairs": [{"a": a, "b": b, "value": v} for (a, b), v in per_pair.items()]})
    return per_pair, report


def _model_logits(models, split_attr: str, mid: str):
    logits = getattr(models[mid], split_attr)
    if logits is None:
        raise ValidationError("missing logits", model_id=mid)
    return logits


def _one_model_baselines(zi, zo, labels, id_accuracy: float, use_cal: bool) -> dict:
    cal = temperature_scale(zi, labels) if use_cal else IDENTITY_CALIBRATION
    r = atc(zi, zo, labels, cal)
    d = doc_feat(zi, zo, id_accuracy, cal.temperature)
    return {"atc": r.estimate, "threshold": r.threshold, "temperature": cal.temperature,
            "ac": average_confidence(zo, cal.temperature), "doc": d}


def confidence_baselines(models, id_labels, id_metrics: MetricTable, *, calibrate: bool = True
                         ) -> dict[str, dict[str, EstimateReport]]:
    """ATC, AC and DOC-Feat for every model, uncalibrated and (optionally) calibrated.

    Returns ``{method: {"uncalibrated": report, "calibrated": report}}``.
    Models are processed in parallel (capped by ``AOL_THREADS``); results are
    collected in model order, so the output does not depend on scheduling.
    """
    labels = np.asarray(getattr(id_labels, "labels", id_labels))
    by_id = {rec.id: rec for rec in models}
    ids = id_metrics.model_ids
    blocks = [(_model_logits(by_id, "id_val_logits", mid), _model_logits(by_id, "ood_logits", mid)) for mid in ids]
    variants = {"uncalibrated": False, "calibrated": True} if calibrate else {"uncalibrated": False}
    out: dict[str, dict[str, EstimateReport]] = {m.value: {} for m in (Method.ATC, Method.AC, Method.DOC_FEAT)}
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for name, use_cal in variants.items():
            rows = list(pool.map(
                lambda i: _one_model_baselines(*blocks[i], labels, float(id_metrics.accuracies[i]), use_cal),
                range(len(ids))))
            atc_diag = {mid: {"threshold": r["threshold"], "temperature": r["temperature"]}
                        for mid, r in zip(ids, rows)}
            doc_diag = {mid: {"raw": r["doc"].raw, "clipped": r["doc"].clipped, "temperature": r["temperature"]}
                        for mid, r in zip(ids, rows)}
            out[Method.ATC.value][name] = EstimateReport(
                Method.ATC, ids, np.array([r["atc"] for r in rows]), {"per_model": atc_diag})
            out[Method.AC.value][name] = EstimateReport(Method.AC, ids, np.array([r["ac"] for r in rows]), {})
            out[Method.DOC_FEAT.value][name] = EstimateReport(
                Method.DOC_FEAT, ids, np.array([r["doc"].estimate for r in rows]), {"per_model": doc_diag})
    return out
