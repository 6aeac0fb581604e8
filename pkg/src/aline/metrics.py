"""Sample accuracies, pairwise agreements and probit scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .data import ModelSet, Split
from .errors import ValidationError

# Acklam's rational approximation to the normal quantile, lower/central/upper regions.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    if a.shape[-1] == 0:
        raise ValidationError("empty prediction column")


def accuracy(predictions, labels) -> float:
    """Fraction of rows where the prediction equals the label."""
    p, y = np.asarray(predictions), np.asarray(labels)
    _check_pair(p, y)
    return int(np.count_nonzero(p == y)) / p.shape[-1]


def agreement(pred_a, pred_b) -> float:
    """Fraction of rows on which two prediction columns coincide."""
    a, b = np.asarray(pred_a), np.asarray(pred_b)
    _check_pair(a, b)
    return int(np.count_nonzero(a == b)) / a.shape[-1]


def clamp_proportion(p, m: int):
    """Clamp into ``[1/(2m), 1 - 1/(2m)]``, half the resolution of an m-sample proportion."""
    if m < 1:
        raise ValueError(f"sample count must be >= 1, got {m}")
    p = np.asarray(p, dtype=np.float64)
    if np.any(~((p >= 0.0) & (p <= 1.0))):
        raise ValidationError("proportion outside [0, 1]")
    lo = 0.5 / m
    return np.clip(p, lo, 1.0 - lo)


def normal_quantile(p):
    """Inverse standard normal CDF on the open interval (0, 1).

    Rational approximation (relative error ~1e-9) followed by one Halley
    correction against the CDF, which brings the result to float precision.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(~((p > 0.0) & (p < 1.0))):
        raise ValueError("quantile argument must lie in the open interval (0, 1)")
    x = np.empty_like(p)

    low = p < _P_LOW
    high = p > 1.0 - _P_LOW
    mid = ~(low | high)

    if low.any() or high.any():
        tail = np.where(low, p, 1.0 - p)[low | high]
        q = np.sqrt(-2.0 * np.log(tail))
        c, d = _C, _D
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        val = num / den
        x[low | high] = np.where(low[low | high], val, -val)
    if mid.any():
        q = p[mid] - 0.5
        r = q * q
        a, b = _A, _B
        num = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
        den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        x[mid] = num / den

    # Correct on the lower half only; 1 - p is exact there and ndtr keeps full
    # relative precision in the left tail.
    upper = p > 0.5
    lo_p = np.where(upper, 1.0 - p, p)
    lo_x = np.where(upper, -x, x)
    e = ndtr(lo_x) - lo_p
    u = e * _SQRT_2PI * np.exp(0.5 * lo_x * lo_x)
    lo_x = lo_x - u / (1.0 + 0.5 * lo_x * u)
    x = np.where(upper, -lo_x, lo_x)
    return x if x.ndim else float(x)


def probit(p, m: int):
    """Probit transform of an m-sample proportion, clamped so the result is finite."""
    return normal_quantile(clamp_proportion(p, m))


def inverse_probit(z):
    """Standard normal CDF."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(~np.isfinite(z)):
        raise ValidationError("non-finite probit value")
    out = ndtr(z)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class MetricTable:
    """Accuracies and pairwise agreements of a model set on one split.

    ``agreements`` is a symmetric ``(n, n)`` matrix with a unit diagonal.
    ``accuracies`` is ``None`` when no labels were available.  Tables built by
    the synthetic constructor set ``synthetic`` and need not hold multiples of 1/m.
    """

    split: Split
    model_ids: tuple[str, ...]
    sample_count: int
    agreements: np.ndarray
    accuracies: np.ndarray | None = None
    synthetic: bool = False
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        n = len(self.model_ids)
        agr = np.array(self.agreements, dtype=np.float64)
        if agr.shape != (n, n):
            raise ValidationError(f"agreement matrix shape {agr.shape} does not match {n} models")
        agr.setflags(write=False)
        object.__setattr__(self, "agreements", agr)
        if self.accuracies is not None:
            acc = np.array(self.accuracies, dtype=np.float64)
            if acc.shape != (n,):
                raise ValidationError(f"accuracy vector shape {acc.shape} does not match {n} models")
            acc.setflags(write=False)
            object.__setattr__(self, "accuracies", acc)
        object.__setattr__(self, "_index", {mid: i for i, mid in enumerate(self.model_ids)})

    @property
    def n_models(self) -> int:
        return len(self.model_ids)

    @property
    def has_accuracies(self) -> bool:
        return self.accuracies is not None

    def index(self, model_id: str) -> int:
        try:
            return self._index[model_id]
        except KeyError:
            raise ValidationError(f"unknown model id {model_id!r}") from None

    def pairs(self) -> list[tuple[int, int]]:
        n = self.n_models
        return [(i, j) for i in range(n) for j in range(i + 1, n)]

    def pair_agreements(self) -> np.ndarray:
        """Agreements for unordered pairs ``i < j`` in row-major order."""
        iu, ju = np.triu_indices(self.n_models, k=1)
        return self.agreements[iu, ju]

    def probit_accuracies(self) -> np.ndarray:
        if self.accuracies is None:
            raise ValidationError(f"{self.split.value} table has no accuracies")
        return np.atleast_1d(probit(self.accuracies, self.sample_count))

    def probit_pair_agreements(self) -> np.ndarray:
        return np.atleast_1d(probit(self.pair_agreements(), self.sample_count))

    def subset(self, indices: Sequence[int]) -> "MetricTable":
        idx = np.asarray(indices, dtype=np.int64)
        return MetricTable(
            split=self.split,
            model_ids=tuple(self.model_ids[i] for i in idx),
            sample_count=self.sample_count,
            agreements=self.agreements[np.ix_(idx, idx)],
            accuracies=None if self.accuracies is None else self.accuracies[idx],
            synthetic=self.synthetic,
        )

    def without_accuracies(self) -> "MetricTable":
        return MetricTable(self.split, self.model_ids, self.sample_count, self.agreements, None, self.synthetic)

    def to_json(self) -> dict:
        out = {"split": self.split.value, "m": self.sample_count}
        if self.accuracies is not None:
            out["accuracies"] = {mid: float(v) for mid, v in zip(self.model_ids, self.accuracies)}
        out["agreements"] = [
            {"a": self.model_ids[i], "b": self.model_ids[j], "value": float(self.agreements[i, j])}
            for i, j in self.pairs()
        ]
        if self.synthetic:
            out["synthetic"] = True
        return out

    @classmethod
    def from_json(cls, doc: dict, model_ids: Sequence[str] | None = None) -> "MetricTable":
        if model_ids is None:
            ids: list[str] = list(doc.get("accuracies", {}))
            for entry in doc["agreements"]:
                for key in ("a", "b"):
                    if entry[key] not in ids:
                        ids.append(entry[key])
            model_ids = ids
        ids = list(model_ids)
        pos = {mid: i for i, mid in enumerate(ids)}
        agr = np.eye(len(ids))
        for entry in doc["agreements"]:
            i, j = pos[entry["a"]], pos[entry["b"]]
            agr[i, j] = agr[j, i] = entry["value"]
        acc = None
        if "accuracies" in doc:
            acc = np.array([doc["accuracies"][mid] for mid in ids], dtype=np.float64)
        return cls(Split(doc["split"]), tuple(ids), int(doc["m"]), agr, acc, bool(doc.get("synthetic", False)))


def agreement_matrix(predictions: np.ndarray) -> np.ndarray:
    """All-pairs agreement of an ``(n, m)`` prediction matrix."""
    preds = np.asarray(predictions)
    n, m = preds.shape
    if m == 0:
        raise ValidationError("empty prediction column")
    counts = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        counts[i, i + 1:] = np.count_nonzero(preds[i + 1:] == preds[i], axis=1)
    counts = counts + counts.T
    np.fill_diagonal(counts, m)
    return counts / m


def metric_table(models: ModelSet, labels=None, split: Split = Split.ID_VAL) -> MetricTable:
    """Compute accuracies (when labels are given) and all pairwise agreements on one split."""
    split = Split(split)
    preds = models.prediction_matrix(split)
    m = preds.shape[1]
    acc = None
    if labels is not None:
        y = np.asarray(getattr(labels, "labels", labels))
        if y.shape != (m,):
            raise ValidationError(f"{split.value} labels have {y.shape[0]} rows, predictions have {m}")
        acc = np.count_nonzero(preds == y[None, :], axis=1) / m
    return MetricTable(split, models.ids, m, agreement_matrix(preds), acc)


@dataclass(frozen=True)
class PairGap:
    a: str
    b: str
    id_gap: float
    ood_gap: float


def gap_table(id_metrics: MetricTable, ood_metrics: MetricTable) -> list[PairGap]:
    """Per pair, mean probit accuracy minus probit agreement on each split.

    When both splits lie on one probit line with slope ``a`` the OOD gap is
    ``a`` times the ID gap.
    """
    if id_metrics.model_ids != ood_metrics.model_ids:
        raise ValidationError("ID and OOD tables cover different model sets")
    for t in (id_metrics, ood_metrics):
        if not t.has_accuracies:
            raise ValidationError(f"{t.split.value} table has no accuracies")

    def gaps(t: MetricTable) -> np.ndarray:
        pa = t.probit_accuracies()
        iu, ju = np.triu_indices(t.n_models, k=1)
        return 0.5 * (pa[iu] + pa[ju]) - t.probit_pair_agreements()

    g_id, g_ood = gaps(id_metrics), gaps(ood_metrics)
    ids = id_metrics.model_ids
    return [PairGap(ids[i], ids[j], float(g_id[k]), float(g_ood[k]))
            for k, (i, j) in enumerate(id_metrics.pairs())]
