"""Synthetic inputs: exact probit-line tables and a latent-skill model zoo.

Zoo generative model
--------------------
Every example has a latent difficulty ``d`` (standard normal in-distribution,
``scale * d' + shift`` out of distribution) and a shared noise draw ``eta``.
Model ``h`` with skill ``s_h`` is correct on ``x`` when

    s_h - d_x + sqrt(coupling) * eta_x + sqrt(1 - coupling) * xi_{h,x} > 0

and otherwise guesses uniformly among all ``K`` classes, so a failed model is
still right one time in ``K`` and its wrong outputs are uniform over the
``K - 1`` other classes.  The shared ``eta`` correlates the errors of
different models.

Guessing over all classes makes accuracy and agreement the same affine
function ``1/K + (1 - 1/K) t`` of their latent counterparts, which keeps the
two probit trends parallel at small ``K``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import LabeledSplit, ModelSet, Split, make_record, make_split
from .errors import ValidationError
from .metrics import MetricTable, inverse_probit, probit


@dataclass(frozen=True)
class ExactLineSpec:
    slope: float
    bias: float
    id_accuracies: Sequence[float]
    id_agreements: np.ndarray  # (n, n) symmetric, or the n(n-1)/2 upper-triangle values
    sample_count: int = 1_000_000
    model_ids: Sequence[str] | None = None


def _upper_to_matrix(values, n: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape == (n, n):
        return values
    iu, ju = np.triu_indices(n, k=1)
    if values.shape != (len(iu),):
        raise ValidationError(f"expected {len(iu)} pair agreements or an ({n}, {n}) matrix, got {values.shape}")
    out = np.eye(n)
    out[iu, ju] = out[ju, iu] = values
    return out


def exact_line_tables(spec: ExactLineSpec) -> tuple[MetricTable, MetricTable]:
    """ID/OOD tables whose probit accuracies and agreements lie exactly on one line."""
    acc = np.asarray(spec.id_accuracies, dtype=np.float64)
    n = acc.size
    agr = _upper_to_matrix(spec.id_agreements, n)
    m = spec.sample_count
    lo, hi = 0.5 / m, 1.0 - 0.5 / m
    ids = tuple(spec.model_ids) if spec.model_ids is not None else tuple(f"m{i:03d}" for i in range(n))

    iu, ju = np.triu_indices(n, k=1)
    inputs = np.concatenate([acc, agr[iu, ju]])
    if np.any((inputs <= lo) | (inputs >= hi)):
        raise ValidationError("ID proportions must lie strictly inside the clamp range")

    def push(p):
        return np.asarray(inverse_probit(spec.slope * np.asarray(probit(p, m)) + spec.bias))

    ood_acc = push(acc)
    ood_agr = np.eye(n)
    ood_agr[iu, ju] = ood_agr[ju, iu] = push(agr[iu, ju])
    outputs = np.concatenate([ood_acc, ood_agr[iu, ju]])
    if np.any((outputs <= lo) | (outputs >= hi)):
        raise ValidationError("derived OOD proportion falls outside the clamp range")

    id_t = MetricTable(Split.ID_VAL, ids, m, agr, acc, synthetic=True)
    ood_t = MetricTable(Split.OOD, ids, m, ood_agr, ood_acc, synthetic=True)
    return id_t, ood_t


def random_exact_line_spec(n: int, slope: float, bias: float, seed: int = 0,
                           sample_count: int = 1_000_000) -> ExactLineSpec:
    """Random ID accuracies in [0.55, 0.95] and agreements in [0.5, 0.97]."""
    rng = np.random.default_rng(seed)
    acc = rng.uniform(0.55, 0.95, size=n)
    agr = rng.uniform(0.5, 0.97, size=n * (n - 1) // 2)
    return ExactLineSpec(slope, bias, acc, agr, sample_count)


# --------------------------------------------------------------------------
# model zoo


@dataclass(frozen=True)
class ZooSpec:
    n_models: int = 50
    m_id: int = 20_000
    m_ood: int = 20_000
    class_count: int = 10
    skill_low: float = -0.5
    skill_high: float = 2.5
    difficulty_shift: float = 0.8
    difficulty_scale: float = 1.0
    coupling: float = 1.0
    seed: int = 0
    # line-breaking preset: each model gets its own OOD corruption rate in [0, ood_noise_max]
    ood_noise_max: float = 0.0
    logit_scale: float = 2.0
    architectures: Sequence[str] = field(default_factory=tuple)

    def validate(self) -> None:
        if self.n_models < 3:
            raise ValidationError(f"n_models must be >= 3, got {self.n_models}")
        if self.m_id < 1 or self.m_ood < 1:
            raise ValidationError("m_id and m_ood must be >= 1")
        if self.class_count < 2:
            raise ValidationError("class_count must be >= 2")
        if not self.difficulty_scale > 0:
            raise ValidationError("difficulty_scale must be positive")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValidationError("coupling must lie in [0, 1]")
        if not 0.0 <= self.ood_noise_max <= 1.0:
            raise ValidationError("ood_noise_max must lie in [0, 1]")
        if self.skill_low > self.skill_high:
            raise ValidationError("skill_low exceeds skill_high")

    def skills(self) -> np.ndarray:
        return np.linspace(self.skill_low, self.skill_high, self.n_models)


def break_line_spec(**overrides) -> ZooSpec:
    """Preset whose OOD behaviour is model-specific noise, destroying the probit line."""
    base = ZooSpec(coupling=0.0, ood_noise_max=0.9, seed=7)
    return replace(base, **overrides)


_ID_STREAM, _OOD_STREAM = 0, 1


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), *key]))


@dataclass(frozen=True)
class _SplitLatents:
    labels: np.ndarray
    difficulty: np.ndarray
    shared: np.ndarray


def _latents(spec: ZooSpec, tag: int, m: int) -> _SplitLatents:
    rng = _stream(spec.seed, tag, 0)
    labels = rng.integers(0, spec.class_count, size=m)
    d = rng.standard_normal(m)
    if tag == _OOD_STREAM:
        d = spec.difficulty_scale * d + spec.difficulty_shift
    return _SplitLatents(labels, d, rng.standard_normal(m))


def _model_split(spec: ZooSpec, lat: _SplitLatents, tag: int, model: int, skill: float,
                 noise_rate: float, with_logits: bool):
    rng = _stream(spec.seed, tag, model + 1)
    m = lat.labels.size
    k = spec.class_count
    margin = (skill - lat.difficulty + np.sqrt(spec.coupling) * lat.shared
              + np.sqrt(1.0 - spec.coupling) * rng.standard_normal(m))
    guess = rng.integers(0, k, size=m)
    preds = np.where(margin > 0, lat.labels, guess)
    if noise_rate > 0:
        flip = rng.random(m) < noise_rate
        preds = np.where(flip, rng.integers(0, k, size=m), preds)
    logits = None
    if with_logits:
        # predicted class sits above K - 1 tied runner-ups; the gap grows with the latent
        # margin (softplus keeps it positive, so confidence is monotone in the margin)
        logits = np.zeros((m, k))
        logits[np.arange(m), preds] = 0.1 + np.logaddexp(0.0, spec.logit_scale * margin)
    return preds, logits


def generate_zoo(spec: ZooSpec = ZooSpec(), *, with_logits: bool = False
                 ) -> tuple[ModelSet, LabeledSplit, LabeledSplit]:
    """Sample a model set plus ID and OOD labels; deterministic in ``spec.seed``."""
    spec.validate()
    lat_id = _latents(spec, _ID_STREAM, spec.m_id)
    lat_ood = _latents(spec, _OOD_STREAM, spec.m_ood)
    noise = _stream(spec.seed, 2, 0).uniform(0.0, spec.ood_noise_max, size=spec.n_models)
    archs = list(spec.architectures)
    records = []
    for i, s in enumerate(spec.skills()):
        p_id, z_id = _model_split(spec, lat_id, _ID_STREAM, i, s, 0.0, with_logits)
        p_ood, z_ood = _model_split(spec, lat_ood, _OOD_STREAM, i, s, float(noise[i]), with_logits)
        arch = archs[i % len(archs)] if archs else None
        records.append(make_record(f"model_{i:03d}", p_id, p_ood, z_id, z_ood, architecture=arch))
    meta = {"generator": "zoo", "seed": spec.seed}
    if archs:
        meta["architectures"] = {r.id: r.architecture for r in records}
    models = ModelSet(tuple(records), spec.class_count, meta)
    return models, make_split(lat_id.labels, Split.ID_VAL), make_split(lat_ood.labels, Split.OOD)

