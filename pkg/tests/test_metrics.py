import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aline.data import Split
from aline.errors import ValidationError
from aline.metrics import (
    MetricTable,
    accuracy,
    agreement,
    clamp_proportion,
    gap_table,
    inverse_probit,
    metric_table,
    probit,
)
from aline.synth import ExactLineSpec, exact_line_tables, random_exact_line_spec

from conftest import random_model_set
from oracles import phi_series, quantile_bisect


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 0, 0, 0], [0, 1, 2, 3]) == 0.25


def test_agreement_examples(rng):
    h = rng.integers(0, 5, 30)
    assert agreement(h, h) == 1.0
    assert agreement([0, 1, 0, 1], [0, 1, 1, 0]) == 0.5


@pytest.mark.parametrize("fn", [accuracy, agreement])
def test_length_and_empty_errors(fn):
    with pytest.raises(ValidationError, match="length"):
        fn([0, 1], [0])
    with pytest.raises(ValidationError, match="empty"):
        fn([], [])


def _count(a, b):
    hits = 0
    for x, y in zip(a, b):
        if x == y:
            hits += 1
    return hits / len(a)


def test_counts_match_loop(rng):
    labels = rng.integers(0, 4, 1000)
    preds = rng.integers(0, 4, (5, 1000))
    for p in preds:
        assert accuracy(p, labels) == _count(p, labels)
    assert agreement(preds[0], preds[1]) == _count(preds[0], preds[1]) == agreement(preds[1], preds[0])


def test_accuracy_is_agreement_with_labels(rng):
    y, p = rng.integers(0, 3, 77), rng.integers(0, 3, 77)
    assert accuracy(p, y) == agreement(p, y)


def test_metric_table_sizes(rng):
    one, id_l, _ = random_model_set(rng, n=1)
    t = metric_table(one, id_l, Split.ID_VAL)
    assert t.accuracies.shape == (1,) and t.pairs() == []
    three, id_l, _ = random_model_set(rng, n=3)
    assert len(metric_table(three, id_l, Split.ID_VAL).pair_agreements()) == 3


def test_metric_table_matches_nested_loops(rng):
    models, id_l, ood_l = random_model_set(rng, n=10, m=300, k=3)
    for labels, split in ((id_l, Split.ID_VAL), (ood_l, Split.OOD)):
        t = metric_table(models, labels, split)
        preds = models.prediction_matrix(split)
        assert t.sample_count == 300
        for i in range(10):
            assert t.accuracies[i] == _count(preds[i], labels.labels)
            assert t.agreements[i, i] == 1.0
            for j in range(10):
                assert t.agreements[i, j] == _count(preds[i], preds[j])
        # every proportion is an exact count over m
        counts = t.agreements * 300
        assert np.array_equal(t.agreements, np.round(counts) / 300)


def test_metric_table_permutation(rng):
    models, id_l, _ = random_model_set(rng, n=6)
    perm = [3, 0, 5, 1, 4, 2]
    a = metric_table(models, id_l, Split.ID_VAL)
    b = metric_table(models.subset(perm), id_l, Split.ID_VAL)
    assert np.array_equal(b.agreements, a.agreements[np.ix_(perm, perm)])
    assert np.array_equal(b.accuracies, a.accuracies[perm])


def test_metric_table_without_labels(rng):
    models, _, _ = random_model_set(rng, n=4)
    t = metric_table(models, None, Split.OOD)
    assert not t.has_accuracies
    with pytest.raises(ValidationError):
        t.probit_accuracies()


def test_metric_table_json_round_trip(rng):
    models, id_l, _ = random_model_set(rng, n=5)
    t = metric_table(models, id_l, Split.ID_VAL)
    doc = json.loads(json.dumps(t.to_json()))
    assert set(doc) == {"split", "m", "accuracies", "agreements"}
    assert len(doc["agreements"]) == 10
    back = MetricTable.from_json(doc)
    assert back.model_ids == t.model_ids
    assert np.array_equal(back.agreements, t.agreements)
    assert np.array_equal(back.accuracies, t.accuracies)


def test_probit_examples():
    assert probit(0.5, 1) == 0.0
    assert probit(0.5, 10**6) == 0.0
    assert abs(probit(0.975, 10**6) - 1.959964) <= 1e-6
    assert abs(probit(1.0, 100) - 2.575829) <= 1e-6
    assert probit(0.0, 100) == -probit(1.0, 100)


def test_probit_matches_bisection_oracle():
    m = 10**6
    ps = np.concatenate([[0.5 / m, 1 - 0.5 / m, 1e-3, 0.02425, 0.97575, 0.5 + 1e-9],
                         np.linspace(0.5 / m, 1 - 0.5 / m, 150)])
    got = probit(ps, m)
    for p, z in zip(ps, got):
        assert abs(z - quantile_bisect(p)) <= 1e-9


def test_probit_rejects_out_of_range():
    for bad in (-0.1, 1.01, float("nan")):
        with pytest.raises(ValidationError):
            probit(bad, 10)


def test_clamp_bounds():
    assert clamp_proportion(0.0, 100) == 0.005
    assert clamp_proportion(1.0, 100) == 0.995
    assert clamp_proportion(0.3, 100) == 0.3


def test_inverse_probit_examples():
    assert inverse_probit(0.0) == 0.5
    assert abs(inverse_probit(1.959964) - 0.975) <= 1e-6
    for z in (-6.0, -1.959964, -0.3, 0.7, 1.959964, 4.5):
        assert abs(inverse_probit(z) - phi_series(z)) <= 1e-12
    with pytest.raises(ValidationError):
        inverse_probit(float("inf"))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10**7), st.floats(0.0, 1.0))
def test_round_trip_inside_clamp(m, u):
    lo = 0.5 / m
    p = lo + u * (1 - 2 * lo)
    assert abs(inverse_probit(probit(p, m)) - p) <= 1e-8


def test_probit_strictly_increasing():
    m = 10**5
    ps = np.linspace(0.5 / m, 1 - 0.5 / m, 20001)
    assert np.all(np.diff(probit(ps, m)) > 0)


def _tables(acc_id, agr_id, acc_ood, agr_ood, m=1000):
    ids = tuple(f"h{i}" for i in range(len(acc_id)))
    return (MetricTable(Split.ID_VAL, ids, m, agr_id, acc_id),
            MetricTable(Split.OOD, ids, m, agr_ood, acc_ood))


def test_gap_zero_when_agreement_matches_accuracy():
    agr = np.array([[1.0, 0.8], [0.8, 1.0]])
    id_t, ood_t = _tables([0.8, 0.8], agr, [0.8, 0.8], agr)
    (g,) = gap_table(id_t, ood_t)
    assert (g.a, g.b) == ("h0", "h1")
    assert g.id_gap == pytest.approx(0.0, abs=1e-15) and g.ood_gap == pytest.approx(0.0, abs=1e-15)


def test_gap_scales_with_slope_on_exact_line():
    spec = random_exact_line_spec(12, 0.857, -0.205, seed=3)
    for g in gap_table(*exact_line_tables(spec)):
        assert abs(g.ood_gap - 0.857 * g.id_gap) <= 1e-9


def test_gap_matches_direct_formula(rng):
    models, id_l, ood_l = random_model_set(rng, n=5, m=400, k=3)
    id_t = metric_table(models, id_l, Split.ID_VAL)
    ood_t = metric_table(models, ood_l, Split.OOD)
    gaps = gap_table(id_t, ood_t)
    pos = 0
    for i in range(5):
        for j in range(i + 1, 5):
            for t, got in ((id_t, gaps[pos].id_gap), (ood_t, gaps[pos].ood_gap)):
                want = (quantile_bisect(t.accuracies[i]) + quantile_bisect(t.accuracies[j])) / 2 \
                    - quantile_bisect(t.agreements[i, j])
                assert abs(got - want) <= 1e-9
            pos += 1


def test_gap_needs_accuracies(rng):
    models, id_l, _ = random_model_set(rng, n=3)
    with pytest.raises(ValidationError):
        gap_table(metric_table(models, id_l, Split.ID_VAL), metric_table(models, None, Split.OOD))


def test_exact_line_identity_slope():
    spec = ExactLineSpec(1.0, 0.0, [0.6, 0.7, 0.9], [0.8, 0.65, 0.75])
    id_t, ood_t = exact_line_tables(spec)
    assert np.allclose(ood_t.accuracies, id_t.accuracies, atol=1e-15)
    assert np.allclose(ood_t.agreements, id_t.agreements, atol=1e-15)
    assert id_t.synthetic and ood_t.synthetic
