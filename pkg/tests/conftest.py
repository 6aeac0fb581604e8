import numpy as np
import pytest

from aline.data import Split, make_record, ModelSet, make_split
from aline.metrics import metric_table
from aline.synth import ZooSpec, generate_zoo


@pytest.fixture(scope="session")
def default_zoo():
    """The seed-pinned default zoo with logits, plus its metric tables."""
    models, id_l, ood_l = generate_zoo(ZooSpec(), with_logits=True)
    return models, id_l, ood_l, metric_table(models, id_l, Split.ID_VAL), metric_table(models, ood_l, Split.OOD)


@pytest.fixture(scope="session")
def small_zoo():
    spec = ZooSpec(n_models=8, m_id=2000, m_ood=2000, architectures=("a", "b"))
    return generate_zoo(spec, with_logits=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model_set(rng, n=5, m=200, k=4, with_logits=False):
    labels_id = rng.integers(0, k, m)
    labels_ood = rng.integers(0, k, m)
    recs = []
    for i in range(n):
        if with_logits:
            zi, zo = rng.normal(size=(m, k)), rng.normal(size=(m, k))
            recs.append(make_record(f"h{i}", zi.argmax(1), zo.argmax(1), zi, zo))
        else:
            recs.append(make_record(f"h{i}", rng.integers(0, k, m), rng.integers(0, k, m)))
    return ModelSet(tuple(recs), k), make_split(labels_id, Split.ID_VAL), make_split(labels_ood, Split.OOD)


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


class Criterion:
    """Collects named checks for one acceptance criterion and records PASS/FAIL on exit."""

    def __init__(self, store, number, title):
        self.store, self.number, self.title = store, number, title
        self.failed, self.notes = [], []

    def check(self, name, ok, detail=""):
        (self.notes if ok else self.failed).append(f"{name} ({detail})" if detail else name)
        return ok

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.failed.append(f"raised {exc_type.__name__}: {exc}")
        status = "FAIL" if self.failed else "PASS"
        detail = "; ".join(self.failed if self.failed else self.notes)
        line = f"criterion {self.number} {status}: {self.title} -- {detail}"
        self.store[self.number] = line
        print(line)
        if exc is None and self.failed:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion(request):
    store = request.config.stash[_CRITERIA]
    return lambda number, title: Criterion(store, number, title)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
