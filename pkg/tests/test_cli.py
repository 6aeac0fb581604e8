import json

import numpy as np
import pytest

from aline.bench import mae_percent
from aline.cli import main, read_scatter_csv
from aline.data import Split, load_manifest, write_dataset
from aline.linefit import agreement_line, agreement_points
from aline.metrics import MetricTable, metric_table
from aline.synth import ZooSpec, generate_zoo


def run(*argv):
    return main([str(a) for a in argv])


def report(path):
    doc = json.loads(open(path).read())
    assert set(doc) == {"tool_version", "command", "provenance", "payload"}
    return doc


@pytest.fixture(scope="module")
def zoo_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("zoo")
    assert run("synth", "--out", out, "--n-models", 8, "--m-id", 2000, "--m-ood", 2000,
               "--emit-logits", "--architectures", "a,b") == 0
    return out


@pytest.fixture(scope="module")
def exact_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("exact")
    assert run("synth", "--out", out, "--exact-line", "--slope", 0.857, "--bias", -0.205, "--n-models", 12) == 0
    return out


@pytest.fixture(scope="module")
def weak_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("weak")
    assert run("synth", "--out", out, "--break-line", "--n-models", 12, "--m-id", 3000, "--m-ood", 3000) == 0
    return out


def test_metrics_outputs_match_library(zoo_dir, tmp_path):
    assert run("metrics", "--manifest", zoo_dir / "manifest.json", "--out", tmp_path) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["accuracy_scatter.csv", "agreement_scatter.csv", "id_metrics.json", "ood_metrics.json"]
    models, id_l, ood_l = load_manifest(zoo_dir / "manifest.json")
    for fname, labels, split in (("id_metrics.json", id_l, Split.ID_VAL), ("ood_metrics.json", ood_l, Split.OOD)):
        table = MetricTable.from_json(report(tmp_path / fname)["payload"], models.ids)
        lib = metric_table(models, labels, split)
        assert np.array_equal(table.agreements, lib.agreements)
        assert np.array_equal(table.accuracies, lib.accuracies)
    xs, ys = read_scatter_csv(tmp_path / "agreement_scatter.csv")
    lib_x, lib_y = agreement_points(metric_table(models, id_l, Split.ID_VAL), metric_table(models, ood_l, Split.OOD))
    assert np.array_equal(xs, lib_x) and np.array_equal(ys, lib_y)


def test_metrics_without_ood_labels(tmp_path):
    models, id_l, _ = generate_zoo(ZooSpec(n_models=3, m_id=100, m_ood=100))
    manifest = write_dataset(tmp_path / "data", models, id_l, None)
    assert run("metrics", "--manifest", manifest, "--out", tmp_path / "o") == 0
    names = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert names == ["agreement_scatter.csv", "id_metrics.json", "ood_metrics.json"]
    assert "accuracies" not in report(tmp_path / "o" / "ood_metrics.json")["payload"]
    assert run("bench", "--manifest", manifest, "--out", tmp_path / "b.json") == 2


def test_diagnose_exact_and_zoo(exact_dir, zoo_dir, tmp_path):
    assert run("diagnose", "--manifest", exact_dir / "manifest.json", "--out", tmp_path / "d.json") == 0
    p = report(tmp_path / "d.json")["payload"]
    assert p["verdict"] == "STRONG" and p["agreement_line"]["r2"] == pytest.approx(1.0, abs=1e-12)
    assert p["agreement_line"]["slope"] == pytest.approx(0.857, abs=1e-9)
    assert p["slope_diff_ci"]["lower"] == pytest.approx(0, abs=1e-9)
    assert (tmp_path / "d.agreement_line.csv").exists()
    assert run("diagnose", "--manifest", zoo_dir / "manifest.json", "--out", tmp_path / "z.json",
               "--resamples", 200, "--subset-size", 5) == 0
    p = report(tmp_path / "z.json")["payload"]
    assert {"agreement_line", "accuracy_line", "gap_line", "slope_diff_ci", "verdict"} <= set(p)


def test_weak_line_refusal(weak_dir, tmp_path):
    manifest = weak_dir / "manifest.json"
    assert run("diagnose", "--manifest", manifest, "--out", tmp_path / "d.json") == 0
    assert report(tmp_path / "d.json")["payload"]["verdict"] == "WEAK"
    for method in ("aline-s", "aline-d"):
        out = tmp_path / f"{method}.json"
        assert run("predict", "--manifest", manifest, "--method", method, "--out", out) == 4
        assert not out.exists()
        assert run("predict", "--manifest", manifest, "--method", method, "--out", out, "--force") == 0
        assert report(out)["payload"]["diagnostics"]["verdict"] == "WEAK"
    # baselines never consult the verdict
    assert run("predict", "--manifest", manifest, "--method", "agreement", "--out", tmp_path / "g.json") == 0


def test_predict_exact_line_recovers_truth(exact_dir, tmp_path):
    manifest = exact_dir / "manifest.json"
    truth = MetricTable.from_json(json.loads((exact_dir / "ood_metrics.json").read_text()))
    for method in ("aline-d", "aline-s"):
        assert run("predict", "--manifest", manifest, "--method", method, "--out", tmp_path / "p.json") == 0
        est = report(tmp_path / "p.json")["payload"]["estimates"]
        assert max(abs(est[mid] - v) for mid, v in zip(truth.model_ids, truth.accuracies)) <= 1e-8


def test_predict_identity_line(tmp_path):
    assert run("synth", "--out", tmp_path / "id", "--exact-line", "--n-models", 5) == 0
    assert run("predict", "--manifest", tmp_path / "id" / "manifest.json", "--method", "aline-s",
               "--out", tmp_path / "p.json") == 0
    est = report(tmp_path / "p.json")["payload"]["estimates"]
    acc = json.loads((tmp_path / "id" / "id_metrics.json").read_text())["accuracies"]
    assert max(abs(est[k] - acc[k]) for k in acc) <= 1e-12


def test_predict_missing_logits(exact_dir, tmp_path):
    assert run("predict", "--manifest", exact_dir / "manifest.json", "--method", "atc", "--out", tmp_path / "a") == 2
    models, id_l, ood_l = generate_zoo(ZooSpec(n_models=3, m_id=50, m_ood=50))
    manifest = write_dataset(tmp_path / "nolog", models, id_l, ood_l)
    assert run("predict", "--manifest", manifest, "--method", "atc", "--out", tmp_path / "b") == 2


def test_predict_baselines(zoo_dir, tmp_path):
    for method in ("atc", "ac", "doc-feat"):
        out = tmp_path / f"{method}.json"
        assert run("predict", "--manifest", zoo_dir / "manifest.json", "--method", method, "--out", out) == 0
        diag = report(out)["payload"]["diagnostics"]
        assert diag["variant"] == "calibrated" and set(diag["variants"]) == {"calibrated", "uncalibrated"}
    assert run("predict", "--manifest", zoo_dir / "manifest.json", "--method", "ac", "--no-calibration",
               "--out", tmp_path / "n.json") == 0
    assert report(tmp_path / "n.json")["payload"]["diagnostics"]["variant"] == "uncalibrated"


def test_bench_report(zoo_dir, tmp_path):
    out = tmp_path / "b.json"
    assert run("bench", "--manifest", zoo_dir / "manifest.json", "--out", out) == 0
    p = report(out)["payload"]
    assert set(p["mae_percent"]) == {"aline-s", "aline-d", "atc", "ac", "doc-feat", "agreement"}
    assert set(p["selection"]) == {"atc", "ac", "doc-feat"}
    truth = p["truth"]
    for name, res in p["methods"].items():
        est = res["report"]["estimates"]
        loop = 100 * sum(abs(est[k] - truth[k]) for k in truth) / len(truth)
        assert res["mae_percent"] == pytest.approx(loop, abs=1e-12)
    rows = (tmp_path / "b.scatter.csv").read_text().splitlines()
    assert rows[0] == "method,model,estimate,truth" and len(rows) == 1 + 6 * 8


def test_bench_tables_manifest(exact_dir, tmp_path):
    assert run("bench", "--manifest", exact_dir / "manifest.json", "--out", tmp_path / "b.json") == 0
    mae = report(tmp_path / "b.json")["payload"]["mae_percent"]
    assert mae["aline-d"] <= 1e-6 and mae["aline-s"] <= 1e-6
    assert run("bench", "--manifest", exact_dir / "manifest.json", "--methods", "atc",
               "--out", tmp_path / "c.json") == 2


def test_mae_of_truth_is_zero():
    assert mae_percent([0.3, 0.8], [0.3, 0.8]) == 0.0


def test_ablate(zoo_dir, exact_dir, tmp_path):
    out = tmp_path / "a.json"
    assert run("ablate", "--manifest", zoo_dir / "manifest.json", "--sizes", "3,8", "--repeats", 1,
               "--group-by-architecture", "--out", out) == 0
    p = report(out)["payload"]
    full = next(r for r in p["sizes"] if r["size"] == 8)
    assert run("bench", "--manifest", zoo_dir / "manifest.json", "--methods", "aline-d",
               "--out", tmp_path / "b.json") == 0
    assert full["mae_percent"] == pytest.approx(report(tmp_path / "b.json")["payload"]["mae_percent"]["aline-d"],
                                                abs=1e-12)
    assert {r["architecture"] for r in p["architectures"]} == {"a", "b"}
    assert run("ablate", "--manifest", zoo_dir / "manifest.json", "--sizes", "2", "--out", out) == 2
    assert run("ablate", "--manifest", exact_dir / "manifest.json", "--sizes", "3,6,12", "--out", out) == 0
    assert all(r["mae_percent"] <= 1e-6 for r in report(out)["payload"]["sizes"])


def test_synth_exact_line_fit(exact_dir):
    id_t = MetricTable.from_json(json.loads((exact_dir / "id_metrics.json").read_text()))
    ood_t = MetricTable.from_json(json.loads((exact_dir / "ood_metrics.json").read_text()), id_t.model_ids)
    fit = agreement_line(id_t, ood_t)
    assert fit.slope == pytest.approx(0.857, abs=1e-9) and fit.bias == pytest.approx(-0.205, abs=1e-9)


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--n-models", 4, "--m-id", 300, "--m-ood", 300,
                   "--emit-logits", "--seed", 9) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_reports_are_byte_identical(zoo_dir, tmp_path):
    manifest = zoo_dir / "manifest.json"
    commands = [
        ("metrics", "--out", "{d}/m"),
        ("diagnose", "--out", "{d}/d.json", "--resamples", "100", "--subset-size", "4"),
        ("predict", "--method", "aline-d", "--out", "{d}/p.json"),
        ("predict", "--method", "atc", "--out", "{d}/q.json"),
        ("bench", "--out", "{d}/b.json"),
        ("ablate", "--sizes", "3,5", "--repeats", "3", "--out", "{d}/a.json"),
    ]
    for d in ("r1", "r2"):
        for cmd, *rest in commands:
            argv = [cmd, "--manifest", manifest, "--seed", 4] + [a.format(d=tmp_path / d) for a in rest]
            assert run(*argv) == 0
    assert _tree(tmp_path / "r1") == _tree(tmp_path / "r2")


def test_invalid_manifest_exit_code(tmp_path):
    assert run("metrics", "--manifest", tmp_path / "missing.json", "--out", tmp_path / "o") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    assert run("diagnose", "--manifest", bad, "--out", tmp_path / "o.json") == 2


def test_degenerate_exit_code(tmp_path):
    ids = ["a", "b", "c"]
    table = {"split": "id_val", "m": 100, "accuracies": {k: 0.7 for k in ids},
             "agreements": [{"a": x, "b": y, "value": 1.0} for i, x in enumerate(ids) for y in ids[i + 1:]]}
    (tmp_path / "id.json").write_text(json.dumps(table))
    (tmp_path / "ood.json").write_text(json.dumps({**table, "split": "ood"}))
    (tmp_path / "manifest.json").write_text(json.dumps({"tables": {"id_val": "id.json", "ood": "ood.json"}}))
    assert run("predict", "--manifest", tmp_path / "manifest.json", "--method", "aline-d",
               "--out", tmp_path / "p.json") == 3
