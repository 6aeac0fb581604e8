"""Command line interface: ``aline {metrics,diagnose,predict,bench,ablate,synth}``.

Every report is JSON shaped ``{tool_version, command, provenance, payload}``.
Exit codes: 0 success, 2 invalid input, 3 degenerate computation,
4 ALine prediction refused because the agreement line is weak.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .bench import ALL_METHODS, LOGIT_METHODS, ablate_architectures, ablate_sizes, run_bench, run_bench_tables
from .data import LabeledSplit, Manifest, ModelSet, Split, load_manifest, write_dataset
from .errors import DegenerateError, ValidationError
from .estimators import Method, aline_d, aline_s, confidence_baselines, naive_agreement
from .linefit import (
    Verdict,
    accuracy_line,
    accuracy_points,
    agreement_line,
    agreement_points,
    diagnose,
    ols_fit,
    slope_diff_ci_tables,
)
from .metrics import MetricTable, gap_table, metric_table
from .synth import ZooSpec, break_line_spec, exact_line_tables, generate_zoo, random_exact_line_spec

log = logging.getLogger("aline")

EXIT_OK, EXIT_INVALID, EXIT_DEGENERATE, EXIT_REFUSED = 0, 2, 3, 4


class Refused(Exception):
    pass


# --------------------------------------------------------------------------
# output helpers


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def envelope(command: str, provenance: dict, payload: Any) -> str:
    doc = {"tool_version": __version__, "command": command, "provenance": provenance, "payload": payload}
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def scatter_csv(xs, ys) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y"])
    for x, y in zip(xs, ys):
        w.writerow([repr(float(x)), repr(float(y))])
    return buf.getvalue()


def read_scatter_csv(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["x"]) for r in rows]), np.array([float(r["y"]) for r in rows])


def line_endpoints_csv(fit, xs) -> str:
    lo, hi = float(np.min(xs)), float(np.max(xs))
    return scatter_csv([lo, hi], [fit.slope * lo + fit.bias, fit.slope * hi + fit.bias])


# --------------------------------------------------------------------------
# inputs


@dataclass
class Inputs:
    """Everything a command may need, loaded from one manifest."""

    manifest: Path
    digest: str
    id_table: MetricTable
    ood_table: MetricTable  # carries OOD accuracies when truth is available
    models: ModelSet | None = None
    id_labels: LabeledSplit | None = None
    ood_labels: LabeledSplit | None = None
    metadata: dict | None = None

    @property
    def has_ood_truth(self) -> bool:
        return self.ood_table.has_accuracies

    def architectures(self) -> dict[str, str]:
        if self.models is not None:
            return {r.id: r.architecture for r in self.models if r.architecture is not None}
        return dict((self.metadata or {}).get("architectures") or {})


def load_inputs(path: str | os.PathLike) -> Inputs:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing manifest {str(path)!r}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest is not valid JSON: {exc}") from None
    if isinstance(doc, dict) and "tables" in doc:
        return _load_table_manifest(path, doc)
    models, id_labels, ood_labels = load_manifest(path)
    digest = Manifest.read(path).digest()
    id_t = metric_table(models, id_labels, Split.ID_VAL)
    ood_t = metric_table(models, ood_labels, Split.OOD)
    return Inputs(path, digest, id_t, ood_t, models, id_labels, ood_labels, dict(models.metadata))


def _load_table_manifest(path: Path, doc: dict) -> Inputs:
    tables = doc["tables"]
    h = hashlib.sha256(path.read_bytes())
    loaded = {}
    for key in ("id_val", "ood"):
        if key not in tables:
            raise ValidationError(f"table manifest lacks {key!r}")
        p = path.parent / tables[key]
        if not p.is_file():
            raise ValidationError(f"missing file {str(p)!r}")
        raw = p.read_bytes()
        h.update(raw)
        loaded[key] = json.loads(raw)
    id_t = MetricTable.from_json(loaded["id_val"])
    ood_t = MetricTable.from_json(loaded["ood"], id_t.model_ids)
    if not id_t.has_accuracies:
        raise ValidationError("ID metric table has no accuracies")
    return Inputs(path, h.hexdigest(), id_t, ood_t, metadata=dict(doc.get("metadata") or {}))


def _provenance(inputs: Inputs | None, args: argparse.Namespace, **extra) -> dict:
    prov: dict[str, Any] = {"tool_version": __version__}
    if inputs is not None:
        prov["manifest"] = str(inputs.manifest)
        prov["manifest_digest"] = inputs.digest
    prov["seed"] = args.seed
    prov.update(extra)
    return prov


# --------------------------------------------------------------------------
# commands


def cmd_metrics(args) -> int:
    inp = load_inputs(args.manifest)
    out = Path(args.out)
    prov = _provenance(inp, args)
    write_atomic(out / "id_metrics.json", envelope("metrics", prov, inp.id_table.to_json()))
    write_atomic(out / "ood_metrics.json", envelope("metrics", prov, inp.ood_table.to_json()))
    if inp.id_table.n_models >= 2:
        write_atomic(out / "agreement_scatter.csv", scatter_csv(*agreement_points(inp.id_table, inp.ood_table)))
    if inp.has_ood_truth:
        write_atomic(out / "accuracy_scatter.csv", scatter_csv(*accuracy_points(inp.id_table, inp.ood_table)))
    return EXIT_OK


def diagnosis_payload(inp: Inputs, *, seed: int, subset_size: int, resamples: int) -> dict:
    fit = agreement_line(inp.id_table, inp.ood_table)
    payload: dict[str, Any] = {"agreement_line": fit.to_json(), "verdict": diagnose(fit).value}
    if inp.has_ood_truth:
        payload["accuracy_line"] = accuracy_line(inp.id_table, inp.ood_table).to_json()
        gaps = gap_table(inp.id_table, inp.ood_table)
        try:
            gfit = ols_fit([g.id_gap for g in gaps], [g.ood_gap for g in gaps])
            payload["gap_line"] = gfit.to_json()
        except DegenerateError as exc:
            payload["gap_line"] = {"error": str(exc)}
        n = inp.id_table.n_models
        size = min(subset_size, n)
        if size >= 3:
            try:
                payload["slope_diff_ci"] = slope_diff_ci_tables(
                    inp.id_table, inp.ood_table, subset_size=size, n_resamples=resamples, seed=seed).to_json()
            except DegenerateError as exc:
                payload["slope_diff_ci"] = {"error": str(exc)}
    return payload


def cmd_diagnose(args) -> int:
    inp = load_inputs(args.manifest)
    payload = diagnosis_payload(inp, seed=args.seed, subset_size=args.subset_size, resamples=args.resamples)
    out = Path(args.out)
    write_atomic(out, envelope("diagnose", _provenance(inp, args, subset_size=args.subset_size,
                                                         resamples=args.resamples), payload))
    fit = agreement_line(inp.id_table, inp.ood_table)
    pts = agreement_points(inp.id_table, inp.ood_table)
    write_atomic(out.with_suffix(".agreement_line.csv"), line_endpoints_csv(fit, pts[0]))
    return EXIT_OK


def predict_payload(inp: Inputs, method: str, *, force: bool, calibrate: bool) -> tuple[dict, int]:
    method = Method(method).value
    ood_unlabeled = inp.ood_table.without_accuracies()
    if method in (Method.ALINE_S.value, Method.ALINE_D.value):
        fit = agreement_line(inp.id_table, ood_unlabeled)
        verdict = diagnose(fit)
        if verdict is Verdict.WEAK and not force:
            raise Refused(f"agreement line is weak (R^2 = {fit.r_squared:.3f}); pass --force to predict anyway")
        est = aline_s if method == Method.ALINE_S.value else aline_d
        rep = est(inp.id_table, ood_unlabeled, fit)
        rep.diagnostics["verdict"] = verdict.value
        return rep.to_json(), EXIT_OK
    if method == Method.AGREEMENT.value:
        _, rep = naive_agreement(ood_unlabeled)
        return rep.to_json(), EXIT_OK
    if inp.models is None:
        raise ValidationError("missing logits: this manifest carries only metric tables")
    if not inp.models.has_logits:
        raise ValidationError("missing logits", model_id=next(r.id for r in inp.models if not r.has_logits))
    variants = confidence_baselines(inp.models, inp.id_labels, inp.id_table, calibrate=calibrate)[method]
    primary = "calibrated" if calibrate else "uncalibrated"
    out = variants[primary].to_json()
    out["diagnostics"]["variant"] = primary
    out["diagnostics"]["variants"] = {k: v.as_dict() for k, v in variants.items()}
    return out, EXIT_OK


def cmd_predict(args) -> int:
    inp = load_inputs(args.manifest)
    payload, code = predict_payload(inp, args.method, force=args.force, calibrate=not args.no_calibration)
    write_atomic(args.out, envelope("predict", _provenance(inp, args, method=args.method, force=args.force,
                                                           calibration=not args.no_calibration), payload))
    return code


def _methods_arg(raw: str | None, inp: Inputs) -> list[str]:
    if raw:
        return [Method(m.strip()).value for m in raw.split(",") if m.strip()]
    if inp.models is not None and inp.models.has_logits:
        return list(ALL_METHODS)
    return [m for m in ALL_METHODS if m not in LOGIT_METHODS]


def cmd_bench(args) -> int:
    inp = load_inputs(args.manifest)
    if not inp.has_ood_truth:
        raise ValidationError("benchmarking needs OOD labels")
    methods = _methods_arg(args.methods or args.method, inp)
    if inp.models is None:
        if any(m in LOGIT_METHODS for m in methods):
            raise ValidationError("missing logits: this manifest carries only metric tables")
        res = run_bench_tables(inp.id_table, inp.ood_table, methods)
    else:
        res = run_bench(inp.models, inp.id_labels, inp.ood_labels, methods, calibrate=not args.no_calibration,
                        id_metrics=inp.id_table, ood_metrics=inp.ood_table)
    fit = agreement_line(inp.id_table, inp.ood_table)
    payload = {
        "mae_percent": {k: v.mae for k, v in res.methods.items()},
        "selection": {k: v.variant for k, v in res.methods.items() if v.variant is not None},
        "diagnosis": {"agreement_line": fit.to_json(), "verdict": diagnose(fit).value},
        **res.to_json(),
    }
    out = Path(args.out)
    write_atomic(out, envelope("bench", _provenance(inp, args, methods=methods,
                                                     calibration=not args.no_calibration), payload))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "model", "estimate", "truth"])
    for method, mid, est, truth in res.scatter_rows():
        w.writerow([method, mid, repr(est), repr(truth)])
    write_atomic(out.with_suffix(".scatter.csv"), buf.getvalue())
    return EXIT_OK


def _int_list(raw: str) -> list[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"cannot parse size list {raw!r}") from None


def cmd_ablate(args) -> int:
    inp = load_inputs(args.manifest)
    if not inp.has_ood_truth:
        raise ValidationError("ablation needs OOD labels")
    sizes = _int_list(args.sizes) if args.sizes else list(range(3, inp.id_table.n_models + 1, 5))
    payload: dict[str, Any] = {"sizes": ablate_sizes(inp.id_table, inp.ood_table, sizes, args.repeats, args.seed)}
    if args.group_by_architecture:
        archs = inp.architectures()
        if not archs:
            raise ValidationError("--group-by-architecture needs architecture tags in the manifest")
        payload["architectures"] = ablate_architectures(inp.id_table, inp.ood_table, archs, args.repeats, args.seed)
    write_atomic(args.out, envelope("ablate", _provenance(inp, args, sizes=sizes, repeats=args.repeats,
                                                          group_by_architecture=args.group_by_architecture),
                                    payload))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.exact_line:
        spec = random_exact_line_spec(args.n_models, args.slope, args.bias, seed=args.seed)
        id_t, ood_t = exact_line_tables(spec)
        prov = {"tool_version": __version__, "seed": args.seed, "generator": "exact-line",
                "slope": args.slope, "bias": args.bias, "n_models": args.n_models}
        write_atomic(out / "id_metrics.json", json.dumps(id_t.to_json(), indent=2) + "\n")
        write_atomic(out / "ood_metrics.json", json.dumps(ood_t.to_json(), indent=2) + "\n")
        manifest = {"tables": {"id_val": "id_metrics.json", "ood": "ood_metrics.json"}, "metadata": prov}
        write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return EXIT_OK

    base = break_line_spec() if args.break_line else ZooSpec()
    overrides = {k: v for k, v in {
        "n_models": args.n_models, "m_id": args.m_id, "m_ood": args.m_ood, "class_count": args.classes,
        "skill_low": args.skill_low, "skill_high": args.skill_high, "difficulty_shift": args.shift,
        "difficulty_scale": args.scale, "coupling": args.coupling, "ood_noise_max": args.ood_noise,
    }.items() if v is not None}
    overrides["seed"] = args.seed
    if args.architectures:
        overrides["architectures"] = tuple(a.strip() for a in args.architectures.split(",") if a.strip())
    spec = replace(base, **overrides)
    models, id_l, ood_l = generate_zoo(spec, with_logits=args.emit_logits)
    meta = dict(models.metadata)
    meta["spec"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.__dict__.items()}
    write_dataset(out, models, id_l, ood_l, metadata=meta, write_logits=args.emit_logits)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every stochastic step (default: 0)")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    with_manifest = argparse.ArgumentParser(add_help=False, parents=[common])
    with_manifest.add_argument("--manifest", required=True, help="path to manifest.json")

    p = argparse.ArgumentParser(prog="aline", description="Estimate OOD accuracy from agreement-on-the-line.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("metrics", parents=[with_manifest], help="accuracy/agreement tables and scatter data")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("diagnose", parents=[with_manifest], help="fit the agreement line and classify it")
    sp.add_argument("--subset-size", type=int, default=10)
    sp.add_argument("--resamples", type=int, default=1000)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("predict", parents=[with_manifest], help="estimate OOD accuracy with one method")
    sp.add_argument("--method", required=True, choices=ALL_METHODS)
    sp.add_argument("--force", action="store_true", help="predict with ALine even when the line is weak")
    sp.add_argument("--no-calibration", action="store_true", help="skip temperature scaling")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("bench", parents=[with_manifest], help="score methods against OOD labels (MAE, %)")
    sp.add_argument("--methods", help="comma separated subset of: " + ",".join(ALL_METHODS))
    sp.add_argument("--method", choices=ALL_METHODS, help="single method (alias of --methods)")
    sp.add_argument("--no-calibration", action="store_true")
    sp.add_argument("--force", action="store_true", help="accepted for symmetry; bench never refuses")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("ablate", parents=[with_manifest], help="ALine-D MAE over random model subsets")
    sp.add_argument("--sizes", help="comma separated subset sizes (default 3, 8, 13, ...)")
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--group-by-architecture", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth", parents=[common], help="write a synthetic manifest")
    sp.add_argument("--n-models", type=int)
    sp.add_argument("--m-id", type=int)
    sp.add_argument("--m-ood", type=int)
    sp.add_argument("--classes", type=int)
    sp.add_argument("--skill-low", type=float)
    sp.add_argument("--skill-high", type=float)
    sp.add_argument("--shift", type=float, help="OOD difficulty shift")
    sp.add_argument("--scale", type=float, help="OOD difficulty scale")
    sp.add_argument("--coupling", type=float, help="weight of the shared per-example noise, in [0, 1]")
    sp.add_argument("--ood-noise", type=float, help="max per-model OOD corruption rate")
    sp.add_argument("--architectures", help="comma separated tags assigned round-robin to models")
    sp.add_argument("--emit-logits", action="store_true")
    sp.add_argument("--break-line", action="store_true", help="preset that destroys the agreement line")
    sp.add_argument("--exact-line", action="store_true", help="write metric tables exactly on one probit line")
    sp.add_argument("--slope", type=float, default=1.0)
    sp.add_argument("--bias", type=float, default=0.0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth" and args.exact_line and args.n_models is None:
        args.n_models = 10
    try:
        return args.func(args)
    except Refused as exc:
        log.warning("%s", exc)
        return EXIT_REFUSED
    except ValidationError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID
    except DegenerateError as exc:
        log.error("degenerate computation: %s", exc)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
