"""Prediction, logit and label tables plus manifest ingestion.

Rows are aligned positionally: row ``i`` of every file for a split refers
to the same example.  Loading is all-or-nothing; a manifest either yields
a fully validated :class:`ModelSet` or raises :class:`ValidationError`.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ValidationError


class Split(str, enum.Enum):
    ID_VAL = "id_val"
    OOD = "ood"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def derive_predictions_from_logits(logits: np.ndarray, *, model_id: str | None = None) -> np.ndarray:
    """Row-wise argmax of a logit block; ties go to the lowest class index."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise ValidationError(f"logit block must be 2-D with K >= 1 columns, got shape {logits.shape}",
                              model_id=model_id)
    bad = ~np.isfinite(logits)
    if bad.any():
        row = int(np.argwhere(bad)[0, 0])
        raise ValidationError("non-finite logit entry", model_id=model_id, row=row)
    # np.argmax returns the first maximal index, which is the low-index tie rule.
    return np.argmax(logits, axis=1).astype(np.int64)


@dataclass(frozen=True)
class ModelRecord:
    id: str
    id_val_predictions: np.ndarray
    ood_predictions: np.ndarray
    id_val_logits: np.ndarray | None = None
    ood_logits: np.ndarray | None = None
    architecture: str | None = None

    def predictions(self, split: Split) -> np.ndarray:
        return self.id_val_predictions if Split(split) is Split.ID_VAL else self.ood_predictions

    def logits(self, split: Split) -> np.ndarray | None:
        return self.id_val_logits if Split(split) is Split.ID_VAL else self.ood_logits

    @property
    def has_logits(self) -> bool:
        return self.id_val_logits is not None and self.ood_logits is not None


@dataclass(frozen=True)
class LabeledSplit:
    labels: np.ndarray
    split: Split

    def __post_init__(self) -> None:
        if len(self.labels) == 0:
            raise ValidationError(f"{self.split.value} label column is empty")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ModelSet:
    """Ordered, immutable collection of models sharing one class count."""

    models: tuple[ModelRecord, ...]
    class_count: int
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "models", tuple(self.models))
        validate_model_set(self.models, self.class_count)

    def __len__(self) -> int:
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(m.id for m in self.models)

    def index(self, model_id: str) -> int:
        for i, m in enumerate(self.models):
            if m.id == model_id:
                return i
        raise KeyError(model_id)

    def sample_count(self, split: Split) -> int:
        return len(self.models[0].predictions(split))

    def prediction_matrix(self, split: Split) -> np.ndarray:
        """Stack predictions into an ``(n_models, m)`` integer array."""
        return np.stack([m.predictions(split) for m in self.models])

    def subset(self, indices: Sequence[int]) -> "ModelSet":
        return ModelSet(tuple(self.models[i] for i in indices), self.class_count, self.metadata)

    def canonical(self) -> "ModelSet":
        """Same models in lexicographic id order."""
        order = sorted(range(len(self.models)), key=lambda i: self.models[i].id)
        return self.subset(order)

    @property
    def has_logits(self) -> bool:
        return all(m.has_logits for m in self.models)


def validate_model_set(models: Sequence[ModelRecord], class_count: int) -> None:
    if class_count < 1:
        raise ValidationError(f"class_count must be positive, got {class_count}")
    if not models:
        raise ValidationError("model set is empty")
    seen: set[str] = set()
    lengths: dict[Split, int] = {}
    for rec in models:
        if rec.id in seen:
            raise ValidationError("duplicate model id", model_id=rec.id)
        seen.add(rec.id)
        for split in Split:
            preds = rec.predictions(split)
            if preds.ndim != 1:
                raise ValidationError(f"{split.value} predictions must be 1-D", model_id=rec.id)
            if split not in lengths:
                lengths[split] = len(preds)
                if lengths[split] == 0:
                    raise ValidationError(f"{split.value} predictions are empty", model_id=rec.id)
            elif len(preds) != lengths[split]:
                raise ValidationError(
                    f"{split.value} length {len(preds)} differs from {lengths[split]} of earlier models",
                    model_id=rec.id)
            out = np.flatnonzero((preds < 0) | (preds >= class_count))
            if out.size:
                raise ValidationError(f"{split.value} prediction {int(preds[out[0]])} outside [0, {class_count})",
                                      model_id=rec.id, row=int(out[0]))
            logits = rec.logits(split)
            if logits is None:
                continue
            if logits.ndim != 2 or logits.shape[0] != len(preds):
                raise ValidationError(
                    f"{split.value} logit rows {logits.shape[0] if logits.ndim else 0} != prediction rows {len(preds)}",
                    model_id=rec.id)
            if logits.shape[1] != class_count:
                raise ValidationError(f"{split.value} logits have {logits.shape[1]} columns, expected {class_count}",
                                      model_id=rec.id)
            derived = derive_predictions_from_logits(logits, model_id=rec.id)
            mismatch = np.flatnonzero(derived != preds)
            if mismatch.size:
                r = int(mismatch[0])
                raise ValidationError(
                    f"{split.value} logit argmax {int(derived[r])} disagrees with stored prediction {int(preds[r])}",
                    model_id=rec.id, row=r)


def make_record(model_id: str, id_val_predictions, ood_predictions, id_val_logits=None, ood_logits=None,
                architecture: str | None = None) -> ModelRecord:
    """Build a :class:`ModelRecord` with read-only arrays."""
    def as_logits(x):
        return None if x is None else _frozen(np.asarray(x, dtype=np.float64))

    return ModelRecord(
        id=str(model_id),
        id_val_predictions=_frozen(np.asarray(id_val_predictions, dtype=np.int64)),
        ood_predictions=_frozen(np.asarray(ood_predictions, dtype=np.int64)),
        id_val_logits=as_logits(id_val_logits),
        ood_logits=as_logits(ood_logits),
        architecture=architecture,
    )


def make_split(labels, split: Split) -> LabeledSplit:
    return LabeledSplit(_frozen(np.asarray(labels, dtype=np.int64)), Split(split))


# --------------------------------------------------------------------------
# file formats


def read_label_file(path: str | os.PathLike, *, model_id: str | None = None) -> np.ndarray:
    """One integer per line, no header."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing file {str(path)!r}", model_id=model_id)
    lines = path.read_text(encoding="utf-8").splitlines()
    if lines and lines[-1] == "":
        lines.pop()
    try:
        return np.array([int(s) for s in lines], dtype=np.int64)
    except ValueError:
        pass
    for i, s in enumerate(lines):
        try:
            int(s)
        except ValueError:
            raise ValidationError(f"cannot parse integer {s!r} in {str(path)!r}", model_id=model_id, row=i) from None
    raise AssertionError("unreachable")


def read_logit_file(path: str | os.PathLike, *, model_id: str | None = None) -> np.ndarray:
    """Comma separated decimal numbers, one example per line, no header."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing file {str(path)!r}", model_id=model_id)
    rows = []
    width = None
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise ValidationError(f"cannot parse logit row in {str(path)!r}", model_id=model_id, row=i) from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ValidationError(f"logit row has {len(row)} columns, expected {width}", model_id=model_id, row=i)
        rows.append(row)
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)
    bad = ~np.isfinite(arr)
    if bad.any():
        raise ValidationError("non-finite logit entry", model_id=model_id, row=int(np.argwhere(bad)[0, 0]))
    return arr


def write_label_file(path: str | os.PathLike, values: np.ndarray) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in values), encoding="utf-8")


def write_logit_file(path: str | os.PathLike, logits: np.ndarray) -> None:
    # repr() round-trips float64 exactly
    lines = (",".join(repr(float(v)) for v in row) for row in np.asarray(logits, dtype=np.float64))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Manifest:
    path: Path
    class_count: int
    id_val_labels: Path
    ood_labels: Path | None
    models: tuple[dict, ...]
    metadata: Mapping[str, Any]

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"missing manifest {str(path)!r}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"manifest is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ValidationError("manifest must be a JSON object")
        for key in ("class_count", "id_val_labels", "models"):
            if key not in doc:
                raise ValidationError(f"manifest lacks required field {key!r}")
        k = doc["class_count"]
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            raise ValidationError(f"class_count must be a positive integer, got {k!r}")
        models = doc["models"]
        if not isinstance(models, list) or not models:
            raise ValidationError("manifest 'models' must be a nonempty list")
        base = path.parent
        entries = []
        for entry in models:
            if not isinstance(entry, dict) or "id" not in entry:
                raise ValidationError("every model entry needs an 'id'")
            for key in ("id_val_predictions", "ood_predictions"):
                if key not in entry:
                    raise ValidationError(f"model entry lacks {key!r}", model_id=str(entry["id"]))
            resolved = dict(entry)
            for key in ("id_val_predictions", "ood_predictions", "id_val_logits", "ood_logits"):
                if resolved.get(key) is not None:
                    resolved[key] = base / resolved[key]
            entries.append(resolved)
        ood = doc.get("ood_labels")
        return cls(
            path=path,
            class_count=k,
            id_val_labels=base / doc["id_val_labels"],
            ood_labels=None if ood is None else base / ood,
            models=tuple(entries),
            metadata=dict(doc.get("metadata") or {}),
        )

    def referenced_files(self) -> list[Path]:
        files = [self.id_val_labels] + ([self.ood_labels] if self.ood_labels else [])
        for entry in self.models:
            for key in ("id_val_predictions", "ood_predictions", "id_val_logits", "ood_logits"):
                if entry.get(key) is not None:
                    files.append(entry[key])
        return files

    def digest(self) -> str:
        """SHA-256 over the manifest and every file it references, in manifest order."""
        h = hashlib.sha256()
        for p in [self.path] + self.referenced_files():
            h.update(Path(p).read_bytes())
        return h.hexdigest()


def _threads() -> int | None:
    raw = os.environ.get("AOL_THREADS")
    if not raw:
        return None
    try:
        return max(1, int(raw))
    except ValueError:
        return None


def _load_entry(entry: dict, architectures: Mapping[str, str]) -> ModelRecord:
    mid = str(entry["id"])
    get = lambda key, reader: None if entry.get(key) is None else reader(entry[key], model_id=mid)
    return make_record(
        mid,
        read_label_file(entry["id_val_predictions"], model_id=mid),
        read_label_file(entry["ood_predictions"], model_id=mid),
        get("id_val_logits", read_logit_file),
        get("ood_logits", read_logit_file),
        architecture=entry.get("architecture", architectures.get(mid)),
    )


def load_manifest(path: str | os.PathLike) -> tuple[ModelSet, LabeledSplit, LabeledSplit | None]:
    """Load and validate a manifest; return models, ID labels and optional OOD labels."""
    manifest = Manifest.read(path)
    for p in manifest.referenced_files():
        if not Path(p).is_file():
            owner = next((str(e["id"]) for e in manifest.models if p in e.values()), None)
            raise ValidationError(f"missing file {str(p)!r}", model_id=owner)

    architectures = manifest.metadata.get("architectures") or {}
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        records = list(pool.map(lambda e: _load_entry(e, architectures), manifest.models))
    models = ModelSet(tuple(records), manifest.class_count, manifest.metadata)

    id_labels = make_split(read_label_file(manifest.id_val_labels), Split.ID_VAL)
    _check_labels(id_labels, models)
    ood_labels = None
    if manifest.ood_labels is not None:
        ood_labels = make_split(read_label_file(manifest.ood_labels), Split.OOD)
        _check_labels(ood_labels, models)
    return models, id_labels, ood_labels


def _check_labels(split: LabeledSplit, models: ModelSet) -> None:
    m = models.sample_count(split.split)
    if len(split.labels) != m:
        raise ValidationError(f"{split.split.value} labels have {len(split.labels)} rows, predictions have {m}")
    out = np.flatnonzero((split.labels < 0) | (split.labels >= models.class_count))
    if out.size:
        raise ValidationError(f"{split.split.value} label outside [0, {models.class_count})", row=int(out[0]))


def write_dataset(out_dir: str | os.PathLike, models: ModelSet, id_labels: LabeledSplit,
                  ood_labels: LabeledSplit | None = None, *, metadata: Mapping[str, Any] | None = None,
                  write_logits: bool = True) -> Path:
    """Write a manifest plus data files; returns the manifest path."""
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    write_label_file(out / "id_val_labels.txt", id_labels.labels)
    doc: dict[str, Any] = {"class_count": models.class_count, "id_val_labels": "id_val_labels.txt"}
    if ood_labels is not None:
        write_label_file(out / "ood_labels.txt", ood_labels.labels)
        doc["ood_labels"] = "ood_labels.txt"
    entries = []
    for rec in models:
        stem = f"models/{rec.id}"
        entry: dict[str, Any] = {"id": rec.id,
                                 "id_val_predictions": f"{stem}.id_val.txt",
                                 "ood_predictions": f"{stem}.ood.txt"}
        write_label_file(out / entry["id_val_predictions"], rec.id_val_predictions)
        write_label_file(out / entry["ood_predictions"], rec.ood_predictions)
        if write_logits and rec.has_logits:
            entry["id_val_logits"] = f"{stem}.id_val_logits.csv"
            entry["ood_logits"] = f"{stem}.ood_logits.csv"
            write_logit_file(out / entry["id_val_logits"], rec.id_val_logits)
            write_logit_file(out / entry["ood_logits"], rec.ood_logits)
        if rec.architecture is not None:
            entry["architecture"] = rec.architecture
        entries.append(entry)
    doc["models"] = entries
    meta = dict(models.metadata) if metadata is None else dict(metadata)
    if meta:
        doc["metadata"] = meta
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
