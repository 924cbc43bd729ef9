"""Feature schema, datasets, record ingestion and dense encoding.

Feature values are plain Python objects keyed by feature id:

* numeric            -> ``float``
* categorical set    -> ``frozenset`` of string tokens
* embedding          -> 1-D ``numpy`` float array

A feature that is absent from ``DataPoint.features`` is Missing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

FORMAT_VERSION = 1

POSITIVE = 1
NEGATIVE = -1
ABSTAIN = 0

SPLITS = ("dev", "train_labeled", "train_unlabeled", "test")
LABELED_SPLITS = ("dev", "train_labeled", "test")


class FeatureKind(str, Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical_multivalent"
    EMBEDDING = "embedding"


class DatasetError(ValueError):
    """Raised when a dataset or schema file cannot be ingested."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class FeatureDef:
    feature_id: str
    name: str
    kind: FeatureKind
    modalities: frozenset[str]
    embedding_dim: int | None = None
    servable: bool = True
    feature_set: str | None = None

    def __post_init__(self) -> None:
        if not self.modalities:
            raise ValueError(f"feature {self.feature_id!r} lists no modalities")
        if self.kind is FeatureKind.EMBEDDING:
            if self.embedding_dim is None or self.embedding_dim < 1:
                raise ValueError(f"embedding feature {self.feature_id!r} needs embedding_dim >= 1")
        elif self.embedding_dim is not None:
            raise ValueError(f"feature {self.feature_id!r}: embedding_dim only applies to embeddings")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "feature_id": self.feature_id,
            "name": self.name,
            "kind": self.kind.value,
            "servable": self.servable,
            "modalities": sorted(self.modalities),
        }
        if self.embedding_dim is not None:
            out["embedding_dim"] = self.embedding_dim
        if self.feature_set is not None:
            out["feature_set"] = self.feature_set
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureDef":
        return cls(
            feature_id=str(d["feature_id"]),
            name=str(d.get("name", d["feature_id"])),
            kind=FeatureKind(d["kind"]),
            modalities=frozenset(d["modalities"]),
            embedding_dim=d.get("embedding_dim"),
            servable=bool(d.get("servable", True)),
            feature_set=d.get("feature_set"),
        )


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature definitions shared by every modality."""

    features: tuple[FeatureDef, ...]

    def __post_init__(self) -> None:
        ids = [f.feature_id for f in self.features]
        if len(ids) != len(set(ids)):
            raise ValueError("feature ids must be unique")
        object.__setattr__(self, "_by_id", {f.feature_id: f for f in self.features})

    def __getitem__(self, feature_id: str) -> FeatureDef:
        return self._by_id[feature_id]  # type: ignore[attr-defined]

    def __contains__(self, feature_id: object) -> bool:
        return feature_id in self._by_id  # type: ignore[attr-defined]

    @property
    def ids(self) -> list[str]:
        return [f.feature_id for f in self.features]

    def servable_ids(self) -> set[str]:
        return {f.feature_id for f in self.features if f.servable}

    def ids_for_modality(self, modality: str) -> set[str]:
        return {f.feature_id for f in self.features if modality in f.modalities}

    def ids_in_sets(self, tags: Iterable[str]) -> set[str]:
        tags = set(tags)
        return {f.feature_id for f in self.features if f.feature_set in tags}

    @property
    def modalities(self) -> set[str]:
        out: set[str] = set()
        for f in self.features:
            out |= f.modalities
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"format_version": FORMAT_VERSION, "features": [f.to_dict() for f in self.features]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureSchema":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise DatasetError(f"unsupported schema format_version {version!r}")
        return cls(tuple(FeatureDef.from_dict(f) for f in d["features"]))


def load_schema(path: str | Path) -> FeatureSchema:
    """Read a schema document (YAML or JSON)."""
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    try:
        return FeatureSchema.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"invalid schema {path}: {exc}") from exc


def dump_schema(schema: FeatureSchema) -> str:
    return json.dumps(schema.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class DataPoint:
    id: str
    modality: str
    features: Mapping[str, Any]
    gold_label: int | None = None


@dataclass(frozen=True)
class Dataset:
    schema: FeatureSchema
    points: tuple[DataPoint, ...]
    split: str

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.points]

    def gold(self) -> np.ndarray:
        """Gold labels as an int array of +1/-1; raises if any are missing."""
        labels = [p.gold_label for p in self.points]
        if any(y is None for y in labels):
            raise ValueError(f"{self.split} dataset has unlabeled points")
        return np.asarray(labels, dtype=np.int64)

    def modalities(self) -> set[str]:
        return {p.modality for p in self.points}

    def with_split(self, split: str, points: Sequence[DataPoint] | None = None) -> "Dataset":
        return Dataset(self.schema, tuple(self.points if points is None else points), split)


# -- record (de)serialization -------------------------------------------------


def _parse_value(fdef: FeatureDef, raw: Any) -> Any:
    if not isinstance(raw, Mapping) or len(raw) != 1:
        raise ValueError(f"feature {fdef.feature_id!r}: value must be a one-key object")
    (tag, payload), = raw.items()
    if fdef.kind is FeatureKind.NUMERIC:
        if tag != "num":
            raise ValueError(f"feature {fdef.feature_id!r} is numeric, got {tag!r}")
        if isinstance(payload, bool) or not isinstance(payload, (int, float)):
            raise ValueError(f"feature {fdef.feature_id!r}: numeric value must be a number")
        value = float(payload)
        if not math.isfinite(value):
            raise ValueError(f"feature {fdef.feature_id!r}: numeric value must be finite")
        return value
    if fdef.kind is FeatureKind.CATEGORICAL:
        if tag != "cat":
            raise ValueError(f"feature {fdef.feature_id!r} is categorical, got {tag!r}")
        if not isinstance(payload, list) or not payload:
            raise ValueError(f"feature {fdef.feature_id!r}: categorical set must be a non-empty list")
        if not all(isinstance(t, str) for t in payload):
            raise ValueError(f"feature {fdef.feature_id!r}: tokens must be strings")
        return frozenset(payload)
    if tag != "emb":
        raise ValueError(f"feature {fdef.feature_id!r} is an embedding, got {tag!r}")
    if not isinstance(payload, list) or len(payload) != fdef.embedding_dim:
        raise ValueError(
            f"feature {fdef.feature_id!r}: embedding length must be {fdef.embedding_dim}"
        )
    vec = np.asarray(payload, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"feature {fdef.feature_id!r}: embedding must be finite")
    return vec


def parse_record(record: Mapping[str, Any], schema: FeatureSchema) -> DataPoint:
    """Build a DataPoint from one decoded record, enforcing the schema."""
    if not isinstance(record, Mapping):
        raise ValueError("record must be an object")
    pid = record.get("id")
    modality = record.get("modality")
    if not isinstance(pid, str) or not pid:
        raise ValueError("record needs a non-empty string 'id'")
    if not isinstance(modality, str) or not modality:
        raise ValueError(f"record {pid!r} needs a string 'modality'")
    gold = record.get("gold_label")
    if gold is not None and (isinstance(gold, bool) or gold not in (POSITIVE, NEGATIVE)):
        raise ValueError(f"record {pid!r}: gold_label must be +1 or -1")
    raw_features = record.get("features", {})
    if not isinstance(raw_features, Mapping):
        raise ValueError(f"record {pid!r}: 'features' must be an object")
    features: dict[str, Any] = {}
    for fid, raw in raw_features.items():
        if fid not in schema:
            raise ValueError(f"record {pid!r}: unknown feature {fid!r}")
        fdef = schema[fid]
        if modality not in fdef.modalities:
            raise ValueError(f"record {pid!r}: feature {fid!r} not available for modality {modality!r}")
        features[fid] = _parse_value(fdef, raw)
    return DataPoint(pid, modality, features, gold)


def record_of(point: DataPoint, schema: FeatureSchema) -> dict[str, Any]:
    feats: dict[str, Any] = {}
    for fid in schema.ids:
        if fid not in point.features:
            continue
        value = point.features[fid]
        kind = schema[fid].kind
        if kind is FeatureKind.NUMERIC:
            feats[fid] = {"num": float(value)}
        elif kind is FeatureKind.CATEGORICAL:
            feats[fid] = {"cat": sorted(value)}
        else:
            feats[fid] = {"emb": [float(v) for v in value]}
    rec: dict[str, Any] = {"format_version": FORMAT_VERSION, "id": point.id, "modality": point.modality}
    if point.gold_label is not None:
        rec["gold_label"] = int(point.gold_label)
    rec["features"] = feats
    return rec


def load_dataset(path: str | Path, schema: FeatureSchema, split: str) -> Dataset:
    """Parse a line-delimited record file; fails on the first violation."""
    points: list[DataPoint] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed JSON: {exc.msg}", lineno) from exc
            version = record.get("format_version", FORMAT_VERSION) if isinstance(record, dict) else None
            if version != FORMAT_VERSION:
                raise DatasetError(f"unsupported format_version {version!r}", lineno)
            try:
                point = parse_record(record, schema)
            except ValueError as exc:
                raise DatasetError(str(exc), lineno) from exc
            if point.id in seen:
                raise DatasetError(f"duplicate id {point.id!r}", lineno)
            seen.add(point.id)
            points.append(point)
    return Dataset(schema, tuple(points), split)


def dump_dataset(dataset: Dataset) -> str:
    return "".join(
        json.dumps(record_of(p, dataset.schema), sort_keys=True) + "\n" for p in dataset.points
    )


# -- validation ---------------------------------------------------------------


def validate(dataset: Dataset) -> list[str]:
    """Describe every invariant violation; an empty list means the dataset is clean.

    Points with every feature missing are reported with a ``warning:`` prefix.
    """
    schema = dataset.schema
    problems: list[str] = []
    seen: set[str] = set()
    for p in dataset.points:
        if p.id in seen:
            problems.append(f"{p.id}: duplicate id")
        seen.add(p.id)
        if dataset.split in LABELED_SPLITS and p.gold_label is None:
            problems.append(f"{p.id}: gold_label missing in {dataset.split} split")
        if dataset.split == "train_unlabeled" and p.gold_label is not None:
            problems.append(f"{p.id}: gold_label present in train_unlabeled split")
        if p.gold_label is not None and p.gold_label not in (POSITIVE, NEGATIVE):
            problems.append(f"{p.id}: gold_label {p.gold_label!r} not in {{+1, -1}}")
        for fid, value in p.features.items():
            if fid not in schema:
                problems.append(f"{p.id}: unknown feature {fid}")
                continue
            fdef = schema[fid]
            if p.modality not in fdef.modalities:
                problems.append(f"{p.id}: feature {fid} not available for modality {p.modality}")
            problem = _value_problem(fdef, value)
            if problem:
                problems.append(f"{p.id}: feature {fid} {problem}")
        if not p.features:
            problems.append(f"warning: {p.id}: all features missing")
    return problems


def _value_problem(fdef: FeatureDef, value: Any) -> str | None:
    if fdef.kind is FeatureKind.NUMERIC:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            return "must be a finite number"
    elif fdef.kind is FeatureKind.CATEGORICAL:
        if not isinstance(value, (set, frozenset)) or not value:
            return "must be a non-empty token set"
    else:
        arr = np.asarray(value)
        if arr.ndim != 1 or arr.shape[0] != fdef.embedding_dim or not np.all(np.isfinite(arr)):
            return f"must be a finite vector of length {fdef.embedding_dim}"
    return None


# -- dense encoding -----------------------------------------------------------


@dataclass(frozen=True)
class FeatureSlot:
    feature_id: str
    kind: FeatureKind
    offset: int
    width: int
    vocab: tuple[str, ...] = ()
    lo: float = 0.0
    hi: float = 0.0


@dataclass(frozen=True)
class Encoding:
    """Fitted layout mapping feature values to slots of a dense vector.

    ``modality_features`` optionally restricts which features are read for a
    given modality; features outside the restriction encode as zeros.
    """

    slots: tuple[FeatureSlot, ...]
    width: int
    modality_features: Mapping[str, frozenset[str]] | None = None
    _index: dict[str, dict[str, int]] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        for s in self.slots:
            if s.kind is FeatureKind.CATEGORICAL:
                self._index[s.feature_id] = {tok: i for i, tok in enumerate(s.vocab)}

    @property
    def feature_ids(self) -> list[str]:
        return [s.feature_id for s in self.slots]

    def slot(self, feature_id: str) -> FeatureSlot:
        for s in self.slots:
            if s.feature_id == feature_id:
                return s
        raise KeyError(feature_id)

    def allowed(self, modality: str) -> set[str] | None:
        if self.modality_features is None:
            return None
        return set(self.modality_features.get(modality, frozenset()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "width": self.width,
            "slots": [
                {
                    "feature_id": s.feature_id,
                    "kind": s.kind.value,
                    "offset": s.offset,
                    "width": s.width,
                    "vocab": list(s.vocab),
                    "lo": s.lo,
                    "hi": s.hi,
                }
                for s in self.slots
            ],
            "modality_features": None
            if self.modality_features is None
            else {m: sorted(v) for m, v in sorted(self.modality_features.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Encoding":
        slots = tuple(
            FeatureSlot(
                s["feature_id"], FeatureKind(s["kind"]), s["offset"], s["width"],
                tuple(s["vocab"]), s["lo"], s["hi"],
            )
            for s in d["slots"]
        )
        mf = d.get("modality_features")
        return cls(slots, d["width"], None if mf is None else {m: frozenset(v) for m, v in mf.items()})


def fit_encoding(
    datasets: Sequence[Dataset],
    feature_subset: Iterable[str],
    modality_features: Mapping[str, Iterable[str]] | None = None,
) -> Encoding:
    """Fit vocabularies and numeric ranges over ``datasets``.

    Slots follow schema order. Categorical vocabularies are sorted; numeric
    features record observed min/max (a constant feature encodes to 0.0).
    """
    if not datasets:
        raise ValueError("fit_encoding needs at least one dataset")
    schema = datasets[0].schema
    subset = set(feature_subset)
    unknown = subset - set(schema.ids)
    if unknown:
        raise ValueError(f"features not in schema: {sorted(unknown)}")
    mf = None if modality_features is None else {m: frozenset(v) for m, v in modality_features.items()}

    vocab: dict[str, set[str]] = {}
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}
    for ds in datasets:
        for p in ds.points:
            allowed = None if mf is None else mf.get(p.modality, frozenset())
            for fid, value in p.features.items():
                if fid not in subset or (allowed is not None and fid not in allowed):
                    continue
                kind = schema[fid].kind
                if kind is FeatureKind.CATEGORICAL:
                    vocab.setdefault(fid, set()).update(value)
                elif kind is FeatureKind.NUMERIC:
                    lo[fid] = min(lo.get(fid, value), value)
                    hi[fid] = max(hi.get(fid, value), value)

    slots = []
    offset = 0
    for fdef in schema.features:
        fid = fdef.feature_id
        if fid not in subset:
            continue
        if fdef.kind is FeatureKind.CATEGORICAL:
            toks = tuple(sorted(vocab.get(fid, ())))
            slot = FeatureSlot(fid, fdef.kind, offset, len(toks), vocab=toks)
        elif fdef.kind is FeatureKind.NUMERIC:
            slot = FeatureSlot(fid, fdef.kind, offset, 1, lo=lo.get(fid, 0.0), hi=hi.get(fid, 0.0))
        else:
            slot = FeatureSlot(fid, fdef.kind, offset, int(fdef.embedding_dim))
        slots.append(slot)
        offset += slot.width
    return Encoding(tuple(slots), offset, mf)


def scale(value: float, lo: float, hi: float) -> float:
    """Min-max scale into [0, 1] with clipping; constant ranges map to 0."""
    if hi <= lo:
        return 0.0
    return min(1.0, max(0.0, (value - lo) / (hi - lo)))


def encode_into(out: np.ndarray, point: DataPoint, encoding: Encoding) -> None:
    allowed = encoding.allowed(point.modality)
    feats = point.features
    for s in encoding.slots:
        value = feats.get(s.feature_id)
        if value is None or (allowed is not None and s.feature_id not in allowed):
            continue
        if s.kind is FeatureKind.CATEGORICAL:
            index = encoding._index[s.feature_id]
            for tok in value:
                i = index.get(tok)
                if i is not None:
                    out[s.offset + i] = 1.0
        elif s.kind is FeatureKind.NUMERIC:
            out[s.offset] = scale(value, s.lo, s.hi)
        else:
            vec = np.asarray(value, dtype=np.float64)
            if vec.shape[0] != s.width:
                raise ValueError(f"{point.id}: embedding {s.feature_id} has length {vec.shape[0]}, expected {s.width}")
            out[s.offset : s.offset + s.width] = vec


def encode(point: DataPoint, encoding: Encoding) -> np.ndarray:
    out = np.zeros(encoding.width, dtype=np.float64)
    encode_into(out, point, encoding)
    return out


def encode_many(points: Iterable[DataPoint], encoding: Encoding) -> np.ndarray:
    points = list(points)
    out = np.zeros((len(points), encoding.width), dtype=np.float64)
    for i, p in enumerate(points):
        encode_into(out[i], p, encoding)
    return out
