"""Adapters that normalize heterogeneous tabular sources into SampleRecords.

Three source kinds are supported: label-only tables (one categorical label
per row), multi-label tables (binary indicator columns), and image-text
tables (real captions). Adapters are pure per-row functions, preserve
input row order, and report skipped rows instead of silently dropping
them. A deterministic synthetic fixture generator provides desk-scale
data with linearly separable per-class feature clusters.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import SchemaError
from .manifest import (
    BankRef,
    InlineCaption,
    LabelInfoTriplet,
    ModalityTag,
    SampleRecord,
    parse_modality,
)

Row = Mapping[str, str]


@dataclass(frozen=True)
class SchemaMap:
    """Maps a source table's columns onto the unified record fields.

    ``label_column`` is a single column name for label-only sources or a
    list of binary indicator columns for multi-label sources. Exactly one
    of ``modality`` (a fixed tag for the whole table) or
    ``modality_column`` (a per-row column) must be set.
    """

    source: str
    image_column: str
    label_column: Union[str, tuple[str, ...], None] = None
    caption_column: Optional[str] = None
    modality: Optional[str] = None
    modality_column: Optional[str] = None
    anatomy_column: Optional[str] = None

    def __post_init__(self):
        if not self.source:
            raise SchemaError("schema source name must be non-empty")
        if (self.modality is None) == (self.modality_column is None):
            raise SchemaError("exactly one of modality or modality_column must be set")
        if isinstance(self.label_column, (list, tuple)):
            object.__setattr__(self, "label_column", tuple(self.label_column))

    def validate_against(self, columns: Sequence[str]) -> None:
        available = set(columns)
        needed = [self.image_column]
        if isinstance(self.label_column, str):
            needed.append(self.label_column)
        elif self.label_column is not None:
            needed.extend(self.label_column)
        for col in (self.caption_column, self.modality_column, self.anatomy_column):
            if col is not None:
                needed.append(col)
        missing = [c for c in needed if c not in available]
        if missing:
            raise SchemaError(f"source {self.source!r}: missing columns {missing}")

    def modality_for(self, row: Row) -> tuple[ModalityTag, str]:
        """Return the (tag, raw text) modality for a row."""
        text = self.modality if self.modality is not None else row[self.modality_column]
        return parse_modality(text), text.strip()

    def anatomy_for(self, row: Row) -> Optional[str]:
        if self.anatomy_column is None:
            return None
        value = row.get(self.anatomy_column, "").strip()
        return value or None


@dataclass
class IngestResult:
    """Records produced by an adapter plus a skip report."""

    records: list[SampleRecord]
    skipped: int
    total_rows: int
    triplets: list[LabelInfoTriplet]


def read_table(path: Union[str, Path]) -> list[dict]:
    """Load a CSV table with a header row."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"source table does not exist: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _table_columns(table: Sequence[Row]) -> list[str]:
    return list(table[0].keys()) if table else []


def _collect_triplet(
    triplets: list[LabelInfoTriplet], seen: set[str], triplet: LabelInfoTriplet
) -> None:
    if triplet.key not in seen:
        seen.add(triplet.key)
        triplets.append(triplet)


def ingest_label_only(table: Sequence[Row], schema: SchemaMap) -> IngestResult:
    """One bank-backed record per row with a single categorical label.

    Rows with an empty label are skipped and counted; a table yielding
    zero usable rows is an error, not an empty success.
    """
    schema.validate_against(_table_columns(table))
    if not isinstance(schema.label_column, str):
        raise SchemaError(f"source {schema.source!r}: label_column must be a single column name")
    records: list[SampleRecord] = []
    triplets: list[LabelInfoTriplet] = []
    seen_keys: set[str] = set()
    skipped = 0
    for i, row in enumerate(table):
        label = row[schema.label_column].strip()
        if not label:
            skipped += 1
            continue
        tag, modality_text = schema.modality_for(row)
        triplet = LabelInfoTriplet(label, modality_text, schema.anatomy_for(row))
        _collect_triplet(triplets, seen_keys, triplet)
        records.append(
            SampleRecord(
                record_id=f"{schema.source}/{i:06d}",
                image_uri=row[schema.image_column],
                source_dataset=schema.source,
                modality=tag,
                payload=BankRef(triplet_key=triplet.key),
            )
        )
    if not records:
        raise SchemaError(f"source {schema.source!r}: zero usable rows")
    return IngestResult(records, skipped, len(table), triplets)


_WHITESPACE_RUN = re.compile(r"\s+")


def normalize_caption(text: str) -> str:
    """Collapse internal whitespace runs to single spaces and trim.

    Casing is preserved: it carries clinical meaning (e.g. sequence names).
    """
    return _WHITESPACE_RUN.sub(" ", text).strip()


def ingest_image_text(table: Sequence[Row], schema: SchemaMap) -> IngestResult:
    """One inline-caption record per row; empty-caption rows are skipped."""
    schema.validate_against(_table_columns(table))
    if schema.caption_column is None:
        raise SchemaError(f"source {schema.source!r}: caption_column is required")
    records: list[SampleRecord] = []
    skipped = 0
    for i, row in enumerate(table):
        caption = normalize_caption(row[schema.caption_column])
        if not caption:
            skipped += 1
            continue
        tag, _ = schema.modality_for(row)
        records.append(
            SampleRecord(
                record_id=f"{schema.source}/{i:06d}",
                image_uri=row[schema.image_column],
                source_dataset=schema.source,
                modality=tag,
                payload=InlineCaption(caption=caption),
            )
        )
    if not records:
        raise SchemaError(f"source {schema.source!r}: zero usable rows")
    return IngestResult(records, skipped, len(table), triplets=[])


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")


def expand_multilabel(row: Row, schema: SchemaMap, row_index: int = 0) -> list[SampleRecord]:
    """Expand one multi-label row into one record per positive indicator.

    A row with zero positive indicators maps to a single record labelled
    "no finding", so normal studies stay in the corpus.
    """
    if not isinstance(schema.label_column, tuple):
        raise SchemaError(
            f"source {schema.source!r}: label_column must list the indicator columns"
        )
    positives = []
    for column in schema.label_column:
        raw = str(row[column]).strip()
        try:
            value = float(raw)
        except ValueError:
            value = None
        if value not in (0.0, 1.0):
            raise SchemaError(
                f"source {schema.source!r}: row {row_index}: non-binary indicator "
                f"{raw!r} in column {column!r}"
            )
        if value == 1.0:
            positives.append(column)

    labels = positives if positives else ["no finding"]
    tag, modality_text = schema.modality_for(row)
    anatomy = schema.anatomy_for(row)
    records = []
    for label in labels:
        triplet = LabelInfoTriplet(label, modality_text, anatomy)
        records.append(
            SampleRecord(
                record_id=f"{schema.source}/{row_index:06d}/{_slug(label)}",
                image_uri=row[schema.image_column],
                source_dataset=schema.source,
                modality=tag,
                payload=BankRef(triplet_key=triplet.key),
            )
        )
    return records


def ingest_multilabel(table: Sequence[Row], schema: SchemaMap) -> IngestResult:
    """Apply expand_multilabel across a table, collecting distinct triplets."""
    schema.validate_against(_table_columns(table))
    records: list[SampleRecord] = []
    triplets: list[LabelInfoTriplet] = []
    seen_keys: set[str] = set()
    for i, row in enumerate(table):
        for record in expand_multilabel(row, schema, row_index=i):
            records.append(record)
            _collect_triplet(triplets, seen_keys, _triplet_from_key(record.payload.triplet_key))
    if not records:
        raise SchemaError(f"source {schema.source!r}: zero usable rows")
    return IngestResult(records, 0, len(table), triplets)


def _triplet_from_key(key: str) -> LabelInfoTriplet:
    from .manifest import TRIPLET_KEY_SEPARATOR

    parts = key.split(TRIPLET_KEY_SEPARATOR)
    return LabelInfoTriplet(parts[0], parts[1], parts[2] if len(parts) > 2 else None)


@dataclass
class DedupReport:
    """What dedup_and_validate dropped and why."""

    kept: int
    dropped_duplicates: list[str]
    rejected: list[tuple[str, str]]  # (record_id, reason)


def dedup_and_validate(
    records: Sequence[SampleRecord],
) -> tuple[list[SampleRecord], DedupReport]:
    """Drop exact duplicates by (image_uri, payload); keep first occurrence.

    The payload is part of the key, so the same image paired with
    different captions survives: that pairing is legitimate in image-text
    sources. Records failing their own invariants are rejected into the
    report rather than raising.
    """
    kept: list[SampleRecord] = []
    seen: set[tuple] = set()
    dropped: list[str] = []
    rejected: list[tuple[str, str]] = []
    for record in records:
        try:
            record.validate()
        except Exception as exc:
            rejected.append((record.record_id, str(exc)))
            continue
        key = (record.image_uri, record.payload)
        if key in seen:
            dropped.append(record.record_id)
            continue
        seen.add(key)
        kept.append(record)
    return kept, DedupReport(kept=len(kept), dropped_duplicates=dropped, rejected=rejected)


# ---------------------------------------------------------------------------
# Synthetic fixtures
# ---------------------------------------------------------------------------

_CLASS_WORDS = (
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
    "iota", "kappa", "lambda", "sigma", "omega", "rho", "tau", "phi",
)

_ANATOMY_BY_MODALITY = {
    ModalityTag.XRAY: "chest",
    ModalityTag.CT: "abdomen",
    ModalityTag.MRI: "brain",
    ModalityTag.US: "thyroid",
    ModalityTag.HISTOPATHOLOGY: "lymph node",
    ModalityTag.FUNDUS: "retina",
    ModalityTag.OTHER: "torso",
}


@dataclass
class FixtureData:
    """Synthetic table rows plus an aligned per-image feature matrix."""

    rows: list[dict]
    features: np.ndarray
    class_names: list[str]
    sources: list[str]

    def rows_for_source(self, source: str) -> list[dict]:
        return [r for r in self.rows if r["source"] == source]


def fixture_source_name(modality: ModalityTag) -> str:
    return f"fixture_{modality.value.lower()}"


def generate_fixture(
    modalities: Sequence[Union[ModalityTag, str]],
    classes_per_modality: int,
    rows_per_class: int,
    seed: int,
    *,
    noise: float = 0.1,
    feature_dim: Optional[int] = None,
) -> FixtureData:
    """Deterministic synthetic corpus with separable feature clusters.

    Each (modality, class) cell gets its own axis-aligned cluster center,
    so classes are linearly separable; ``noise`` scales isotropic Gaussian
    jitter around the centers (zero noise gives zero within-class
    variance). Cluster centers depend only on the class index, so two
    fixtures with different seeds share geometry and can serve as
    train/test splits. Identical arguments produce identical output.
    """
    if classes_per_modality < 1 or rows_per_class < 1 or not modalities:
        raise ValueError("all fixture counts must be >= 1")
    tags = [m if isinstance(m, ModalityTag) else parse_modality(str(m)) for m in modalities]
    n_classes = len(tags) * classes_per_modality
    if n_classes > len(_CLASS_WORDS):
        raise ValueError(f"fixture supports at most {len(_CLASS_WORDS)} classes")
    dim = feature_dim if feature_dim is not None else max(8, n_classes)
    if dim < n_classes:
        raise ValueError("feature_dim must be >= total class count")

    rng = np.random.default_rng(seed)
    rows: list[dict] = []
    feats: list[np.ndarray] = []
    class_names: list[str] = []
    class_index = 0
    for tag in tags:
        source = fixture_source_name(tag)
        for _ in range(classes_per_modality):
            name = f"{_CLASS_WORDS[class_index]} pattern"
            class_names.append(name)
            center = np.zeros(dim)
            center[class_index] = 3.0
            for r in range(rows_per_class):
                feats.append(center + noise * rng.standard_normal(dim))
                rows.append(
                    {
                        "image": f"fixture://{source}/{len(rows):06d}",
                        "label": name,
                        "modality": tag.value,
                        "anatomy": _ANATOMY_BY_MODALITY[tag],
                        "source": source,
                    }
                )
            class_index += 1
    features = np.asarray(feats, dtype=np.float32)
    sources = [fixture_source_name(t) for t in tags]
    return FixtureData(rows=rows, features=features, class_names=class_names, sources=sources)


class FeatureStore:
    """Lookup from image_uri to its feature vector."""

    def __init__(self, mapping: Mapping[str, np.ndarray]):
        self._mapping = dict(mapping)
        dims = {v.shape[-1] for v in self._mapping.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent feature dimensions: {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    @classmethod
    def from_rows(
        cls, rows: Sequence[Row], image_column: str, features: np.ndarray
    ) -> "FeatureStore":
        if len(rows) != len(features):
            raise ValueError(
                f"table has {len(rows)} rows but feature matrix has {len(features)}"
            )
        return cls({row[image_column]: features[i] for i, row in enumerate(rows)})

    def __len__(self) -> int:
        return len(self._mapping)

    def __getitem__(self, image_uri: str) -> np.ndarray:
        try:
            return self._mapping[image_uri]
        except KeyError:
            raise KeyError(f"no features stored for image {image_uri!r}") from None

    def matrix_for(self, image_uris: Sequence[str]) -> np.ndarray:
        return np.stack([self[u] for u in image_uris]).astype(np.float64)

    def merge(self, other: "FeatureStore") -> "FeatureStore":
        merged = dict(self._mapping)
        merged.update(other._mapping)
        return FeatureStore(merged)


def write_features(features: np.ndarray, path: Union[str, Path], seed: int) -> Path:
    """Write a feature matrix as raw row-major float32 plus a JSON sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(features, dtype=np.float32)
    path.write_bytes(arr.tobytes())
    sidecar = {"rows": int(arr.shape[0]), "dim": int(arr.shape[1]), "seed": int(seed)}
    with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")
    return path


def read_features(path: Union[str, Path]) -> np.ndarray:
    """Read a feature matrix written by write_features."""
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.is_file():
        raise SchemaError(f"feature sidecar does not exist: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    raw = np.frombuffer(path.read_bytes(), dtype=np.float32)
    rows, dim = int(sidecar["rows"]), int(sidecar["dim"])
    if raw.size != rows * dim:
        raise SchemaError(
            f"{path}: expected {rows}x{dim} float32 values, found {raw.size}"
        )
    return raw.reshape(rows, dim).copy()


def write_fixture_sources(fixture: FixtureData, out_dir: Union[str, Path], seed: int = 0) -> dict:
    """Write one CSV plus feature file per fixture source; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, dict[str, Path]] = {}
    columns = ["image", "label", "modality", "anatomy"]
    for source in fixture.sources:
        indices = [i for i, r in enumerate(fixture.rows) if r["source"] == source]
        csv_path = out_dir / f"{source}.csv"
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            for i in indices:
                writer.writerow({c: fixture.rows[i][c] for c in columns})
        features_path = write_features(
            fixture.features[indices], out_dir / f"{source}.f32", seed
        )
        paths[source] = {"csv": csv_path, "features": features_path}
    return paths
