"""Global shape embeddings, the model database and nearest-embedding retrieval.

A persisted index is a directory::

    manifest.json      copy of the input manifest plus per-entry file names
    embeddings.crsf    one row per entry, in manifest order
    clouds/<n>.ply     the (normalized) cloud of entry n
    features/<n>.crsf  local features of entry n
    splits/<n>.json    optional symmetry split of entry n
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from symreg._parallel import parallel_map
from symreg.errors import DegeneracyError, FormatError, InputError
from symreg.features import FeatureSet, extract_fpfh, load_features, write_features
from symreg.geometry import PointCloud, Pose, normalize_cloud
from symreg.io import read_cloud, read_crsf, read_ply, write_crsf, write_ply
from symreg.symmetry import SymmetrySplit, symmetry_split

EMBED_DIM = 256
INDEX_FORMAT = "symreg-index"
INDEX_VERSION = 1

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["category", "models"],
    "properties": {
        "category": {"type": "string"},
        "normalize": {"type": "boolean"},
        "fpfh": {
            "type": "object",
            "properties": {
                "normal_radius": {"type": "number", "exclusiveMinimum": 0},
                "feature_radius": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "models": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "cloud_path", "symmetry_classes"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "cloud_path": {"type": "string"},
                    "feature_path": {"type": "string"},
                    "embedding_path": {"type": "string"},
                    "symmetry_classes": {"type": "integer", "minimum": 1},
                },
            },
        },
    },
}


@dataclass(frozen=True, eq=False)
class Embedding:
    """Unit-length float32 global descriptor; ``source`` is ``pooled`` or ``external``."""

    vector: np.ndarray
    source: str = "pooled"

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float32, copy=True).ravel()
        if v.size == 0 or not np.isfinite(v).all():
            raise InputError("embedding must be a non-empty finite vector", "non_finite")
        if abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0) > 1e-6:
            raise InputError("embedding is not unit length", "not_normalized")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @classmethod
    def from_vector(cls, v, source: str = "external") -> "Embedding":
        v = np.asarray(v, dtype=np.float64).ravel()
        norm = float(np.linalg.norm(v))
        if norm == 0 or not math.isfinite(norm):
            raise DegeneracyError("cannot normalise a zero embedding", "zero_embedding")
        return cls((v / norm).astype(np.float32), source)

    @property
    def dim(self) -> int:
        return self.vector.size


def pooled_embedding(features: FeatureSet, dim: int = EMBED_DIM) -> Embedding:
    """Per-dimension mean and max over rows, padded or cut to ``dim``, unit length.

    The mean uses exact summation, so row order cannot change the result.
    """
    F = features.features.astype(np.float64)
    mean = np.array([math.fsum(col) for col in F.T]) / len(F)
    pooled = np.concatenate([mean, F.max(axis=0)])
    out = np.zeros(dim)
    out[:min(dim, pooled.size)] = pooled[:dim]
    return Embedding.from_vector(out, source="pooled")


@dataclass(frozen=True, eq=False)
class DatabaseEntry:
    id: str
    cloud: PointCloud
    embedding: Embedding
    features: FeatureSet
    symmetry_classes: int = 1
    symmetry_split: SymmetrySplit | None = None
    normalization: Pose = field(default_factory=Pose)


@dataclass(frozen=True, eq=False)
class ModelDatabase:
    entries: tuple
    category: str = ""
    normal_radius: float = 0.1
    feature_radius: float = 0.2
    normalize: bool = True

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        seen = set()
        for e in entries:
            if e.id in seen:
                raise InputError(f"duplicate model id {e.id!r}", "duplicate_id")
            seen.add(e.id)
            if e.symmetry_classes < 1:
                raise InputError(f"model {e.id!r}: symmetry_classes must be >= 1", "bad_params")
        if entries:
            fd, ed = entries[0].features.dim, entries[0].embedding.dim
            for e in entries:
                if e.features.dim != fd:
                    raise InputError(f"model {e.id!r}: feature dim {e.features.dim} != {fd}", "dim_mismatch")
                if e.embedding.dim != ed:
                    raise InputError(f"model {e.id!r}: embedding dim {e.embedding.dim} != {ed}", "dim_mismatch")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def get(self, model_id: str) -> DatabaseEntry:
        for e in self.entries:
            if e.id == model_id:
                return e
        raise InputError(f"no model {model_id!r} in database", "unknown_id")

    def embedding_matrix(self) -> np.ndarray:
        return np.stack([e.embedding.vector for e in self.entries])


def retrieve(query: Embedding, db: ModelDatabase, m: int = 1) -> list[tuple[str, float]]:
    """The ``m`` entries nearest to ``query`` in L2, ascending, ties by id."""
    if len(db) == 0:
        raise InputError("empty database", "empty_database")
    if not 1 <= m <= len(db):
        raise InputError(f"m must be in [1, {len(db)}], got {m}", "bad_params")
    q = query.vector if isinstance(query, Embedding) else np.asarray(query, dtype=np.float32)
    E = db.embedding_matrix()
    if q.size != E.shape[1]:
        raise InputError(f"query embedding dim {q.size} != database dim {E.shape[1]}", "dim_mismatch")
    d = np.sqrt(((E.astype(np.float64) - q.astype(np.float64)) ** 2).sum(axis=1))
    ranked = sorted(zip(d.tolist(), db.ids), key=lambda r: (r[0], r[1]))
    return [(i, dist) for dist, i in ranked[:m]]


def describe_cloud(
    cloud: PointCloud,
    normal_radius: float = 0.1,
    feature_radius: float = 0.2,
    features: FeatureSet | None = None,
    embedding: Embedding | None = None,
) -> tuple[FeatureSet, Embedding]:
    """Local features and global embedding, computing whichever is not supplied."""
    if features is None:
        features = extract_fpfh(cloud, normal_radius, feature_radius)
    if embedding is None:
        embedding = pooled_embedding(features)
    return features, embedding


def load_embedding(path) -> Embedding:
    m = read_crsf(path)
    if m.shape[0] != 1:
        raise FormatError(f"{path}: embedding file must hold exactly one row, found {m.shape[0]}", "count_mismatch")
    if not np.isfinite(m).all():
        raise FormatError(f"{path}: non-finite feature", "non_finite")
    return Embedding.from_vector(m[0], source="external")


def read_json(path, schema: dict | None = None) -> dict:
    """Parse JSON with ``file:line:col`` diagnostics and optional schema validation."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file", "missing_file")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}", "bad_json") from None
    if schema is not None:
        try:
            jsonschema.validate(doc, schema)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise FormatError(f"{path}: at {where}: {exc.message}", "bad_schema") from None
    return doc


def _split_record(split: SymmetrySplit) -> dict:
    return {"g": split.g, "assignment": split.assignment.tolist(), "centroids": split.centroids.tolist()}


def build_database(
    manifest_path,
    out_dir=None,
    compute_splits: bool = True,
    split_seed: int = 0,
    threads: int = 1,
) -> ModelDatabase:
    """Build entries from a manifest and persist the index (default ``<manifest>.index/``)."""
    manifest_path = Path(manifest_path)
    manifest = read_json(manifest_path, MANIFEST_SCHEMA)
    base = manifest_path.parent
    normalize = manifest.get("normalize", True)
    fpfh = manifest.get("fpfh", {})
    nr, fr = fpfh.get("normal_radius", 0.1), fpfh.get("feature_radius", 0.2)

    seen = set()
    for spec in manifest["models"]:
        if spec["id"] in seen:
            raise InputError(f"duplicate model id {spec['id']!r}", "duplicate_id")
        seen.add(spec["id"])
        for key in ("cloud_path", "feature_path", "embedding_path"):
            if key in spec and not (base / spec[key]).exists():
                raise FormatError(f"model {spec['id']!r}: missing file {spec[key]}", "missing_file")

    def make(spec) -> DatabaseEntry:
        mid = spec["id"]
        try:
            raw = read_cloud(base / spec["cloud_path"], id=mid)
            cloud, norm = normalize_cloud(raw) if normalize else (raw, Pose())
            feats = load_features(base / spec["feature_path"], len(cloud)) if "feature_path" in spec else None
            emb = load_embedding(base / spec["embedding_path"]) if "embedding_path" in spec else None
            feats, emb = describe_cloud(cloud, nr, fr, feats, emb)
        except (InputError, DegeneracyError) as exc:
            raise type(exc)(f"model {mid!r}: {exc}", exc.code) from None
        g = spec["symmetry_classes"]
        split = None
        if compute_splits and g >= 2:
            try:
                split = symmetry_split(cloud, feats, g, seed=split_seed)
            except DegeneracyError:
                split = None
        return DatabaseEntry(mid, cloud, emb, feats, g, split, norm)

    entries = parallel_map(make, manifest["models"], threads)
    db = ModelDatabase(tuple(entries), manifest["category"], nr, fr, normalize)
    save_database(db, out_dir if out_dir is not None else base / f"{manifest_path.stem}.index", manifest)
    return db


def save_database(db: ModelDatabase, out_dir, source_manifest: dict | None = None) -> Path:
    out = Path(out_dir)
    for sub in ("clouds", "features", "splits"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    models = []
    for n, e in enumerate(db.entries):
        rec = {
            "id": e.id,
            "symmetry_classes": e.symmetry_classes,
            "cloud": f"clouds/{n}.ply",
            "features": f"features/{n}.crsf",
            "feature_source": e.features.source,
            "embedding_source": e.embedding.source,
            "normalization": e.normalization.to_dict(),
        }
        write_ply(out / rec["cloud"], e.cloud)
        write_features(out / rec["features"], e.features)
        if e.symmetry_split is not None:
            rec["split"] = f"splits/{n}.json"
            (out / rec["split"]).write_text(json.dumps(_split_record(e.symmetry_split)))
        models.append(rec)
    write_crsf(out / "embeddings.crsf", db.embedding_matrix())
    doc = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "category": db.category,
        "normalize": db.normalize,
        "fpfh": {"normal_radius": db.normal_radius, "feature_radius": db.feature_radius},
        "source_manifest": source_manifest,
        "models": models,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return out


def load_database(index_dir) -> ModelDatabase:
    """Reload a persisted index; clouds, features and embeddings come back bit-identical."""
    index_dir = Path(index_dir)
    doc = read_json(index_dir / "manifest.json")
    if doc.get("format") != INDEX_FORMAT or doc.get("version") != INDEX_VERSION:
        raise FormatError(f"{index_dir}: not a symreg index", "bad_index")
    E = read_crsf(index_dir / "embeddings.crsf")
    if E.shape[0] != len(doc["models"]):
        raise FormatError(f"{index_dir}: embedding rows do not match entries", "count_mismatch")
    entries = []
    for n, rec in enumerate(doc["models"]):
        cloud = read_ply(index_dir / rec["cloud"], id=rec["id"])
        feats = FeatureSet(load_features(index_dir / rec["features"], len(cloud)).features, rec["feature_source"])
        split = None
        if "split" in rec:
            s = json.loads((index_dir / rec["split"]).read_text())
            split = SymmetrySplit(np.asarray(s["assignment"]), s["g"], np.asarray(s["centroids"]))
        entries.append(DatabaseEntry(
            rec["id"], cloud, Embedding(E[n], rec["embedding_source"]), feats,
            rec["symmetry_classes"], split, Pose.from_dict(rec["normalization"]),
        ))
    fp = doc.get("fpfh", {})
    return ModelDatabase(
        tuple(entries), doc.get("category", ""), fp.get("normal_radius", 0.1), fp.get("feature_radius", 0.2),
        doc.get("normalize", True),
    )


def open_database(path, threads: int = 1) -> ModelDatabase:
    """Load an index directory, or build one from a manifest file."""
    path = Path(path)
    if path.is_dir():
        return load_database(path)
    return build_database(path, threads=threads)
