"""Retrieval + registration evaluation over a query set.

Ground-truth poses in a query file map the annotated model's cloud (as
read from disk, before normalization) onto the query cloud. Models are
assumed to share one category frame, so the same pose is also the target
when a different model is retrieved.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from symreg._parallel import parallel_map
from symreg.errors import InputError
from symreg.geometry import DEFAULT_SET_PARAMS, Pose, apply_pose, chamfer, normalize_cloud, sets_from_distances
from symreg.harness import metrics
from symreg.io import read_cloud
from symreg.features import load_features
from symreg.registration import RansacParams, SymmetryParams, register_hypotheses, rre, rte, select_best
from symreg.retrieval import ModelDatabase, describe_cloud, load_embedding, open_database, read_json, retrieve

REPORT_FORMAT = "symreg-eval"
REPORT_VERSION = 1
METHODS = ("symmetry", "plain")

_POSE_SCHEMA = {
    "type": "object",
    "required": ["rotation", "translation"],
    "properties": {
        "rotation": {"type": "array", "items": {"type": "number"}, "minItems": 9, "maxItems": 9},
        "translation": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "scale": {"type": "number", "exclusiveMinimum": 0},
    },
}

QUERIES_SCHEMA = {
    "type": "object",
    "required": ["queries"],
    "properties": {
        "queries": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "cloud_path"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "cloud_path": {"type": "string"},
                    "feature_path": {"type": "string"},
                    "embedding_path": {"type": "string"},
                    "model_id": {"type": "string"},
                    "pose": _POSE_SCHEMA,
                },
            },
        },
    },
}

EVAL_SCHEMA = {
    "type": "object",
    "required": ["database", "queries"],
    "additionalProperties": False,
    "properties": {
        "database": {"type": "string"},
        "queries": {"type": "string"},
        "mode": {"enum": ["retrieve", "annotated"]},
        "positives": {"enum": ["chamfer", "annotated"]},
        "k": {"type": "integer", "minimum": 1},
        "precision_m": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "normalize_queries": {"type": "boolean"},
        "ransac": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iterations": {"type": "integer", "minimum": 1},
                "inlier_threshold": {"type": "number", "exclusiveMinimum": 0},
                "early_exit_ratio": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "symmetry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_samples": {"type": "integer", "minimum": 1},
                "k_neighbors": {"type": "integer", "minimum": 1},
            },
        },
        "sets": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "number"} for k in DEFAULT_SET_PARAMS},
        },
    },
}

DEFAULTS = {"mode": "retrieve", "positives": "chamfer", "k": 5, "seed": 0, "ransac": {}, "symmetry": {}, "sets": {}}


@dataclass(frozen=True)
class EvalReport:
    config: dict
    precision_m: int
    records: dict
    aggregates: dict
    cdf: dict

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "config": self.config,
            "precision_m": self.precision_m,
            "records": self.records,
            "aggregates": self.aggregates,
            "cdf": self.cdf,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        return format_table(self.aggregates, self.precision_m)


def derive_seed(root: int, index: int) -> int:
    """Per-query seed that depends only on the root seed and the query's position."""
    return int(np.random.SeedSequence([root, index]).generate_state(1)[0])


def aggregate(records: dict) -> tuple[dict, dict]:
    """Aggregates and CDF columns; a pure function of the per-case records."""
    aggs = {m: metrics.registration_summary(records[m]) for m in METHODS}
    aggs["retrieval"] = metrics.retrieval_summary(records["retrieval"])
    return aggs, {m: metrics.cdf_columns(records[m]) for m in METHODS}


def _fmt(v, spec: str) -> str:
    return "-" if v is None else format(v, spec)


def format_table(aggregates: dict, precision_m: int) -> str:
    rre_keys = [f"rre_deg<={t:g}" for t in metrics.RRE_THRESHOLDS_DEG]
    rte_keys = [f"rte<={t:g}" for t in metrics.RTE_THRESHOLDS]
    head = ["method", "cases"] + [k.replace("rre_deg", "RRE").replace("rte", "RTE") for k in rre_keys + rte_keys]
    head += ["med.RRE(deg)", "med.RTE"]
    rows = [head]
    for m in METHODS:
        a = aggregates[m]
        rows.append(
            [m, str(a["cases"])]
            + [_fmt(a[k], ".3f") for k in rre_keys + rte_keys]
            + [_fmt(a["median_rre_deg"], ".3f"), _fmt(a["median_rte"], ".4f")]
        )
    widths = [max(len(r[c]) for r in rows) for c in range(len(head))]
    lines = ["  ".join(cell.ljust(w) if c == 0 else cell.rjust(w) for c, (cell, w) in enumerate(zip(r, widths))) for r in rows]
    ret = aggregates["retrieval"]
    lines.append("")
    lines.append(f"Precision@M (M={precision_m}): {_fmt(ret['precision_at_m'], '.4f')}")
    lines.append(f"Top-1 CD: {_fmt(ret['top1_cd'], '.6g')}")
    return "\n".join(lines) + "\n"


def _load_query(base: Path, q: dict, db: ModelDatabase, normalize: bool):
    raw = read_cloud(base / q["cloud_path"], id=q["id"])
    cloud, norm = normalize_cloud(raw) if normalize else (raw, Pose())
    feats = load_features(base / q["feature_path"], len(cloud)) if "feature_path" in q else None
    emb = load_embedding(base / q["embedding_path"]) if "embedding_path" in q else None
    feats, emb = describe_cloud(cloud, db.normal_radius, db.feature_radius, feats, emb)
    gt = Pose.from_dict(q["pose"]) if "pose" in q else None
    return raw, cloud, norm, feats, emb, gt


def _evaluate_query(index: int, q: dict, base: Path, db: ModelDatabase, cfg: dict, m: int):
    raw, cloud, norm, feats, emb, gt = _load_query(base, q, db, cfg["normalize_queries"])
    ids = db.ids
    ranking = [i for i, _ in retrieve(emb, db, len(db))]

    # Chamfer against every model in the shared category frame
    canon = apply_pose(raw, gt.inverse()) if gt is not None else raw
    raw_models = [apply_pose(e.cloud, e.normalization) for e in db.entries]
    cds = [chamfer(canon, mc) for mc in raw_models]
    oracle = min(range(len(ids)), key=lambda j: (cds[j], ids[j]))
    top = ids.index(ranking[0])

    if cfg["positives"] == "annotated" or cfg["mode"] == "annotated":
        if "model_id" not in q:
            raise InputError(f"query {q['id']!r} has no model_id annotation", "missing_annotation")
        db.get(q["model_id"])
    if cfg["positives"] == "annotated":
        positives = [q["model_id"]]
    else:
        sets = {**DEFAULT_SET_PARAMS, **cfg["sets"]}
        positives = sets_from_distances(cds, ids, None, database_size=len(ids), **sets)[0]
    retrieval = {
        "query_id": q["id"],
        "retrieved": ranking[:m],
        "positives": positives,
        "precision_at_m": metrics.precision_at_m(ranking, positives, m),
        "oracle_id": ids[oracle],
        "top1_cd": metrics.top1_cd(canon, raw_models[top], raw_models[oracle]),
    }

    entry = db.get(q["model_id"]) if cfg["mode"] == "annotated" else db.entries[top]
    seed = derive_seed(cfg["seed"], index)
    ransac = RansacParams(seed=seed, **cfg["ransac"])
    symmetry = SymmetryParams(seed=seed, **cfg["symmetry"])
    hyps = register_hypotheses(
        cloud, feats, entry.cloud, entry.features, entry.symmetry_classes, cfg["k"], ransac, symmetry,
        model_split=entry.symmetry_split,
    )
    # ground truth expressed between the two normalized frames
    target = norm.inverse().compose(gt).compose(entry.normalization) if gt is not None else None
    out = {"retrieval": retrieval}
    for method, res in (("symmetry", select_best(hyps)), ("plain", hyps[-1])):
        out[method] = {
            "query_id": q["id"],
            "retrieved_id": ranking[0],
            "model_id": entry.id,
            "rre": rre(res.pose, target) if target is not None else None,
            "rte": rte(res.pose, target) if target is not None else None,
            "scd": res.alignment_scd,
            "hypothesis_label": res.hypothesis_label,
            "inlier_count": res.inlier_count,
        }
    return out


def load_config(config_path) -> tuple[dict, Path]:
    path = Path(config_path)
    raw = read_json(path, EVAL_SCHEMA)
    cfg = {**DEFAULTS, **raw}
    return cfg, path.parent


def run_evaluation(config_path, threads: int = 1, seed: int | None = None, db: ModelDatabase | None = None) -> EvalReport:
    """Evaluate every query in the configured set; ``seed`` overrides the config's root seed."""
    cfg, base = load_config(config_path)
    if seed is not None:
        cfg["seed"] = seed
    if db is None:
        db = open_database(base / cfg["database"], threads)
    if len(db) == 0:
        raise InputError("empty database", "empty_database")
    qpath = base / cfg["queries"]
    queries = read_json(qpath, QUERIES_SCHEMA)["queries"]
    seen = set()
    for q in queries:
        if q["id"] in seen:
            raise InputError(f"duplicate query id {q['id']!r}", "duplicate_id")
        seen.add(q["id"])
    cfg.setdefault("normalize_queries", db.normalize)
    m = cfg.get("precision_m", max(1, int(math.floor(0.1 * len(queries) + 0.5))))
    m = min(m, len(db))

    results = parallel_map(
        lambda iq: _evaluate_query(iq[0], iq[1], qpath.parent, db, cfg, m), list(enumerate(queries)), threads
    )
    records = {key: [r[key] for r in results] for key in ("retrieval",) + METHODS}
    aggregates, cdf = aggregate(records)
    return EvalReport(cfg, m, records, aggregates, cdf)
