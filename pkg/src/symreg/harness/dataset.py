"""Write a synthetic model database, query set and evaluation config to disk."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from symreg.features import write_features
from symreg.geometry import to_ncc
from symreg.harness.synthetic import DEFAULT_SHAPE, FAMILIES, SyntheticSpec, generate_synthetic, surrogate_features
from symreg.io import write_ply
from symreg.retrieval import read_json

SYNTH_SCHEMA = {
    "type": "object",
    "required": ["family"],
    "additionalProperties": False,
    "properties": {
        "family": {"enum": list(FAMILIES)},
        "symmetry_classes": {"enum": [1, 2, 4]},
        "shape_params": {"type": "object", "additionalProperties": {"type": "number", "exclusiveMinimum": 0}},
        "points": {"type": "integer", "minimum": 8},
        "noise_sigma": {"type": "number", "minimum": 0},
        "occlusion_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "models": {"type": "integer", "minimum": 1},
        "queries": {"type": "integer", "minimum": 1},
        "shape_jitter": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "translation_scale": {"type": "number", "minimum": 0},
        "features": {"enum": ["fpfh", "surrogate"]},
        "bandwidth": {"type": "number", "exclusiveMinimum": 0},
        "fpfh": {
            "type": "object",
            "properties": {
                "normal_radius": {"type": "number", "exclusiveMinimum": 0},
                "feature_radius": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "evaluation": {"type": "object"},
    },
}

SYNTH_DEFAULTS = {
    "symmetry_classes": 2,
    "shape_params": {},
    "points": 1024,
    "noise_sigma": 0.0,
    "occlusion_fraction": 0.0,
    "models": 10,
    "queries": 10,
    "shape_jitter": 0.1,
    "translation_scale": 0.2,
    "features": "fpfh",
    "bandwidth": 0.15,
}


def load_synth_spec(path) -> dict:
    return {**SYNTH_DEFAULTS, **read_json(path, SYNTH_SCHEMA)}


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_dataset(spec: dict, out_dir, seed: int = 0) -> dict:
    """Generate models (canonical frame, clean) and posed, noisy, occluded query scans of them.

    Query ``i`` scans model ``i mod models``. Model shapes jitter every
    shape parameter by up to ``shape_jitter`` (relative). Returns the
    manifest document.
    """
    spec = {**SYNTH_DEFAULTS, **spec}
    out = Path(out_dir)
    for sub in ("models", "queries"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    family, g = spec["family"], spec["symmetry_classes"]
    base = {**DEFAULT_SHAPE[family], **spec["shape_params"]}
    surrogate = spec["features"] == "surrogate"
    # one feature seed for the whole dataset so every cloud lives in the same feature space
    feature_seed = int(np.random.SeedSequence([seed, 3]).generate_state(1)[0])

    models, params = [], []
    for j in range(spec["models"]):
        rng = np.random.default_rng([seed, 2, j])
        p = {k: v * rng.uniform(1 - spec["shape_jitter"], 1 + spec["shape_jitter"]) for k, v in sorted(base.items())}
        params.append(p)
        mid = f"model_{j:03d}"
        obj = generate_synthetic(SyntheticSpec(family, g, p, spec["points"], seed=seed * 7919 + 2 * j, rotate=False), mid)
        rec = {"id": mid, "cloud_path": f"models/{mid}.ply", "symmetry_classes": g}
        write_ply(out / rec["cloud_path"], obj.cloud)
        if surrogate:
            rec["feature_path"] = f"models/{mid}.crsf"
            write_features(out / rec["feature_path"], surrogate_features(obj.cloud.points, g, bandwidth=spec["bandwidth"], seed=feature_seed))
        models.append(rec)
    manifest = {"category": family, "models": models}
    if "fpfh" in spec:
        manifest["fpfh"] = spec["fpfh"]
    _dump(out / "manifest.json", manifest)

    queries = []
    for i in range(spec["queries"]):
        j = i % spec["models"]
        qid = f"query_{i:03d}"
        obj = generate_synthetic(
            SyntheticSpec(
                family, g, params[j], spec["points"], spec["noise_sigma"], spec["occlusion_fraction"],
                seed=seed * 7919 + 2 * i + 1, translation_scale=spec["translation_scale"],
            ),
            qid,
        )
        rec = {"id": qid, "cloud_path": f"queries/{qid}.ply", "model_id": models[j]["id"], "pose": obj.pose.to_dict()}
        write_ply(out / rec["cloud_path"], obj.cloud)
        if surrogate:
            rec["feature_path"] = f"queries/{qid}.crsf"
            canon = to_ncc(obj.cloud, obj.pose).points
            write_features(out / rec["feature_path"], surrogate_features(canon, g, bandwidth=spec["bandwidth"], seed=feature_seed))
        queries.append(rec)
    _dump(out / "queries.json", {"queries": queries})
    _dump(out / "eval.json", {"database": "manifest.json", "queries": "queries.json", "seed": seed, **spec.get("evaluation", {})})
    return manifest
