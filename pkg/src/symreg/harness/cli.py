"""Command-line entry point: ``symreg <command> ...``.

Exit codes: 0 success, 2 bad input, 3 numerical degeneracy.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from symreg.errors import DegeneracyError, InputError, SymregError
from symreg.features import FeatureSet, extract_fpfh, load_features, write_features
from symreg.geometry import Pose, normalize_cloud
from symreg.harness.dataset import load_synth_spec, write_dataset
from symreg.harness.evaluate import run_evaluation
from symreg.io import read_cloud, write_crsf, write_ply
from symreg.registration import RansacParams, SymmetryParams, symmetry_aware_register
from symreg.retrieval import build_database, describe_cloud, load_embedding, open_database, retrieve
from symreg.symmetry import symmetry_split


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def _kv_table(doc: dict) -> str:
    return _table([["key", "value"]] + [[k, json.dumps(doc[k])] for k in sorted(doc)])


def _ingest(path, normalize: bool, id: str | None = None):
    raw = read_cloud(path, id=id)
    cloud, norm = normalize_cloud(raw) if normalize else (raw, Pose())
    return raw, cloud, norm


def cmd_synth(args) -> str:
    spec = load_synth_spec(args.spec)
    seed = args.seed if args.seed is not None else spec.get("seed", 0)
    manifest = write_dataset(spec, args.out, seed)
    doc = {"out": str(args.out), "models": len(manifest["models"]), "queries": spec["queries"], "seed": seed}
    return _json(doc) if args.format == "json" else _kv_table(doc)


def cmd_extract(args) -> str:
    _, cloud, _ = _ingest(args.cloud, not args.no_normalize)
    feats, emb = describe_cloud(cloud, args.normal_radius, args.feature_radius)
    write_features(args.out, feats)
    doc = {"points": len(cloud), "dim": feats.dim, "features": str(args.out)}
    if args.embedding_out:
        write_crsf(args.embedding_out, emb.vector[None])
        doc["embedding"] = str(args.embedding_out)
    return _json(doc) if args.format == "json" else _kv_table(doc)


def cmd_index(args) -> str:
    manifest = Path(args.manifest)
    out = args.out if args.out else manifest.parent / f"{manifest.stem}.index"
    db = build_database(manifest, out, split_seed=args.seed or 0, threads=args.threads)
    doc = {"index": str(out), "entries": len(db), "category": db.category}
    return _json(doc) if args.format == "json" else _kv_table(doc)


def _query_descriptors(args, cloud, normal_radius, feature_radius):
    feats = load_features(args.features, len(cloud)) if args.features else None
    emb = load_embedding(args.embedding) if getattr(args, "embedding", None) else None
    return describe_cloud(cloud, normal_radius, feature_radius, feats, emb)


def cmd_retrieve(args) -> str:
    db = open_database(args.database, args.threads)
    _, cloud, _ = _ingest(args.query, db.normalize if not args.no_normalize else False)
    _, emb = _query_descriptors(args, cloud, db.normal_radius, db.feature_radius)
    ranked = retrieve(emb, db, min(args.m, len(db)))
    rows = [{"rank": r, "id": i, "distance": d} for r, (i, d) in enumerate(ranked, start=1)]
    if args.format == "json":
        return _json({"query": str(args.query), "results": rows})
    return _table([["rank", "id", "distance"]] + [[str(r["rank"]), r["id"], f"{r['distance']:.9g}"] for r in rows])


def cmd_register(args) -> str:
    normalize = not args.no_normalize
    _, query, qnorm = _ingest(args.query, normalize, "query")
    _, model, mnorm = _ingest(args.model, normalize, "model")
    nr, fr = args.normal_radius, args.feature_radius
    qf = load_features(args.query_features, len(query)) if args.query_features else extract_fpfh(query, nr, fr)
    mf = load_features(args.model_features, len(model)) if args.model_features else extract_fpfh(model, nr, fr)
    seed = args.seed or 0
    ransac = RansacParams(iterations=args.iterations, inlier_threshold=args.inlier_threshold, seed=seed)
    symmetry = SymmetryParams(seed=seed)
    g = args.symmetry
    qsplit = msplit = None
    if g >= 2:
        qsplit = _try_split(query, qf, g, seed, args.threads)
        msplit = _try_split(model, mf, g, seed, args.threads)
    result = symmetry_aware_register(
        query, qf, model, mf, g, args.k, ransac, symmetry, qsplit, msplit, args.threads,
    )
    if args.labels_out:
        if qsplit is None:
            raise InputError("--labels-out needs --symmetry G >= 2 and a valid query split", "bad_params")
        write_ply(args.labels_out, query, labels=qsplit.assignment)
    doc = result.to_dict()
    # pose between the clouds as given on disk (a similarity when normalization rescaled them)
    doc["input_frame_pose"] = qnorm.compose(result.pose).compose(mnorm.inverse()).to_dict()
    return _json(doc) if args.format == "json" else _kv_table(doc)


def _try_split(cloud, feats: FeatureSet, g: int, seed: int, threads: int):
    try:
        return symmetry_split(cloud, feats, g, seed=seed, threads=threads)
    except DegeneracyError:
        return None


def cmd_evaluate(args) -> str:
    report = run_evaluation(args.config, threads=args.threads, seed=args.seed)
    text = report.to_json() + "\n" if args.format == "json" else report.to_table()
    if args.out:
        Path(args.out).write_text(text)
    return text


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="root random seed (default: config value or 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    p.add_argument("--format", choices=("json", "table"), default="json")
    return p


def _fpfh_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--normal-radius", type=float, default=0.1)
    p.add_argument("--feature-radius", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="symreg", description="Symmetry-aware shape retrieval and registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset from a spec file")
    p.add_argument("spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", parents=[common], help="compute FPFH features of a cloud")
    p.add_argument("cloud")
    p.add_argument("--out", required=True, help="CRSF feature file")
    p.add_argument("--embedding-out", help="also write the pooled embedding as CRSF")
    p.add_argument("--no-normalize", action="store_true")
    _fpfh_args(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("index", parents=[common], help="build a model database from a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="index directory (default: <manifest>.index beside the manifest)")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", parents=[common], help="rank database models for a query cloud")
    p.add_argument("query")
    p.add_argument("database", help="index directory or manifest")
    p.add_argument("-m", type=int, default=5, help="number of results")
    p.add_argument("--features", help="CRSF local features of the query")
    p.add_argument("--embedding", help="CRSF embedding of the query (one row)")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("register", parents=[common], help="estimate the pose of a model in a query cloud")
    p.add_argument("query")
    p.add_argument("model")
    p.add_argument("--symmetry", type=int, default=1, metavar="G", help="number of symmetry classes")
    p.add_argument("--query-features")
    p.add_argument("--model-features")
    p.add_argument("-k", type=int, default=5, help="feature neighbours per query point")
    p.add_argument("--iterations", type=int, default=10_000)
    p.add_argument("--inlier-threshold", type=float, default=0.05)
    p.add_argument("--labels-out", help="write the query with per-point symmetry labels as PLY")
    p.add_argument("--no-normalize", action="store_true")
    _fpfh_args(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", parents=[common], help="run an evaluation config")
    p.add_argument("config")
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise InputError("--threads must be >= 1", "bad_params")
        out = args.func(args)
    except SymregError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [io_error]: {exc}", file=sys.stderr)
        return InputError.exit_code
    sys.stdout.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
