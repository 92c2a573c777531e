"""Retrieval and registration metrics plus the report aggregates built from them."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from symreg.errors import InputError
from symreg.geometry import PointCloud, chamfer

RRE_THRESHOLDS_DEG = (5.0, 15.0, 45.0)
RTE_THRESHOLDS = (0.03, 0.05, 0.10)
RRE_CDF_GRID_DEG = tuple(float(x) for x in range(0, 181, 5))
RTE_CDF_GRID = tuple(round(0.01 * i, 2) for i in range(0, 51))


def precision_at_m(retrieved: Sequence[str], positive_set: Iterable[str], m: int) -> float:
    """Fraction of the first ``m`` retrieved ids that are positives."""
    if m < 1:
        raise InputError(f"m must be >= 1, got {m}", "bad_params")
    if len(retrieved) < m:
        raise InputError(f"need at least m={m} retrieved ids, got {len(retrieved)}", "bad_params")
    pos = set(positive_set)
    return sum(1 for r in retrieved[:m] if r in pos) / m


def top1_cd(query: PointCloud, retrieved_top1: PointCloud, oracle_top1: PointCloud) -> float:
    """How much worse (in Chamfer distance) the retrieved model is than the best one."""
    return abs(chamfer(query, retrieved_top1) - chamfer(query, oracle_top1))


def fraction_within(values: Sequence[float], threshold: float) -> float:
    if not len(values):
        return None
    return sum(1 for v in values if v <= threshold) / len(values)


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if len(values) else None


def _median(values: Sequence[float]) -> float:
    return float(np.median(values)) if len(values) else None


def _threshold_key(prefix: str, thr: float) -> str:
    return f"{prefix}<={thr:g}"


def registration_summary(records: Sequence[dict]) -> dict:
    """Aggregates over the records of one method; records lacking ground truth only count toward SCD."""
    rre_deg = [math.degrees(r["rre"]) for r in records if r["rre"] is not None]
    rte = [r["rte"] for r in records if r["rte"] is not None]
    out = {
        "cases": len(records),
        "cases_with_ground_truth": len(rre_deg),
        "median_rre_deg": _median(rre_deg),
        "median_rte": _median(rte),
        "mean_scd": _mean([r["scd"] for r in records]),
    }
    for t in RRE_THRESHOLDS_DEG:
        out[_threshold_key("rre_deg", t)] = fraction_within(rre_deg, t)
    for t in RTE_THRESHOLDS:
        out[_threshold_key("rte", t)] = fraction_within(rte, t)
    return out


def cdf_columns(records: Sequence[dict]) -> dict:
    """Fraction of cases at or below each grid value, for plotting error CDFs."""
    rre_deg = [math.degrees(r["rre"]) for r in records if r["rre"] is not None]
    rte = [r["rte"] for r in records if r["rte"] is not None]
    return {
        "rre_deg": {"grid": list(RRE_CDF_GRID_DEG), "fraction": [fraction_within(rre_deg, t) for t in RRE_CDF_GRID_DEG]},
        "rte": {"grid": list(RTE_CDF_GRID), "fraction": [fraction_within(rte, t) for t in RTE_CDF_GRID]},
    }


def retrieval_summary(records: Sequence[dict]) -> dict:
    return {
        "precision_at_m": _mean([r["precision_at_m"] for r in records]),
        "top1_cd": _mean([r["top1_cd"] for r in records]),
    }
