"""Recall metrics and the moment-prediction-bias profiler.

Prediction rows are plain dicts (the JSONL schema): video_id, st_frame,
ed_frame, score, video_rank. A hit requires the right video AND span IoU
at or above the threshold (>= by convention; strict > behind a flag).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .data import Moment, temporal_iou

log = logging.getLogger(__name__)

TASKS = ("vcmr", "svmr")


def _is_hit(row: Mapping, gt: Moment, iou_threshold: float, strict: bool) -> bool:
    if row["video_id"] != gt.video_id:
        return False
    iou = temporal_iou((int(row["st_frame"]), int(row["ed_frame"])),
                       (gt.st_frame, gt.ed_frame))
    return iou > iou_threshold if strict else iou >= iou_threshold


def recall_at_k_iou(predictions: Mapping[str, Sequence[Mapping]],
                    ground_truth: Mapping[str, Moment],
                    task: str = "vcmr", k: int = 1, iou_threshold: float = 0.7,
                    strict: bool = False) -> float:
    """Percentage of queries with at least one hit in the top-K predictions.

    svmr restricts each query's list to its ground-truth video before
    taking the top-K (per-video scores are unchanged by the restriction).
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if not ground_truth:
        raise ValueError("no ground-truth queries")
    hits = 0
    for qid, gt in ground_truth.items():
        rows = predictions.get(qid)
        if rows is None:
            log.warning("query %s missing from predictions; counted as miss", qid)
            continue
        if task == "svmr":
            rows = [r for r in rows if r["video_id"] == gt.video_id]
        if any(_is_hit(r, gt, iou_threshold, strict) for r in rows[:k]):
            hits += 1
    return 100.0 * hits / len(ground_truth)


def vr_recall_at_k(ranklists: Mapping[str, Sequence[str]],
                   ground_truth: Mapping[str, Moment], k: int = 1) -> float:
    """Percentage of queries whose ground-truth video is retrieved in the top-K."""
    if not ground_truth:
        raise ValueError("no ground-truth queries")
    hits = 0
    for qid, gt in ground_truth.items():
        ranked = ranklists.get(qid)
        if ranked is None:
            log.warning("query %s missing from rank lists; counted as miss", qid)
            continue
        if gt.video_id in list(ranked)[:k]:
            hits += 1
    return 100.0 * hits / len(ground_truth)


@dataclass
class EvalReport:
    metrics: list[dict] = field(default_factory=list)  # {task, k, iou, percent}
    n_queries: int = 0
    config: dict = field(default_factory=dict)

    def add(self, task: str, k: int, iou: float | None, percent: float) -> None:
        if not 0.0 <= percent <= 100.0:
            raise ValueError(f"percentage out of range: {percent}")
        self.metrics.append({"task": task, "k": k, "iou": iou, "percent": percent})

    def lookup(self, task: str, k: int, iou: float | None) -> float:
        for m in self.metrics:
            if m["task"] == task and m["k"] == k and m["iou"] == iou:
                return m["percent"]
        raise KeyError(f"no metric for ({task}, {k}, {iou})")

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics, "n_queries": self.n_queries,
                           "config": self.config}, sort_keys=True, indent=1)

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["task", "k", "iou", "percent"])
            for m in self.metrics:
                writer.writerow([m["task"], m["k"],
                                 "" if m["iou"] is None else m["iou"], f"{m['percent']:.6f}"])


def standard_report(predictions: Mapping[str, Sequence[Mapping]],
                    ranklists: Mapping[str, Sequence[str]],
                    ground_truth: Mapping[str, Moment],
                    ks: Sequence[int] = (1, 5, 10, 100),
                    ious: Sequence[float] = (0.5, 0.7),
                    strict: bool = False,
                    config: dict | None = None) -> EvalReport:
    report = EvalReport(n_queries=len(ground_truth), config=config or {})
    for task in TASKS:
        for iou in ious:
            for k in ks:
                report.add(task, k, iou,
                           recall_at_k_iou(predictions, ground_truth, task, k, iou, strict))
    for k in ks:
        report.add("vr", k, None, vr_recall_at_k(ranklists, ground_truth, k))
    return report


# ---------------------------------------------------------------------------
# Moment prediction bias
# ---------------------------------------------------------------------------


def _candidate_order(row: Mapping) -> tuple:
    return (-row["score"], row["video_rank"], row["st_frame"], row["ed_frame"])


@dataclass
class BiasProfile:
    """Where do top-1 predictions come from, and does accuracy grow with K?

    rank_fractions[r-1] is the fraction of queries whose best-scoring
    candidate sits in the rank-r retrieved video; r1_vs_k maps K to VCMR
    R@1 when only the top-K retrieved videos are allowed to compete.
    """

    k_max: int
    rank_fractions: list[float]
    r1_vs_k: dict[int, float]
    iou_threshold: float
    n_queries: int

    def to_json(self) -> str:
        return json.dumps({
            "k_max": self.k_max,
            "rank_fractions": self.rank_fractions,
            "r1_vs_k": {str(k): v for k, v in sorted(self.r1_vs_k.items())},
            "iou_threshold": self.iou_threshold,
            "n_queries": self.n_queries,
        }, sort_keys=True, indent=1)

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["quantity", "x", "value"])
            for r, frac in enumerate(self.rank_fractions, start=1):
                writer.writerow(["top1_source_fraction", r, f"{frac:.6f}"])
            for k in sorted(self.r1_vs_k):
                writer.writerow(["vcmr_r1_vs_k", k, f"{self.r1_vs_k[k]:.6f}"])


def bias_profile(per_video_best: Mapping[str, Sequence[Mapping]],
                 ground_truth: Mapping[str, Moment],
                 k_max: int,
                 k_values: Sequence[int] = (1, 2, 5, 10),
                 iou_threshold: float = 0.5) -> BiasProfile:
    """Profile computed from each query's per-retrieved-video best candidate.

    Candidate scores do not depend on how many videos compete in either
    scoring mode, so restricting to video_rank <= K is exactly the K-video
    run; no re-localization is needed.
    """
    if not ground_truth:
        raise ValueError("no ground-truth queries")
    counts = [0] * k_max
    r1_hits = {k: 0 for k in k_values if k <= k_max}
    for qid, gt in ground_truth.items():
        rows = per_video_best.get(qid)
        if not rows:
            continue
        top = min(rows, key=_candidate_order)
        if 1 <= top["video_rank"] <= k_max:
            counts[top["video_rank"] - 1] += 1
        for k in r1_hits:
            eligible = [r for r in rows if r["video_rank"] <= k]
            if not eligible:
                continue
            best = min(eligible, key=_candidate_order)
            if _is_hit(best, gt, iou_threshold, strict=False):
                r1_hits[k] += 1
    n = len(ground_truth)
    return BiasProfile(
        k_max=k_max,
        rank_fractions=[c / n for c in counts],
        r1_vs_k={k: 100.0 * h / n for k, h in r1_hits.items()},
        iou_threshold=iou_threshold,
        n_queries=n,
    )
