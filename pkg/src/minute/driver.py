"""Pipeline stages, run manifests, and the end-to-end experiment driver.

Every stage reads its inputs from disk and writes its outputs under one
--out-dir, so a run can resume from the earliest missing artifact. With a
fixed (config, seed) all artifacts are byte-identical across runs; only
the timings in the run manifest differ.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from importlib.metadata import PackageNotFoundError, version as pkg_version
from pathlib import Path

from sklearn.base import BaseEstimator

from .data import (
    Moment,
    SyntheticConfig,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
)
from .evaluation import BiasProfile, bias_profile, standard_report
from .localizer import MomentLocalizer
from .ranking import InferenceConfig, RankedResult, rank_moments
from .retriever import VideoRetriever
from .vector_index import build_index, load_index, save_index, top_k_mips

STAGES = ("gen-data", "train-retriever", "build-index", "train-localizer",
          "infer", "eval", "bias-report")


def tool_version() -> str:
    try:
        return pkg_version("minute")
    except PackageNotFoundError:
        return "0.0.0+source"


def n_workers() -> int:
    raw = os.environ.get("MINUTE_NUM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _corpus_manifest_path(cfg: dict, out_dir: Path) -> Path:
    if "corpus" in cfg:
        return Path(cfg["corpus"]["manifest"])
    return out_dir / "corpus" / "manifest.json"


def stage_outputs(cfg: dict, out_dir: Path) -> dict[str, list[Path]]:
    synthetic = "synthetic" in cfg
    return {
        "gen-data": [out_dir / "corpus" / "manifest.json"] if synthetic else [],
        "train-retriever": [out_dir / "retriever.ckpt"],
        "build-index": [out_dir / "index.ckpt", out_dir / "ranklists.jsonl"],
        "train-localizer": [out_dir / "localizer.ckpt"],
        "infer": [out_dir / f"predictions_{m}.jsonl" for m in
                  ("shared_norm_additive", "baseline_exp")]
                 + [out_dir / f"pervideo_{m}.jsonl" for m in
                    ("shared_norm_additive", "baseline_exp")],
        "eval": [out_dir / "eval_report.json", out_dir / "eval_report.csv"],
        "bias-report": [out_dir / "bias_report.json", out_dir / "bias_report.csv"],
    }


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------


def stage_gen_data(cfg: dict, out_dir: Path) -> None:
    if "synthetic" not in cfg:
        return  # external corpus, nothing to generate
    syn = SyntheticConfig(**cfg["synthetic"])
    manifest, videos, queries = generate_synthetic_corpus(syn, cfg["seed"])
    save_corpus(out_dir / "corpus", manifest, videos, queries)


def _load_all(cfg: dict, out_dir: Path):
    manifest_path = _corpus_manifest_path(cfg, out_dir)
    return load_corpus(manifest_path)


def stage_train_retriever(cfg: dict, out_dir: Path) -> None:
    _, videos, queries = _load_all(cfg, out_dir)
    m = cfg["model"]
    t = cfg["retriever_training"]
    retriever = VideoRetriever(
        d_model=m["d_model"], n_heads=m["n_heads"], ff_mult=m["ff_mult"],
        max_len=m["max_len"], epochs=t["epochs"], batch_size=t["batch_size"],
        lr=t["lr"], weight_decay=t["weight_decay"], seed=cfg["seed"] + 1)
    retriever.fit(videos, queries["train"])
    retriever.save(out_dir / "retriever.ckpt")


def stage_build_index(cfg: dict, out_dir: Path) -> None:
    _, videos, queries = _load_all(cfg, out_dir)
    retriever = VideoRetriever.load(out_dir / "retriever.ckpt")
    index = build_index(videos, retriever)
    save_index(out_dir / "index.ckpt", index)
    depth = max(cfg["localizer_training"]["candidate_pool"],
                cfg["inference"]["top_k"],
                max(cfg["evaluation"]["ks"], default=1))
    with open(out_dir / "ranklists.jsonl", "w") as f:
        for split in sorted(queries):
            for q in queries[split]:
                ranked = top_k_mips(retriever.encode_query(q), index, depth)
                f.write(json.dumps({
                    "query_id": q.query_id,
                    "split": split,
                    "video_ids": [vid for vid, _ in ranked],
                    "scores": [s for _, s in ranked],
                }, sort_keys=True) + "\n")


def read_ranklists(path: Path) -> dict[str, dict]:
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                out[row["query_id"]] = row
    return out


def stage_train_localizer(cfg: dict, out_dir: Path) -> None:
    _, videos, queries = _load_all(cfg, out_dir)
    ranklists = read_ranklists(out_dir / "ranklists.jsonl")
    m = cfg["model"]
    t = cfg["localizer_training"]
    localizer = MomentLocalizer(
        d_model=m["d_model"], n_heads=m["n_heads"], ff_mult=m["ff_mult"],
        max_len=m["max_len"], mmt_layers=m["mmt_layers"], conv_width=m["conv_width"],
        n_negatives=t["n_negatives"], candidate_pool=t["candidate_pool"],
        epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
        weight_decay=t["weight_decay"], seed=cfg["seed"] + 2)
    rank_ids = {qid: row["video_ids"] for qid, row in ranklists.items()}
    localizer.fit(videos, queries["train"], rank_ids)
    localizer.save(out_dir / "localizer.ckpt")


def _inference_config(cfg: dict, mode: str) -> InferenceConfig:
    inf = cfg["inference"]
    return InferenceConfig(
        top_k=inf["top_k"], max_moment_len=inf["max_moment_len"],
        min_moment_len=inf["min_moment_len"], nms_iou=inf["nms_iou"],
        n_results=inf["n_results"], scoring_mode=mode,
        baseline_alpha=inf["baseline_alpha"])


def prediction_rows(result: RankedResult) -> list[dict]:
    return [
        {
            "query_id": result.query_id,
            "rank": rank,
            "video_id": c.video_id,
            "st_frame": c.st_frame,
            "ed_frame": c.ed_frame,
            "score": c.final_score,
            "video_rank": c.video_rank,
        }
        for rank, c in enumerate(result.candidates, start=1)
    ]


def read_predictions(path: Path) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                out.setdefault(row["query_id"], []).append(row)
    for rows in out.values():
        rows.sort(key=lambda r: r.get("rank", 0))
    return out


def load_ground_truth(path: Path) -> dict[str, Moment]:
    """Read query JSONL keeping only the ground-truth moments (no features)."""
    out = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("video_id") is not None:
                out[row["query_id"]] = Moment(row["video_id"], int(row["st_frame"]),
                                              int(row["ed_frame"]))
    return out


def stage_infer(cfg: dict, out_dir: Path) -> None:
    _, videos, queries = _load_all(cfg, out_dir)
    retriever = VideoRetriever.load(out_dir / "retriever.ckpt")
    localizer = MomentLocalizer.load(out_dir / "localizer.ckpt")
    index = load_index(out_dir / "index.ckpt")
    videos_by_id = {v.video_id: v for v in videos}
    test_queries = queries["test"]
    modes = ("shared_norm_additive", "baseline_exp")
    icfgs = {m: _inference_config(cfg, m) for m in modes}

    def work(query):
        shared_logits = {}
        return {m: rank_moments(query, index, retriever, localizer, videos_by_id,
                                icfgs[m], precomputed_logits=shared_logits)
                for m in modes}

    workers = n_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, test_queries))
    else:
        results = [work(q) for q in test_queries]

    for mode in modes:
        with open(out_dir / f"predictions_{mode}.jsonl", "w") as f:
            for res in results:
                for row in prediction_rows(res[mode]):
                    f.write(json.dumps(row, sort_keys=True) + "\n")
        with open(out_dir / f"pervideo_{mode}.jsonl", "w") as f:
            for res in results:
                for c in res[mode].per_video_best:
                    f.write(json.dumps({
                        "query_id": res[mode].query_id,
                        "video_id": c.video_id,
                        "video_rank": c.video_rank,
                        "st_frame": c.st_frame,
                        "ed_frame": c.ed_frame,
                        "score": c.final_score,
                    }, sort_keys=True) + "\n")


def _test_ground_truth(cfg: dict, out_dir: Path) -> dict[str, Moment]:
    manifest_path = _corpus_manifest_path(cfg, out_dir)
    manifest_dir = manifest_path.parent
    with open(manifest_path) as f:
        doc = json.load(f)
    rel = doc["query_files"].get("test") or next(iter(doc["query_files"].values()))
    return load_ground_truth(manifest_dir / rel)


def stage_eval(cfg: dict, out_dir: Path) -> None:
    gt = _test_ground_truth(cfg, out_dir)
    ranklists = read_ranklists(out_dir / "ranklists.jsonl")
    rank_ids = {qid: row["video_ids"] for qid, row in ranklists.items()}
    ev = cfg["evaluation"]
    report_doc = {}
    for mode in ("shared_norm_additive", "baseline_exp"):
        predictions = read_predictions(out_dir / f"predictions_{mode}.jsonl")
        report = standard_report(predictions, rank_ids, gt,
                                 ks=ev["ks"], ious=ev["ious"], strict=ev["strict_iou"],
                                 config={"scoring_mode": mode})
        report_doc[mode] = json.loads(report.to_json())
        report.write_csv(out_dir / f"eval_report_{mode}.csv")
    with open(out_dir / "eval_report.json", "w") as f:
        json.dump(report_doc, f, sort_keys=True, indent=1)
        f.write("\n")
    # flat CSV over both modes
    import csv as _csv

    with open(out_dir / "eval_report.csv", "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["mode", "task", "k", "iou", "percent"])
        for mode, doc in sorted(report_doc.items()):
            for m in doc["metrics"]:
                writer.writerow([mode, m["task"], m["k"],
                                 "" if m["iou"] is None else m["iou"],
                                 f"{m['percent']:.6f}"])


def stage_bias_report(cfg: dict, out_dir: Path) -> None:
    gt = _test_ground_truth(cfg, out_dir)
    ev = cfg["evaluation"]
    k_max = cfg["inference"]["top_k"]
    doc = {}
    profiles: dict[str, BiasProfile] = {}
    for mode in ("shared_norm_additive", "baseline_exp"):
        per_video = read_predictions(out_dir / f"pervideo_{mode}.jsonl")
        profile = bias_profile(per_video, gt, k_max=k_max,
                               k_values=ev["bias_k_values"], iou_threshold=ev["bias_iou"])
        profiles[mode] = profile
        doc[mode] = json.loads(profile.to_json())
    with open(out_dir / "bias_report.json", "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    import csv as _csv

    with open(out_dir / "bias_report.csv", "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["mode", "quantity", "x", "value"])
        for mode, profile in sorted(profiles.items()):
            for r, frac in enumerate(profile.rank_fractions, start=1):
                writer.writerow([mode, "top1_source_fraction", r, f"{frac:.6f}"])
            for k in sorted(profile.r1_vs_k):
                writer.writerow([mode, "vcmr_r1_vs_k", k, f"{profile.r1_vs_k[k]:.6f}"])


_STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train-retriever": stage_train_retriever,
    "build-index": stage_build_index,
    "train-localizer": stage_train_localizer,
    "infer": stage_infer,
    "eval": stage_eval,
    "bias-report": stage_bias_report,
}


def run_stage(name: str, cfg: dict, out_dir: Path) -> float:
    start = time.perf_counter()
    try:
        _STAGE_FUNCS[name](cfg, out_dir)
    except Exception as e:
        raise RuntimeError(f"stage {name} failed: {e}") from e
    return time.perf_counter() - start


def run_all(cfg: dict, out_dir: Path, resume: bool = True) -> dict:
    """Run every stage (resuming from the earliest missing artifact) and
    write the run manifest. Returns the manifest document."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = stage_outputs(cfg, out_dir)
    start_at = 0
    if resume:
        for i, stage in enumerate(STAGES):
            if any(not p.exists() for p in outputs[stage]):
                start_at = i
                break
        else:
            start_at = len(STAGES)
    else:
        start_at = 0
    timings = {}
    for stage in STAGES[start_at:]:
        timings[stage] = run_stage(stage, cfg, out_dir)
    artifacts = {}
    for stage in STAGES:
        for path in outputs[stage]:
            artifacts[str(path.relative_to(out_dir)) if path.is_relative_to(out_dir)
                      else str(path)] = sha256_file(path)
    with open(out_dir / "eval_report.json") as f:
        eval_doc = json.load(f)
    with open(out_dir / "bias_report.json") as f:
        bias_doc = json.load(f)
    manifest = {
        "tool_version": tool_version(),
        "config": cfg,
        "seed": cfg["seed"],
        "artifacts": artifacts,
        "metrics": {"eval": eval_doc, "bias": bias_doc},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    tmp = out_dir / "run_manifest.json.tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    os.replace(tmp, out_dir / "run_manifest.json")
    return manifest


class MomentRetrievalPipeline(BaseEstimator):
    """End-to-end estimator: fit trains both stages on a corpus, predict
    ranks moments for new queries. A thin in-memory face over the staged
    pipeline for programmatic use."""

    def __init__(self, d_model: int = 32, n_heads: int = 4, ff_mult: int = 4,
                 max_len: int = 128, mmt_layers: int = 3, conv_width: int = 3,
                 retriever_epochs: int = 30, localizer_epochs: int = 10,
                 batch_size: int = 32, lr: float = 1e-3, weight_decay: float = 0.01,
                 n_negatives: int = 4, candidate_pool: int = 100,
                 top_k: int = 10, max_moment_len: int = 24, nms_iou: float = 0.7,
                 n_results: int = 100, scoring_mode: str = "shared_norm_additive",
                 baseline_alpha: float = 20.0, seed: int = 0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.ff_mult = ff_mult
        self.max_len = max_len
        self.mmt_layers = mmt_layers
        self.conv_width = conv_width
        self.retriever_epochs = retriever_epochs
        self.localizer_epochs = localizer_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.n_negatives = n_negatives
        self.candidate_pool = candidate_pool
        self.top_k = top_k
        self.max_moment_len = max_moment_len
        self.nms_iou = nms_iou
        self.n_results = n_results
        self.scoring_mode = scoring_mode
        self.baseline_alpha = baseline_alpha
        self.seed = seed

    def fit(self, videos, queries) -> "MomentRetrievalPipeline":
        self.retriever_ = VideoRetriever(
            d_model=self.d_model, n_heads=self.n_heads, ff_mult=self.ff_mult,
            max_len=self.max_len, epochs=self.retriever_epochs,
            batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
            seed=self.seed + 1).fit(videos, queries)
        self.index_ = build_index(videos, self.retriever_)
        depth = max(self.candidate_pool, self.top_k)
        ranklists = {}
        for q in queries:
            ranked = top_k_mips(self.retriever_.encode_query(q), self.index_, depth)
            ranklists[q.query_id] = [vid for vid, _ in ranked]
        self.localizer_ = MomentLocalizer(
            d_model=self.d_model, n_heads=self.n_heads, ff_mult=self.ff_mult,
            max_len=self.max_len, mmt_layers=self.mmt_layers,
            conv_width=self.conv_width, n_negatives=self.n_negatives,
            candidate_pool=self.candidate_pool, epochs=self.localizer_epochs,
            batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
            seed=self.seed + 2).fit(videos, queries, ranklists)
        self.videos_by_id_ = {v.video_id: v for v in videos}
        return self

    def predict(self, queries) -> list[RankedResult]:
        cfg = InferenceConfig(
            top_k=self.top_k, max_moment_len=self.max_moment_len,
            nms_iou=self.nms_iou, n_results=self.n_results,
            scoring_mode=self.scoring_mode, baseline_alpha=self.baseline_alpha)
        return [rank_moments(q, self.index_, self.retriever_, self.localizer_,
                             self.videos_by_id_, cfg) for q in queries]
