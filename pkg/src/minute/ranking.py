"""Multi-video moment ranking.

Candidates from all retrieved videos compete in one pool. In
`shared_norm_additive` mode a candidate's score is the plain sum of its
video's retrieval score and its start/end logits, which ranks identically
to the full softmax-product probability because every candidate shares the
same three normalizers. The `baseline_exp` mode reproduces the prior-work
arm: per-video softmax probabilities scaled by exp(alpha * retrieval
score), which is the configuration that exhibits moment prediction bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Query, Video
from .localizer import FrameLogits, MomentLocalizer
from .retriever import VideoRetriever
from .vector_index import VectorIndex, top_k_mips

SCORING_MODES = ("shared_norm_additive", "baseline_exp")


@dataclass
class InferenceConfig:
    top_k: int = 10
    max_moment_len: int = 24
    min_moment_len: int = 1
    nms_iou: float = 0.7
    n_results: int = 100
    scoring_mode: str = "shared_norm_additive"
    baseline_alpha: float = 20.0

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must be in (0, 1)")
        if not 1 <= self.min_moment_len <= self.max_moment_len:
            raise ValueError("need 1 <= min_moment_len <= max_moment_len")
        if self.n_results < 1:
            raise ValueError("n_results must be >= 1")
        if self.scoring_mode not in SCORING_MODES:
            raise ValueError(f"scoring_mode must be one of {SCORING_MODES}")


@dataclass
class CandidateMoment:
    video_id: str
    video_rank: int  # 1-based rank within the retrieved top-K
    st_frame: int
    ed_frame: int
    retrieval_score: float
    st_logit: float
    ed_logit: float
    final_score: float


@dataclass
class RankedResult:
    query_id: str
    candidates: list[CandidateMoment]
    retrieved: list[tuple[str, float]]
    per_video_best: list[CandidateMoment] = field(default_factory=list)


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x)
    e = np.exp(x - m)
    return e / e.sum()


def retrieval_probability_topk(scores: Sequence[float]) -> np.ndarray:
    """Softmax over the K retrieved videos' scores; the rest of the corpus
    is treated as probability zero."""
    if len(scores) == 0:
        raise ValueError("no retrieval scores")
    return _stable_softmax(np.asarray(scores, dtype=np.float64))


def shared_norm_inference(logits: Sequence[FrameLogits]
                          ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Start/end probabilities normalized jointly across every finite frame
    position of all K videos; each family sums to 1 over the whole pool."""
    if len(logits) == 0:
        raise ValueError("no logits to normalize")
    all_st = np.concatenate([f.st_logits for f in logits])
    all_ed = np.concatenate([f.ed_logits for f in logits])

    def norm(flat: np.ndarray, family: str) -> np.ndarray:
        valid = np.isfinite(flat)
        if not valid.any():
            raise ValueError(f"all {family} positions are masked")
        m = flat[valid].max()
        e = np.where(valid, np.exp(np.where(valid, flat, m) - m), 0.0)
        return e / e.sum()

    p_st = norm(all_st, "st")
    p_ed = norm(all_ed, "ed")
    splits = np.cumsum([len(f.st_logits) for f in logits])[:-1]
    return list(zip(np.split(p_st, splits), np.split(p_ed, splits)))


def single_video_probabilities(frame_logits: FrameLogits) -> tuple[np.ndarray, np.ndarray]:
    """Per-video softmax over each logit family (the baseline's normalizer)."""
    def norm(flat: np.ndarray) -> np.ndarray:
        valid = np.isfinite(flat)
        if not valid.any():
            raise ValueError(f"{frame_logits.video_id}: all positions masked")
        m = flat[valid].max()
        e = np.where(valid, np.exp(np.where(valid, flat, m) - m), 0.0)
        return e / e.sum()
    return norm(frame_logits.st_logits), norm(frame_logits.ed_logits)


def score_candidate_additive(retrieval_score: float, st_logit: float, ed_logit: float) -> float:
    """Additive scoring: retrieval score plus raw start/end logits. Shared
    normalizers cancel, so this orders candidates exactly like the full
    probability without any exp/normalize work."""
    return retrieval_score + st_logit + ed_logit


def score_candidate_baseline(retrieval_score: float, st_prob: float, ed_prob: float,
                             alpha: float) -> float:
    """Prior two-stage scoring: exp(alpha * retrieval) times the per-video
    span probability."""
    return float(np.exp(alpha * retrieval_score) * st_prob * ed_prob)


def enumerate_spans(n_frames: int, min_len: int, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """All (st, ed) with st <= ed and length within [min_len, max_len]."""
    st, ed = np.meshgrid(np.arange(n_frames), np.arange(n_frames), indexing="ij")
    length = ed - st + 1
    keep = (length >= min_len) & (length <= max_len)
    return st[keep], ed[keep]


def _nms_per_video(st: np.ndarray, ed: np.ndarray, scores: np.ndarray,
                   iou_threshold: float) -> np.ndarray:
    """Greedy suppression within one video; returns kept indices in
    descending-score order (ties: st asc, ed asc)."""
    order = np.lexsort((ed, st, -scores))
    st, ed = st[order].astype(np.float64), ed[order].astype(np.float64)
    hi = ed + 1.0  # half-open interval end
    lengths = hi - st
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(order[i])
        rest = alive.copy()
        rest[: i + 1] = False
        idx = np.nonzero(rest)[0]
        if idx.size == 0:
            continue
        inter = np.minimum(hi[i], hi[idx]) - np.maximum(st[i], st[idx])
        inter = np.maximum(inter, 0.0)
        iou = inter / (lengths[i] + lengths[idx] - inter)
        alive[idx[iou > iou_threshold]] = False
    return np.asarray(kept, dtype=np.int64)


def enumerate_and_nms(per_video: list[dict], cfg: InferenceConfig) -> list[CandidateMoment]:
    """Pool every video's NMS survivors, sort by score (ties by video rank,
    then span), and truncate to n_results.

    `per_video` entries: {video_id, video_rank, retrieval_score,
    st (array), ed (array), final (array), st_logit (array), ed_logit (array)}.
    """
    pooled: list[CandidateMoment] = []
    for entry in per_video:
        keep = _nms_per_video(entry["st"], entry["ed"], entry["final"], cfg.nms_iou)
        for i in keep:
            pooled.append(CandidateMoment(
                video_id=entry["video_id"],
                video_rank=entry["video_rank"],
                st_frame=int(entry["st"][i]),
                ed_frame=int(entry["ed"][i]),
                retrieval_score=float(entry["retrieval_score"]),
                st_logit=float(entry["st_logit"][i]),
                ed_logit=float(entry["ed_logit"][i]),
                final_score=float(entry["final"][i]),
            ))
    pooled.sort(key=lambda c: (-c.final_score, c.video_rank, c.st_frame, c.ed_frame))
    return pooled[:cfg.n_results]


def score_video_candidates(frame_logits: FrameLogits, video_rank: int,
                           retrieval_score: float, cfg: InferenceConfig) -> dict:
    """Enumerate spans of one retrieved video and score them per the mode."""
    n = len(frame_logits.st_logits)
    st, ed = enumerate_spans(n, cfg.min_moment_len, cfg.max_moment_len)
    valid = np.isfinite(frame_logits.st_logits[st]) & np.isfinite(frame_logits.ed_logits[ed])
    st, ed = st[valid], ed[valid]
    st_logit = frame_logits.st_logits[st]
    ed_logit = frame_logits.ed_logits[ed]
    if cfg.scoring_mode == "shared_norm_additive":
        final = retrieval_score + st_logit + ed_logit
    else:
        # log of exp(alpha*S^R) * P_st * P_ed: same ordering, no overflow
        p_st, p_ed = single_video_probabilities(frame_logits)
        with np.errstate(divide="ignore"):
            final = cfg.baseline_alpha * retrieval_score + np.log(p_st[st]) + np.log(p_ed[ed])
    return {
        "video_id": frame_logits.video_id,
        "video_rank": video_rank,
        "retrieval_score": retrieval_score,
        "st": st,
        "ed": ed,
        "st_logit": st_logit,
        "ed_logit": ed_logit,
        "final": final,
    }


def rank_moments(query: Query, index: VectorIndex, retriever: VideoRetriever,
                 localizer: MomentLocalizer, videos_by_id: dict[str, Video],
                 cfg: InferenceConfig,
                 precomputed_logits: Optional[dict[str, FrameLogits]] = None) -> RankedResult:
    """Full per-query pipeline: retrieve top-K, localize in each video,
    score by the configured mode, pool and suppress.

    `precomputed_logits` lets callers share one localizer sweep between
    scoring modes (logits are mode-independent).
    """
    try:
        query_emb = retriever.encode_query(query)
        retrieved = top_k_mips(query_emb, index, cfg.top_k)
        cache = precomputed_logits if precomputed_logits is not None else {}
        missing = [vid for vid, _ in retrieved if vid not in cache]
        if missing:
            flogs = localizer.forward_many([videos_by_id[vid] for vid in missing], query)
            cache.update({vid: flog for vid, flog in zip(missing, flogs)})
        per_video = []
        for rank, (vid, score) in enumerate(retrieved, start=1):
            per_video.append(score_video_candidates(cache[vid], rank, score, cfg))
        candidates = enumerate_and_nms(per_video, cfg)
        per_video_best = []
        for entry in per_video:
            best = max(
                (c for c in candidates if c.video_id == entry["video_id"]),
                default=None, key=lambda c: c.final_score)
            if best is None:
                # survivor lists are per-video, so the video's best always
                # survives NMS; it can only be lost to global truncation
                keep = _nms_per_video(entry["st"], entry["ed"], entry["final"], cfg.nms_iou)
                i = keep[0]
                best = CandidateMoment(entry["video_id"], entry["video_rank"],
                                       int(entry["st"][i]), int(entry["ed"][i]),
                                       float(entry["retrieval_score"]),
                                       float(entry["st_logit"][i]),
                                       float(entry["ed_logit"][i]),
                                       float(entry["final"][i]))
            per_video_best.append(best)
        return RankedResult(query.query_id, candidates, retrieved, per_video_best)
    except Exception as e:
        e.args = (f"query {query.query_id}: {e}",) + e.args[1:]
        raise


def diagnostic_probabilities(retrieval_scores: Sequence[float],
                             logits: Sequence[FrameLogits]
                             ) -> list[dict]:
    """Full softmax-product probability of every span (retrieval softmax
    times jointly normalized start/end probabilities). Diagnostic only;
    the additive score ranks identically."""
    p_videos = retrieval_probability_topk(retrieval_scores)
    norms = shared_norm_inference(logits)
    out = []
    for v, (flog, (p_st, p_ed)) in enumerate(zip(logits, norms)):
        n = len(flog.st_logits)
        for j in range(n):
            for k in range(j, n):
                out.append({
                    "video_index": v,
                    "video_id": flog.video_id,
                    "st_frame": j,
                    "ed_frame": k,
                    "probability": float(p_videos[v] * p_st[j] * p_ed[k]),
                })
    return out
