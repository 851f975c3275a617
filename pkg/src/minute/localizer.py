"""Early-fusion moment localizer.

Per retrieved video: encode both modality streams, weight each frame's
image and subtitle representation by query-conditioned importance, fuse
per frame, run the fused frames jointly with the query tokens through a
multimodal transformer, and read start/end logits off two convolutional
heads. Training normalizes the ground-truth frame's probability across
the positive video and sampled hard negatives, which is what makes logits
comparable across videos at inference time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import nn
from .autodiff import (
    Tape,
    Tensor,
    add,
    concat,
    cross_entropy_from_logits,
    gather_rows,
    l2_normalize,
    matmul,
    mul,
    relu,
    reshape,
    slice_rows,
)
from .data import Moment, Query, Video
from .retriever import (
    encode_query_tokens,
    init_encoder_params,
    modular_pooling,
)
from .validation import check_moment_in_video, check_queries_have_ground_truth, check_videos

FRAME_CLASS = 0
QUERY_CLASS = 1


@dataclass
class FrameLogits:
    """Per-frame start/end logits; padding positions hold -inf."""

    video_id: str
    st_logits: np.ndarray
    ed_logits: np.ndarray

    def __post_init__(self):
        if self.st_logits.shape != self.ed_logits.shape:
            raise ValueError(f"{self.video_id}: start/end logit lengths differ")


def init_localizer_params(rng, d_img: int, d_sub: int, d_word: int, d_model: int,
                          max_len: int, mmt_layers: int = 3, conv_width: int = 3,
                          ff_mult: int = 4) -> dict:
    params = init_encoder_params(rng, d_img, d_sub, d_word, d_model, max_len,
                                 n_layers_video=1, n_layers_query=1, ff_mult=ff_mult)
    params.update({
        "mcm_w_img": nn.fan_in_uniform(rng, d_model, d_model),
        "mcm_w_sub": nn.fan_in_uniform(rng, d_model, d_model),
        "mcm_pool_img": nn.fan_in_uniform(rng, d_model, 1),
        "mcm_pool_sub": nn.fan_in_uniform(rng, d_model, 1),
        "fusion": nn.init_linear(rng, 2 * d_model, d_model),
        "class_emb": nn.normal_param(rng, 2, d_model),
        "mmt": {str(i): nn.init_transformer_layer(rng, d_model, ff_mult)
                for i in range(mmt_layers)},
        "head_st": {"c1": nn.init_conv1d(rng, conv_width, d_model, d_model),
                    "c2": nn.init_conv1d(rng, conv_width, d_model, 1)},
        "head_ed": {"c1": nn.init_conv1d(rng, conv_width, d_model, d_model),
                    "c2": nn.init_conv1d(rng, conv_width, d_model, 1)},
    })
    return params


def mcm_weight_channel(w_mat: Tensor, reps: Tensor, q_channel: Tensor) -> Tensor:
    """Importance p_j = (reps_j @ W) * q (elementwise); the weighted
    representation is l2_normalize(p_j) * reps_j."""
    importance = mul(matmul(reps, w_mat), q_channel)
    return mul(l2_normalize(importance, axis=-1), reps)


def encode_video_group(params: dict, videos: Sequence[Video], n_heads: int
                       ) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """Encode several videos in one pass with block-diagonal attention.

    Blocked attention weights are exact zeros, so each video's rows equal
    an independent single-video encoding; batching only amortizes the
    per-op overhead. Returns (image_reps, subtitle_reps) stacked over all
    videos plus the per-frame group ids and frame positions.
    """
    lens = [v.n_frames for v in videos]
    total = sum(lens)
    positions = np.concatenate([np.arange(n) for n in lens])
    if positions.size and positions.max() >= params["pos_emb"].shape[0]:
        raise ValueError(f"video length {max(lens)} exceeds positional table")
    groups = np.concatenate([np.full(n, i) for i, n in enumerate(lens)])
    img_feats = np.concatenate([v.image_features for v in videos])
    sub_feats = np.concatenate([v.subtitle_features for v in videos])
    sub_mask = np.concatenate([v.subtitle_mask for v in videos])

    from .retriever import IMAGE_TRACK, SUBTITLE_TRACK

    pos = gather_rows(params["pos_emb"], positions)
    img = add(add(nn.linear(params["proj_img"], Tensor(img_feats)), pos),
              reshape(gather_rows(params["mod_emb"], [IMAGE_TRACK]), (-1,)))
    sub = add(add(nn.linear(params["proj_sub"], Tensor(sub_feats)), pos),
              reshape(gather_rows(params["mod_emb"], [SUBTITLE_TRACK]), (-1,)))
    tokens = concat([img, sub], axis=0)
    tok_groups = np.concatenate([groups, groups])
    blocked_key = np.concatenate([np.zeros(total, dtype=bool), ~sub_mask])
    attn_mask = (tok_groups[:, None] != tok_groups[None, :]) | blocked_key[None, :]
    for layer in params["video_tfm"].values():
        tokens = nn.transformer_layer(layer, tokens, n_heads, attn_mask=attn_mask)
    return (slice_rows(tokens, 0, total), slice_rows(tokens, total, 2 * total),
            groups, positions)


def fuse_frames(p_fusion: dict, weighted_img: Tensor, weighted_sub: Tensor) -> Tensor:
    return nn.linear(p_fusion, concat([weighted_img, weighted_sub], axis=1))


def conv_head(p: dict, frames: Tensor) -> Tensor:
    hidden = relu(nn.conv1d(p["c1"], frames))
    return reshape(nn.conv1d(p["c2"], hidden), (-1,))


def localizer_group_logits(params: dict, videos: Sequence[Video], query: Query,
                           n_heads: int) -> list[tuple[Tensor, Tensor]]:
    """Differentiable start/end logits for every video of one query.

    The query is encoded once; the videos ride through the encoder and the
    multimodal transformer as one block-diagonal batch, with one copy of
    the query tokens per video so the deep interactions stay per-video.
    """
    if not videos:
        raise ValueError("need at least one video")
    img_reps, sub_reps, groups, positions = encode_video_group(params, videos, n_heads)
    words = encode_query_tokens(params, query, n_heads)
    q_img, _ = modular_pooling(params["mcm_pool_img"], words)
    q_sub, _ = modular_pooling(params["mcm_pool_sub"], words)
    weighted_img = mcm_weight_channel(params["mcm_w_img"], img_reps, q_img)
    weighted_sub = mcm_weight_channel(params["mcm_w_sub"], sub_reps, q_sub)
    fused = fuse_frames(params["fusion"], weighted_img, weighted_sub)

    frame_class = reshape(gather_rows(params["class_emb"], [FRAME_CLASS]), (-1,))
    query_class = reshape(gather_rows(params["class_emb"], [QUERY_CLASS]), (-1,))
    frame_tok = add(add(fused, gather_rows(params["pos_emb"], positions)), frame_class)
    query_tok = nn.add_position_and_type(words, params["pos_emb"], query_class)
    k = len(videos)
    n_words = words.shape[0]
    total = fused.shape[0]
    if k > 1:
        query_block = concat([query_tok] * k, axis=0)
    else:
        query_block = query_tok
    stream = concat([frame_tok, query_block], axis=0)
    attn_mask = None
    if k > 1:
        stream_groups = np.concatenate([groups, np.repeat(np.arange(k), n_words)])
        attn_mask = stream_groups[:, None] != stream_groups[None, :]
    for layer in params["mmt"].values():
        stream = nn.transformer_layer(layer, stream, n_heads, attn_mask=attn_mask)
    frames_out = slice_rows(stream, 0, total)  # query tokens attend, emit no logits
    out = []
    offset = 0
    for video in videos:
        rows = slice_rows(frames_out, offset, offset + video.n_frames)
        out.append((conv_head(params["head_st"], rows),
                    conv_head(params["head_ed"], rows)))
        offset += video.n_frames
    return out


def localizer_logits_t(params: dict, video: Video, query: Query,
                       n_heads: int) -> tuple[Tensor, Tensor]:
    """Differentiable start/end logits over one video's frames."""
    return localizer_group_logits(params, [video], query, n_heads)[0]


def localizer_forward(params: dict, video: Video, query: Query, n_heads: int,
                      true_length: Optional[int] = None) -> FrameLogits:
    """Inference logits; frames past `true_length` (batch padding) are fully
    masked: they never influence valid positions and carry -inf logits."""
    n = video.n_frames
    if true_length is None:
        true_length = n
    if not 1 <= true_length <= n:
        raise ValueError(f"true_length {true_length} invalid for {n} frames")
    core = video
    if true_length < n:
        core = Video(video.video_id, video.image_features[:true_length],
                     video.subtitle_features[:true_length],
                     video.subtitle_mask[:true_length], video.frame_duration_s)
    st_t, ed_t = localizer_logits_t(params, core, query, n_heads)
    st = np.full(n, -np.inf)
    ed = np.full(n, -np.inf)
    st[:true_length] = st_t.numpy().astype(np.float64)
    ed[:true_length] = ed_t.numpy().astype(np.float64)
    return FrameLogits(video.video_id, st, ed)


def localizer_forward_many(params: dict, videos: Sequence[Video], query: Query,
                           n_heads: int) -> list[FrameLogits]:
    """One grouped pass over all of a query's candidate videos."""
    pairs = localizer_group_logits(params, videos, query, n_heads)
    return [FrameLogits(v.video_id, st.numpy().astype(np.float64),
                        ed.numpy().astype(np.float64))
            for v, (st, ed) in zip(videos, pairs)]


def shared_norm_losses(positive_st: Tensor, positive_ed: Tensor, gt: Moment,
                       negatives: Sequence[tuple[Tensor, Tensor]]) -> tuple[Tensor, Tensor]:
    """Cross-entropy of the ground-truth start/end frame against the logits
    of ALL frames of the positive and negative videos pooled together."""
    n_pos = positive_st.shape[0]
    if not 0 <= gt.st_frame < n_pos or not 0 <= gt.ed_frame < n_pos:
        raise IndexError(
            f"ground-truth span [{gt.st_frame}, {gt.ed_frame}] outside {n_pos} frames")
    all_st = concat([positive_st] + [st for st, _ in negatives], axis=0)
    all_ed = concat([positive_ed] + [ed for _, ed in negatives], axis=0)
    loss_st = cross_entropy_from_logits(all_st, gt.st_frame)
    loss_ed = cross_entropy_from_logits(all_ed, gt.ed_frame)
    return loss_st, loss_ed


def sample_negatives(rng: np.random.Generator, ranklist: Sequence[str], positive_id: str,
                     n: int, pool: int) -> list[str]:
    """Uniform sample of n hard negatives from the top-`pool` ranked videos,
    excluding the positive; falls back to replacement when the pool is short."""
    candidates = [v for v in ranklist[:pool] if v != positive_id]
    if not candidates:
        raise ValueError(f"no negative candidates for positive video {positive_id}")
    if len(candidates) >= n:
        picks = rng.choice(len(candidates), size=n, replace=False)
    else:
        warnings.warn(
            f"only {len(candidates)} negative candidates for {positive_id}; "
            f"sampling {n} with replacement")
        picks = rng.choice(len(candidates), size=n, replace=True)
    return [candidates[i] for i in picks]


class MomentLocalizer(BaseEstimator):
    """Trainable early-fusion localizer with a fit/forward API."""

    def __init__(self, d_model: int = 64, n_heads: int = 4, ff_mult: int = 4,
                 max_len: int = 256, mmt_layers: int = 3, conv_width: int = 3,
                 n_negatives: int = 4, candidate_pool: int = 100,
                 epochs: int = 10, batch_size: int = 32,
                 lr: float = 1e-4, weight_decay: float = 0.01, seed: int = 0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.ff_mult = ff_mult
        self.max_len = max_len
        self.mmt_layers = mmt_layers
        self.conv_width = conv_width
        self.n_negatives = n_negatives
        self.candidate_pool = candidate_pool
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, videos: Sequence[Video], queries: Sequence[Query],
            ranklists: dict[str, list[str]], progress: Optional[callable] = None
            ) -> "MomentLocalizer":
        d_img, d_sub = check_videos(videos, max_len=self.max_len)
        check_queries_have_ground_truth(queries)
        d_word = queries[0].word_features.shape[1]
        by_id = {v.video_id: v for v in videos}
        for q in queries:
            if q.query_id not in ranklists:
                raise ValueError(f"query {q.query_id} missing from retriever rank lists")
            check_moment_in_video(q.ground_truth, by_id[q.ground_truth.video_id])
        rng = np.random.default_rng(self.seed)
        self.params_ = init_localizer_params(rng, d_img, d_sub, d_word, self.d_model,
                                             self.max_len, self.mmt_layers,
                                             self.conv_width, self.ff_mult)
        self.dims_ = {"d_img": d_img, "d_sub": d_sub, "d_word": d_word}
        flat = nn.flatten_params(self.params_)
        opt = nn.AdamW(flat, lr=self.lr, weight_decay=self.weight_decay)
        self.log_ = []
        n_queries = len(queries)
        for epoch in range(self.epochs):
            order = rng.permutation(n_queries)
            epoch_losses = []
            for start in range(0, n_queries, self.batch_size):
                batch = order[start:start + self.batch_size]
                opt.zero_grad()
                with Tape() as tape:
                    per_query = []
                    for qi in batch:
                        query = queries[qi]
                        gt = query.ground_truth
                        neg_ids = sample_negatives(rng, ranklists[query.query_id],
                                                   gt.video_id, self.n_negatives,
                                                   self.candidate_pool)
                        group = [by_id[gt.video_id]] + [by_id[nid] for nid in neg_ids]
                        logits = localizer_group_logits(self.params_, group, query,
                                                        self.n_heads)
                        loss_st, loss_ed = shared_norm_losses(
                            logits[0][0], logits[0][1], gt, logits[1:])
                        per_query.append(add(loss_st, loss_ed))
                    loss = nn.mean_of(per_query)
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"localizer training diverged at epoch {epoch}: loss={value}")
                tape.backward(loss)
                opt.step()
                epoch_losses.append(value)
            mean_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
            self.log_.append({"epoch": epoch, "loss": mean_loss})
            if progress:
                progress(epoch, mean_loss)
        nn.check_finite_params(flat, "localizer after training")
        return self

    def forward(self, video: Video, query: Query,
                true_length: Optional[int] = None) -> FrameLogits:
        return localizer_forward(self.params_, video, query, self.n_heads, true_length)

    def forward_many(self, videos: Sequence[Video], query: Query) -> list[FrameLogits]:
        return localizer_forward_many(self.params_, videos, query, self.n_heads)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        from .checkpoint import save_tensors

        flat = {k: t.data for k, t in nn.flatten_params(self.params_).items()}
        save_tensors(path, flat, {
            "kind": "localizer",
            "config": self.get_params(),
            "dims": self.dims_,
        })

    @classmethod
    def load(cls, path) -> "MomentLocalizer":
        from .checkpoint import CheckpointError, load_tensors

        tensors, footer = load_tensors(path)
        if footer.get("kind") != "localizer":
            raise CheckpointError(f"{path}: not a localizer checkpoint")
        model = cls(**footer["config"])
        model.params_ = nn.unflatten_params(tensors)
        model.dims_ = footer["dims"]
        model.log_ = []
        return model
