"""Late-fusion video retriever.

A one-layer multimodal transformer encodes each video's image and subtitle
streams jointly; a one-layer transformer encodes the query, which is pooled
into two channel-specific vectors by learned softmax pooling. The
query-video score is the average of the per-channel max-pooled inner
products, and training is InfoNCE over in-batch negatives.
"""

from __future__ import annotations

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
    gather_rows,
    log_softmax,
    matmul,
    max_axis,
    mul,
    reshape,
    scale,
    slice_rows,
    softmax,
    sum_all,
    transpose,
)
from .data import Query, Video
from .validation import check_queries_have_ground_truth, check_videos

IMAGE_TRACK = 0
SUBTITLE_TRACK = 1


@dataclass
class VideoEmbeddings:
    image_reps: np.ndarray  # (n_frames, d)
    subtitle_reps: np.ndarray  # (n_frames, d)
    subtitle_mask: np.ndarray  # (n_frames,) bool


@dataclass
class QueryEmbeddings:
    q_image: np.ndarray  # (d,)
    q_subtitle: np.ndarray  # (d,)


def init_encoder_params(rng, d_img: int, d_sub: int, d_word: int, d_model: int,
                        max_len: int, n_layers_video: int = 1, n_layers_query: int = 1,
                        ff_mult: int = 4) -> dict:
    """Shared parameter layout for the retriever and localizer encoders."""
    return {
        "proj_img": nn.init_linear(rng, d_img, d_model),
        "proj_sub": nn.init_linear(rng, d_sub, d_model),
        "proj_word": nn.init_linear(rng, d_word, d_model),
        "mod_emb": nn.normal_param(rng, 2, d_model),
        "pos_emb": nn.normal_param(rng, max_len, d_model),
        "video_tfm": {str(i): nn.init_transformer_layer(rng, d_model, ff_mult)
                      for i in range(n_layers_video)},
        "query_tfm": {str(i): nn.init_transformer_layer(rng, d_model, ff_mult)
                      for i in range(n_layers_query)},
    }


def encode_video_tokens(p: dict, video: Video, n_heads: int) -> tuple[Tensor, Tensor]:
    """Project both modality streams, tag them, run the joint transformer,
    and split back into per-frame image and subtitle representations."""
    n = video.n_frames
    img = nn.linear(p["proj_img"], Tensor(video.image_features))
    sub = nn.linear(p["proj_sub"], Tensor(video.subtitle_features))
    img = nn.add_position_and_type(img, p["pos_emb"],
                                   reshape(gather_rows(p["mod_emb"], [IMAGE_TRACK]), (-1,)))
    sub = nn.add_position_and_type(sub, p["pos_emb"],
                                   reshape(gather_rows(p["mod_emb"], [SUBTITLE_TRACK]), (-1,)))
    tokens = concat([img, sub], axis=0)
    key_mask = np.concatenate([np.zeros(n, dtype=bool), ~video.subtitle_mask])
    if key_mask.all():
        raise ValueError(f"video {video.video_id} has no attendable tokens")
    for layer in p["video_tfm"].values():
        tokens = nn.transformer_layer(layer, tokens, n_heads, key_mask)
    return slice_rows(tokens, 0, n), slice_rows(tokens, n, 2 * n)


def encode_query_tokens(p: dict, query: Query, n_heads: int) -> Tensor:
    words = nn.linear(p["proj_word"], Tensor(query.word_features))
    L = words.shape[0]
    if L > p["pos_emb"].shape[0]:
        raise ValueError(f"query length {L} exceeds positional table")
    words = add(words, slice_rows(p["pos_emb"], 0, L))
    for layer in p["query_tfm"].values():
        words = nn.transformer_layer(layer, words, n_heads)
    return words


def modular_pooling(pool_vec: Tensor, word_reps: Tensor) -> tuple[Tensor, Tensor]:
    """Learned softmax pooling: scores o = reps @ w, weights softmax(o),
    pooled vector sum_i alpha_i * rep_i. Returns (pooled (d,), alpha (L,))."""
    scores = reshape(matmul(word_reps, pool_vec), (-1,))
    alpha = softmax(scores, axis=0)
    pooled = reshape(matmul(reshape(alpha, (1, -1)), word_reps), (-1,))
    return pooled, alpha


def init_retriever_params(rng, d_img: int, d_sub: int, d_word: int, d_model: int,
                          max_len: int, ff_mult: int = 4) -> dict:
    params = init_encoder_params(rng, d_img, d_sub, d_word, d_model, max_len,
                                 n_layers_video=1, n_layers_query=1, ff_mult=ff_mult)
    params["pool_img"] = nn.fan_in_uniform(rng, d_model, 1)
    params["pool_sub"] = nn.fan_in_uniform(rng, d_model, 1)
    return params


def encode_query_channels(p: dict, query: Query, n_heads: int) -> tuple[Tensor, Tensor]:
    words = encode_query_tokens(p, query, n_heads)
    q_img, _ = modular_pooling(p["pool_img"], words)
    q_sub, _ = modular_pooling(p["pool_sub"], words)
    return q_img, q_sub


def similarity_score(qe: QueryEmbeddings, ve: VideoEmbeddings) -> float:
    """Average of the two channel max-pooled inner products; image-only when
    the video has no subtitles at all."""
    phi_img = float(np.max(ve.image_reps @ qe.q_image))
    if ve.subtitle_mask.any():
        phi_sub = float(np.max(ve.subtitle_reps[ve.subtitle_mask] @ qe.q_subtitle))
        return 0.5 * (phi_img + phi_sub)
    return phi_img


def batch_score_matrix(p: dict, videos: Sequence[Video], queries: Sequence[Query],
                       n_heads: int) -> Tensor:
    """Differentiable b x b matrix: S[z][i] = score(video z, query i)."""
    b = len(queries)
    q_img_rows, q_sub_rows = [], []
    for q in queries:
        qi, qs = encode_query_channels(p, q, n_heads)
        q_img_rows.append(reshape(qi, (1, -1)))
        q_sub_rows.append(reshape(qs, (1, -1)))
    Q_img = transpose(concat(q_img_rows, axis=0), (1, 0))  # (d, b)
    Q_sub = transpose(concat(q_sub_rows, axis=0), (1, 0))
    rows = []
    for video in videos:
        img_reps, sub_reps = encode_video_tokens(p, video, n_heads)
        phi_img = max_axis(matmul(img_reps, Q_img), axis=0)  # (b,)
        if video.subtitle_mask.any():
            idx = np.nonzero(video.subtitle_mask)[0]
            phi_sub = max_axis(matmul(gather_rows(sub_reps, idx), Q_sub), axis=0)
            row = scale(add(phi_img, phi_sub), 0.5)
        else:
            row = phi_img
        rows.append(reshape(row, (1, b)))
    return concat(rows, axis=0)


def infonce_losses(score_matrix: Tensor) -> tuple[Tensor, Tensor]:
    """Video-side and query-side InfoNCE with in-batch negatives; positives
    sit on the diagonal."""
    b = score_matrix.shape[0]
    if b < 1 or score_matrix.shape != (b, b):
        raise ValueError(f"need a square score matrix with b >= 1, got {score_matrix.shape}")
    eye = Tensor(np.eye(b, dtype=score_matrix.dtype))
    loss_v = scale(sum_all(mul(log_softmax(score_matrix, axis=0), eye)), -1.0 / b)
    loss_q = scale(sum_all(mul(log_softmax(score_matrix, axis=1), eye)), -1.0 / b)
    return loss_v, loss_q


def pack_batches(rng: np.random.Generator, video_ids: list[str], batch_size: int) -> list[list[int]]:
    """Shuffle then pack query indices so no batch repeats a positive video
    (a repeat would put a false negative on the softmax diagonal)."""
    remaining = list(rng.permutation(len(video_ids)))
    batches: list[list[int]] = []
    while remaining:
        batch: list[int] = []
        seen: set[str] = set()
        leftover: list[int] = []
        for qi in remaining:
            vid = video_ids[qi]
            if len(batch) < batch_size and vid not in seen:
                batch.append(qi)
                seen.add(vid)
            else:
                leftover.append(qi)
        if len(batch) >= 2:  # a singleton carries no contrastive signal
            batches.append(batch)
        if len(leftover) == len(remaining):
            break
        remaining = leftover
    return batches


class VideoRetriever(BaseEstimator):
    """Trainable late-fusion retriever with a fit/encode API.

    Hyperparameters follow sklearn conventions (stored verbatim, learned
    state in trailing-underscore attributes set by `fit`).
    """

    def __init__(self, d_model: int = 64, n_heads: int = 4, ff_mult: int = 4,
                 max_len: int = 256, epochs: int = 30, batch_size: int = 32,
                 lr: float = 1e-4, weight_decay: float = 0.01, seed: int = 0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.ff_mult = ff_mult
        self.max_len = max_len
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, videos: Sequence[Video], queries: Sequence[Query],
            progress: Optional[callable] = None) -> "VideoRetriever":
        d_img, d_sub = check_videos(videos, max_len=self.max_len)
        check_queries_have_ground_truth(queries)
        d_word = queries[0].word_features.shape[1]
        rng = np.random.default_rng(self.seed)
        self.params_ = init_retriever_params(rng, d_img, d_sub, d_word,
                                             self.d_model, self.max_len, self.ff_mult)
        self.dims_ = {"d_img": d_img, "d_sub": d_sub, "d_word": d_word}
        by_id = {v.video_id: v for v in videos}
        video_ids = [q.ground_truth.video_id for q in queries]
        flat = nn.flatten_params(self.params_)
        opt = nn.AdamW(flat, lr=self.lr, weight_decay=self.weight_decay)
        self.log_ = []
        for epoch in range(self.epochs):
            losses = []
            for batch in pack_batches(rng, video_ids, self.batch_size):
                batch_videos = [by_id[video_ids[qi]] for qi in batch]
                batch_queries = [queries[qi] for qi in batch]
                opt.zero_grad()
                with Tape() as tape:
                    scores = batch_score_matrix(self.params_, batch_videos,
                                                batch_queries, self.n_heads)
                    loss_v, loss_q = infonce_losses(scores)
                    loss = add(loss_v, loss_q)
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"retriever training diverged at epoch {epoch}: loss={value}")
                tape.backward(loss)
                opt.step()
                losses.append(value)
            mean_loss = float(np.mean(losses)) if losses else 0.0
            self.log_.append({"epoch": epoch, "loss": mean_loss})
            if progress:
                progress(epoch, mean_loss)
        nn.check_finite_params(flat, "retriever after training")
        return self

    def encode_video(self, video: Video) -> VideoEmbeddings:
        img, sub = encode_video_tokens(self.params_, video, self.n_heads)
        return VideoEmbeddings(img.numpy(), sub.numpy(), video.subtitle_mask.copy())

    def encode_query(self, query: Query) -> QueryEmbeddings:
        q_img, q_sub = encode_query_channels(self.params_, query, self.n_heads)
        return QueryEmbeddings(q_img.numpy(), q_sub.numpy())

    def score(self, query: Query, video: Video) -> float:
        return similarity_score(self.encode_query(query), self.encode_video(video))

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        from .checkpoint import save_tensors

        flat = {k: t.data for k, t in nn.flatten_params(self.params_).items()}
        save_tensors(path, flat, {
            "kind": "retriever",
            "config": self.get_params(),
            "dims": self.dims_,
        })

    @classmethod
    def load(cls, path) -> "VideoRetriever":
        from .checkpoint import CheckpointError, load_tensors

        tensors, footer = load_tensors(path)
        if footer.get("kind") != "retriever":
            raise CheckpointError(f"{path}: not a retriever checkpoint")
        model = cls(**footer["config"])
        model.params_ = nn.unflatten_params(tensors)
        model.dims_ = footer["dims"]
        model.log_ = []
        return model
