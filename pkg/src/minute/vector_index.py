"""Exact top-K inner-product search over precomputed video embeddings.

Desk-scale corpora need no approximate structure: every query scores every
video and the K best are returned, which doubles as the ground truth any
faster backend would have to match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .retriever import QueryEmbeddings, VideoEmbeddings, VideoRetriever, similarity_score


@dataclass
class VectorIndex:
    video_ids: list[str]
    embeddings: dict[str, VideoEmbeddings]
    d_model: int

    def __len__(self):
        return len(self.video_ids)


def build_index(videos, retriever: VideoRetriever) -> VectorIndex:
    embeddings = {}
    for video in videos:
        ve = retriever.encode_video(video)
        if ve.image_reps.shape[1] != retriever.d_model:
            raise ValueError(f"embedding dim {ve.image_reps.shape[1]} != {retriever.d_model}")
        embeddings[video.video_id] = ve
    return VectorIndex([v.video_id for v in videos], embeddings, retriever.d_model)


def top_k_mips(query_emb: QueryEmbeddings, index: VectorIndex, k: int) -> list[tuple[str, float]]:
    """Exactly min(k, |V|) (video_id, score) pairs, score descending,
    ties broken by ascending video_id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise ValueError("empty index")
    scored = [(vid, similarity_score(query_emb, index.embeddings[vid]))
              for vid in index.video_ids]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:min(k, len(scored))]


def save_index(path, index: VectorIndex) -> None:
    tensors = {}
    for vid in index.video_ids:
        ve = index.embeddings[vid]
        tensors[f"{vid}/image_reps"] = ve.image_reps
        tensors[f"{vid}/subtitle_reps"] = ve.subtitle_reps
        tensors[f"{vid}/subtitle_mask"] = ve.subtitle_mask.astype(np.float32)
    save_tensors(path, tensors, {
        "kind": "index",
        "video_ids": index.video_ids,
        "d_model": index.d_model,
    })


def load_index(path) -> VectorIndex:
    tensors, footer = load_tensors(path)
    if footer.get("kind") != "index":
        raise CheckpointError(f"{path}: not an index checkpoint")
    embeddings = {}
    for vid in footer["video_ids"]:
        embeddings[vid] = VideoEmbeddings(
            image_reps=tensors[f"{vid}/image_reps"],
            subtitle_reps=tensors[f"{vid}/subtitle_reps"],
            subtitle_mask=tensors[f"{vid}/subtitle_mask"].astype(bool),
        )
    return VectorIndex(list(footer["video_ids"]), embeddings, int(footer["d_model"]))
