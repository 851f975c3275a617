"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Sequence

from .data import Query, Video


def check_videos(videos: Sequence[Video], max_len: int | None = None) -> tuple[int, int]:
    """Validate a video collection; returns (d_img, d_sub)."""
    if not videos:
        raise ValueError("need at least one video")
    d_img = videos[0].image_features.shape[1]
    d_sub = videos[0].subtitle_features.shape[1]
    ids = set()
    for v in videos:
        if v.video_id in ids:
            raise ValueError(f"duplicate video id {v.video_id}")
        ids.add(v.video_id)
        if v.image_features.shape[1] != d_img or v.subtitle_features.shape[1] != d_sub:
            raise ValueError(f"video {v.video_id} feature dims disagree with the corpus")
        if max_len is not None and v.n_frames > max_len:
            raise ValueError(
                f"video {v.video_id} has {v.n_frames} frames, exceeding max_len {max_len}")
    return d_img, d_sub


def check_queries_have_ground_truth(queries: Sequence[Query]) -> None:
    if not queries:
        raise ValueError("need at least one query")
    d_word = queries[0].word_features.shape[1]
    for q in queries:
        if q.word_features.shape[1] != d_word:
            raise ValueError(f"query {q.query_id} word dim disagrees with the corpus")
        if q.ground_truth is None:
            raise ValueError(f"query {q.query_id} has no ground-truth moment (required for training)")


def check_moment_in_video(moment, video: Video) -> None:
    if moment.video_id != video.video_id:
        raise ValueError(f"moment video {moment.video_id} != {video.video_id}")
    if moment.ed_frame >= video.n_frames:
        raise ValueError(
            f"moment [{moment.st_frame}, {moment.ed_frame}] outside video "
            f"{video.video_id} of {video.n_frames} frames")
