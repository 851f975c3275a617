"""Exact top-K search against exhaustive brute force."""

import numpy as np
import pytest

from minute.retriever import QueryEmbeddings, VideoEmbeddings, similarity_score
from minute.vector_index import (
    VectorIndex,
    build_index,
    load_index,
    save_index,
    top_k_mips,
)


def random_index(n_videos, d=8, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"v{i:05d}" for i in range(n_videos)]
    emb = {}
    for vid in ids:
        n = int(rng.integers(2, 7))
        mask = rng.random(n) < 0.8
        emb[vid] = VideoEmbeddings(rng.standard_normal((n, d)),
                                   rng.standard_normal((n, d)), mask)
    return VectorIndex(ids, emb, d)


def test_build_index_size_and_single_video(small_corpus, init_models):
    _, videos, queries = small_corpus
    retriever, _ = init_models
    index = build_index(videos, retriever)
    assert len(index) == len(videos)
    one = build_index(videos[:1], retriever)
    qe = retriever.encode_query(queries["train"][0])
    assert top_k_mips(qe, one, 5) == [(videos[0].video_id,
                                       similarity_score(qe, one.embeddings[videos[0].video_id]))]


def test_build_index_deterministic_bytes(tmp_path, small_corpus, init_models):
    _, videos, _ = small_corpus
    retriever, _ = init_models
    for name in ("i1.ckpt", "i2.ckpt"):
        save_index(tmp_path / name, build_index(videos, retriever))
    assert (tmp_path / "i1.ckpt").read_bytes() == (tmp_path / "i2.ckpt").read_bytes()


def test_index_round_trip(tmp_path):
    index = random_index(20)
    save_index(tmp_path / "x.ckpt", index)
    loaded = load_index(tmp_path / "x.ckpt")
    assert loaded.video_ids == index.video_ids
    for vid in index.video_ids:
        a, b = index.embeddings[vid], loaded.embeddings[vid]
        assert np.allclose(a.image_reps, b.image_reps, atol=1e-6)
        assert np.array_equal(a.subtitle_mask, b.subtitle_mask)


def test_constructed_one_hot_retrieval():
    d = 4
    ids = ["a", "b", "c", "d"]
    emb = {vid: VideoEmbeddings(np.eye(d)[[i]], np.zeros((1, d)), np.array([False]))
           for i, vid in enumerate(ids)}
    index = VectorIndex(ids, emb, d)
    qe = QueryEmbeddings(np.eye(d)[2], np.zeros(d))
    assert top_k_mips(qe, index, 1)[0][0] == "c"


def test_top_k_matches_exhaustive_oracle_1000_videos():
    index = random_index(1000, seed=7)
    rng = np.random.default_rng(8)
    for trial in range(5):
        qe = QueryEmbeddings(rng.standard_normal(8), rng.standard_normal(8))
        # independent exhaustive scoring
        def brute(vid):
            ve = index.embeddings[vid]
            phi_i = max(float(ve.image_reps[j] @ qe.q_image)
                        for j in range(ve.image_reps.shape[0]))
            subs = [float(ve.subtitle_reps[j] @ qe.q_subtitle)
                    for j in range(ve.subtitle_reps.shape[0]) if ve.subtitle_mask[j]]
            return 0.5 * (phi_i + max(subs)) if subs else phi_i

        want = sorted(((vid, brute(vid)) for vid in index.video_ids),
                      key=lambda it: (-it[1], it[0]))
        for k in (1, 10, 173, 1000, 2000):
            got = top_k_mips(qe, index, k)
            expect = want[:min(k, 1000)]
            assert [g[0] for g in got] == [w[0] for w in expect]
            assert np.allclose([g[1] for g in got], [w[1] for w in expect], atol=1e-10)


def test_top_k_prefix_property():
    index = random_index(50, seed=3)
    qe = QueryEmbeddings(np.random.default_rng(5).standard_normal(8),
                         np.random.default_rng(6).standard_normal(8))
    prev = []
    for k in range(1, 12):
        cur = top_k_mips(qe, index, k)
        assert cur[: len(prev)] == prev
        prev = cur


def test_tie_break_by_video_id():
    d = 2
    emb = {vid: VideoEmbeddings(np.array([[1.0, 0.0]]), np.zeros((1, d)),
                                np.array([False]))
           for vid in ("z", "m", "a")}
    index = VectorIndex(["z", "m", "a"], emb, d)
    qe = QueryEmbeddings(np.array([1.0, 0.0]), np.zeros(d))
    assert [vid for vid, _ in top_k_mips(qe, index, 3)] == ["a", "m", "z"]


def test_empty_index_and_bad_k():
    index = VectorIndex([], {}, 4)
    qe = QueryEmbeddings(np.zeros(4), np.zeros(4))
    with pytest.raises(ValueError):
        top_k_mips(qe, index, 1)
    with pytest.raises(ValueError):
        top_k_mips(qe, random_index(3), 0)
