"""Ranking: shared-norm inference, scoring functions, NMS, full pipeline."""

import math

import numpy as np
import pytest

from minute.data import temporal_iou
from minute.localizer import FrameLogits
from minute.ranking import (
    InferenceConfig,
    diagnostic_probabilities,
    enumerate_and_nms,
    enumerate_spans,
    rank_moments,
    retrieval_probability_topk,
    score_candidate_additive,
    score_candidate_baseline,
    score_video_candidates,
    shared_norm_inference,
    single_video_probabilities,
)

RNG = np.random.default_rng(77)


def make_flogits(i, n, rng):
    return FrameLogits(f"v{i}", rng.standard_normal(n), rng.standard_normal(n))


# ---------------------------------------------------------------------------
# retrieval probabilities
# ---------------------------------------------------------------------------


def test_retrieval_probability_uniform():
    p = retrieval_probability_topk([2.0] * 5)
    assert p == pytest.approx([0.2] * 5)


def test_retrieval_probability_single():
    assert retrieval_probability_topk([13.0]) == pytest.approx([1.0])


def test_retrieval_probability_analytic():
    p = retrieval_probability_topk([1.0, 0.0])
    e = math.e
    assert p == pytest.approx([e / (e + 1), 1 / (e + 1)], abs=1e-12)


def test_retrieval_probability_empty_errors():
    with pytest.raises(ValueError):
        retrieval_probability_topk([])


# ---------------------------------------------------------------------------
# shared-norm inference
# ---------------------------------------------------------------------------


def test_shared_norm_inference_uniform():
    logits = [FrameLogits("a", np.zeros(2), np.zeros(2)),
              FrameLogits("b", np.zeros(2), np.zeros(2))]
    probs = shared_norm_inference(logits)
    for p_st, p_ed in probs:
        assert p_st == pytest.approx([0.25, 0.25])
        assert p_ed == pytest.approx([0.25, 0.25])


def test_shared_norm_inference_k1_equals_single_video_softmax():
    rng = np.random.default_rng(0)
    flog = make_flogits(0, 6, rng)
    (p_st, p_ed), = shared_norm_inference([flog])
    want_st, want_ed = single_video_probabilities(flog)
    assert np.max(np.abs(p_st - want_st)) < 1e-12
    assert np.max(np.abs(p_ed - want_ed)) < 1e-12


def test_shared_norm_inference_matches_flatten_softmax_oracle():
    rng = np.random.default_rng(1)
    for trial in range(20):
        logits = [make_flogits(i, int(rng.integers(2, 8)), rng) for i in range(4)]
        probs = shared_norm_inference(logits)
        flat_st = np.concatenate([f.st_logits for f in logits])
        e = np.exp(flat_st - flat_st.max())
        want = e / e.sum()
        got = np.concatenate([p for p, _ in probs])
        assert np.max(np.abs(got - want)) < 1e-10
        assert abs(got.sum() - 1.0) < 1e-6
        got_ed = np.concatenate([p for _, p in probs])
        assert abs(got_ed.sum() - 1.0) < 1e-6


def test_shared_norm_inference_skips_padding():
    logits = [FrameLogits("a", np.array([0.0, -np.inf]), np.array([0.0, -np.inf])),
              FrameLogits("b", np.array([0.0, 0.0]), np.array([0.0, 0.0]))]
    probs = shared_norm_inference(logits)
    assert probs[0][0] == pytest.approx([1 / 3, 0.0])


def test_shared_norm_inference_all_masked_errors():
    logits = [FrameLogits("a", np.array([-np.inf]), np.array([-np.inf]))]
    with pytest.raises(ValueError, match="masked"):
        shared_norm_inference(logits)


# ---------------------------------------------------------------------------
# scoring functions
# ---------------------------------------------------------------------------


def test_additive_score_is_plain_sum():
    assert score_candidate_additive(0.5, 1.2, -0.3) == pytest.approx(1.4)


def test_additive_score_shift_invariance_of_ordering():
    rng = np.random.default_rng(2)
    logits = [make_flogits(i, 5, rng) for i in range(3)]
    sr = list(rng.standard_normal(3))
    cands = [(v, j, k) for v in range(3) for j in range(5) for k in range(j, 5)]

    def order(retrieval_scores):
        scored = [(score_candidate_additive(retrieval_scores[v], logits[v].st_logits[j],
                                            logits[v].ed_logits[k]), v, j, k)
                  for v, j, k in cands]
        return [c[1:] for c in sorted(scored, key=lambda t: -t[0])]

    assert order(sr) == order([s + 11.5 for s in sr])


def test_additive_ranking_equals_full_probability_ranking():
    """Acceptance: over >= 1000 random tie-free instances, the additive
    score and the softmax-product probability give identical orderings."""
    rng = np.random.default_rng(3)
    mismatches = 0
    for trial in range(1000):
        k = int(rng.integers(2, 5))
        logits = [make_flogits(i, int(rng.integers(2, 6)), rng) for i in range(k)]
        sr = rng.standard_normal(k)
        probs = diagnostic_probabilities(sr, logits)
        additive = [
            score_candidate_additive(sr[row["video_index"]],
                                     logits[row["video_index"]].st_logits[row["st_frame"]],
                                     logits[row["video_index"]].ed_logits[row["ed_frame"]])
            for row in probs
        ]
        key = [(r["video_index"], r["st_frame"], r["ed_frame"]) for r in probs]
        by_prob = [k_ for _, k_ in sorted(zip(probs, key),
                                          key=lambda t: -t[0]["probability"])]
        by_add = [k_ for _, k_ in sorted(zip(additive, key), key=lambda t: -t[0])]
        if by_prob != by_add:
            mismatches += 1
    assert mismatches == 0


def test_baseline_score_examples():
    assert score_candidate_baseline(3.0, 0.4, 0.5, alpha=0.0) == pytest.approx(0.2)
    assert score_candidate_baseline(0.0, 0.4, 0.5, alpha=7.0) == pytest.approx(0.2)
    assert score_candidate_baseline(1.0, 0.4, 0.5, alpha=1.0) == pytest.approx(
        math.e * 0.2, abs=1e-12)


def test_baseline_large_alpha_orders_by_retrieval_rank():
    """Past an instance-computable threshold, every candidate from a
    higher-scoring video outranks every candidate from a lower one."""
    rng = np.random.default_rng(4)
    for trial in range(5):
        k = 3
        logits = [make_flogits(i, 4, rng) for i in range(k)]
        sr = np.sort(rng.standard_normal(k))[::-1]
        sr += np.arange(k, 0, -1) * 0.1  # ensure strict separation
        probs = [single_video_probabilities(f) for f in logits]
        log_sl = []
        for v in range(k):
            p_st, p_ed = probs[v]
            for j in range(4):
                for k2 in range(j, 4):
                    log_sl.append((v, j, k2, math.log(p_st[j]) + math.log(p_ed[k2])))
        # threshold: max over cross-video pairs of needed alpha
        threshold = 0.0
        for va, ja, ka, la in log_sl:
            for vb, jb, kb, lb in log_sl:
                if sr[va] > sr[vb]:
                    threshold = max(threshold, (lb - la) / (sr[va] - sr[vb]))
        for alpha in (threshold + 1.0, threshold + 10.0):
            scores = [(alpha * sr[v] + l, v) for v, _, _, l in log_sl]
            order = [v for _, v in sorted(scores, key=lambda t: -t[0])]
            # all of video 0's candidates, then video 1's, then video 2's
            counts = [order.count(v) for v in range(k)]
            pos = 0
            for v in range(k):
                assert all(x == v for x in order[pos:pos + counts[v]])
                pos += counts[v]


# ---------------------------------------------------------------------------
# span enumeration and NMS
# ---------------------------------------------------------------------------


def test_enumerate_spans_lengths():
    st, ed = enumerate_spans(5, 1, 3)
    lengths = ed - st + 1
    assert (lengths >= 1).all() and (lengths <= 3).all()
    assert len(st) == 5 + 4 + 3  # lengths 1, 2, 3
    st2, ed2 = enumerate_spans(4, 2, 10)
    assert ((ed2 - st2 + 1) >= 2).all()


def oracle_nms(cands, thresh):
    """O(n^2) reference: sort, keep greedily, suppress same-video overlap."""
    order = sorted(cands, key=lambda c: (-c["score"], c["video_rank"], c["st"], c["ed"]))
    kept = []
    for c in order:
        ok = True
        for k in kept:
            if k["video_id"] == c["video_id"]:
                iou = temporal_iou((c["st"], c["ed"]), (k["st"], k["ed"]))
                if iou > thresh:
                    ok = False
                    break
        if ok:
            kept.append(c)
    return kept


def _entry_from_cands(video_id, video_rank, sr, cands):
    return {
        "video_id": video_id, "video_rank": video_rank, "retrieval_score": sr,
        "st": np.array([c["st"] for c in cands]),
        "ed": np.array([c["ed"] for c in cands]),
        "st_logit": np.zeros(len(cands)),
        "ed_logit": np.zeros(len(cands)),
        "final": np.array([c["score"] for c in cands]),
    }


def test_nms_single_candidate():
    cfg = InferenceConfig(top_k=1, nms_iou=0.7)
    entry = _entry_from_cands("a", 1, 0.0, [{"st": 2, "ed": 4, "score": 1.0}])
    out = enumerate_and_nms([entry], cfg)
    assert len(out) == 1 and (out[0].st_frame, out[0].ed_frame) == (2, 4)


def test_nms_identical_spans_keep_higher_score():
    cfg = InferenceConfig(top_k=1, nms_iou=0.7)
    entry = _entry_from_cands("a", 1, 0.0, [
        {"st": 2, "ed": 4, "score": 1.0},
        {"st": 2, "ed": 4, "score": 2.0},
    ])
    out = enumerate_and_nms([entry], cfg)
    assert len(out) == 1 and out[0].final_score == 2.0


def test_nms_matches_oracle_on_200_random_instances():
    rng = np.random.default_rng(5)
    for trial in range(200):
        n_videos = int(rng.integers(1, 4))
        cands_by_video = {}
        all_cands = []
        for v in range(n_videos):
            vid = f"v{v}"
            n = int(rng.integers(1, 25))
            cands = []
            for _ in range(n):
                st = int(rng.integers(0, 12))
                ed = st + int(rng.integers(0, 6))
                cands.append({"video_id": vid, "video_rank": v + 1, "st": st,
                              "ed": ed, "score": float(rng.standard_normal())})
            cands_by_video[vid] = cands
            all_cands.extend(cands)
        thresh = float(rng.uniform(0.2, 0.8))
        cfg = InferenceConfig(top_k=1, nms_iou=thresh, n_results=1000)
        entries = [_entry_from_cands(vid, r + 1, 0.0, cands_by_video[vid])
                   for r, vid in enumerate(sorted(cands_by_video))]
        got = enumerate_and_nms(entries, cfg)
        want = oracle_nms(all_cands, thresh)
        assert [(c.video_id, c.st_frame, c.ed_frame, c.final_score) for c in got] == \
               [(c["video_id"], c["st"], c["ed"], c["score"]) for c in want]


def test_nms_output_pairwise_iou_bounded():
    rng = np.random.default_rng(6)
    cands = [{"st": int(rng.integers(0, 10)), "ed": 0, "score": float(rng.standard_normal())}
             for _ in range(60)]
    for c in cands:
        c["ed"] = c["st"] + int(rng.integers(0, 5))
    cfg = InferenceConfig(top_k=1, nms_iou=0.5, n_results=1000)
    out = enumerate_and_nms([_entry_from_cands("a", 1, 0.0, cands)], cfg)
    for i, a in enumerate(out):
        for b in out[i + 1:]:
            assert temporal_iou((a.st_frame, a.ed_frame),
                                (b.st_frame, b.ed_frame)) <= 0.5


def test_nms_truncates_to_n_results():
    cands = [{"st": i * 10, "ed": i * 10 + 1, "score": float(i)} for i in range(30)]
    cfg = InferenceConfig(top_k=1, nms_iou=0.7, n_results=7)
    out = enumerate_and_nms([_entry_from_cands("a", 1, 0.0, cands)], cfg)
    assert len(out) == 7
    assert out[0].final_score == 29.0


# ---------------------------------------------------------------------------
# scoring modes over enumerated spans
# ---------------------------------------------------------------------------


def test_score_video_candidates_additive_vs_manual():
    rng = np.random.default_rng(7)
    flog = make_flogits(0, 5, rng)
    cfg = InferenceConfig(top_k=1, max_moment_len=3, scoring_mode="shared_norm_additive")
    entry = score_video_candidates(flog, 2, 0.7, cfg)
    for st, ed, final in zip(entry["st"], entry["ed"], entry["final"]):
        assert final == pytest.approx(
            score_candidate_additive(0.7, flog.st_logits[st], flog.ed_logits[ed]))
        assert ed - st + 1 <= 3


def test_score_video_candidates_baseline_matches_formula_ordering():
    rng = np.random.default_rng(8)
    flog = make_flogits(0, 5, rng)
    cfg = InferenceConfig(top_k=1, max_moment_len=5, scoring_mode="baseline_exp",
                          baseline_alpha=2.0)
    entry = score_video_candidates(flog, 1, 0.3, cfg)
    p_st, p_ed = single_video_probabilities(flog)
    literal = [score_candidate_baseline(0.3, p_st[st], p_ed[ed], 2.0)
               for st, ed in zip(entry["st"], entry["ed"])]
    order_log = np.argsort(-entry["final"], kind="stable")
    order_lit = np.argsort(-np.asarray(literal), kind="stable")
    assert np.array_equal(order_log, order_lit)


# ---------------------------------------------------------------------------
# end-to-end rank_moments
# ---------------------------------------------------------------------------


def test_rank_moments_single_video_corpus(small_corpus, init_models):
    _, videos, queries = small_corpus
    retriever, localizer = init_models
    from minute.vector_index import build_index

    index = build_index(videos[:1], retriever)
    cfg = InferenceConfig(top_k=5, max_moment_len=6)
    res = rank_moments(queries["test"][0], index, retriever, localizer,
                       {videos[0].video_id: videos[0]}, cfg)
    assert res.candidates
    assert all(c.video_id == videos[0].video_id for c in res.candidates)
    assert len(res.per_video_best) == 1


def test_rank_moments_deterministic(small_corpus, init_models):
    _, videos, queries = small_corpus
    retriever, localizer = init_models
    from minute.vector_index import build_index

    index = build_index(videos, retriever)
    by_id = {v.video_id: v for v in videos}
    cfg = InferenceConfig(top_k=4, max_moment_len=6)
    q = queries["test"][1]
    a = rank_moments(q, index, retriever, localizer, by_id, cfg)
    b = rank_moments(q, index, retriever, localizer, by_id, cfg)
    assert a.candidates == b.candidates
    assert a.retrieved == b.retrieved


def test_rank_moments_top1_agrees_with_probability_oracle(small_corpus, init_models):
    _, videos, queries = small_corpus
    retriever, localizer = init_models
    from minute.vector_index import build_index

    index = build_index(videos, retriever)
    by_id = {v.video_id: v for v in videos}
    cfg = InferenceConfig(top_k=3, max_moment_len=100, min_moment_len=1,
                          nms_iou=0.999999, n_results=10_000)
    for q in queries["test"][:4]:
        res = rank_moments(q, index, retriever, localizer, by_id, cfg)
        logits = {}
        flogs = [localizer.forward(by_id[vid], q) for vid, _ in res.retrieved]
        probs = diagnostic_probabilities([s for _, s in res.retrieved], flogs)
        best = max(probs, key=lambda r: r["probability"])
        top = res.candidates[0]
        assert (best["video_id"], best["st_frame"], best["ed_frame"]) == \
               (top.video_id, top.st_frame, top.ed_frame)


def test_rank_moments_error_carries_query_id(small_corpus, init_models):
    _, videos, queries = small_corpus
    retriever, localizer = init_models
    from minute.vector_index import VectorIndex

    empty = VectorIndex([], {}, retriever.d_model)
    cfg = InferenceConfig(top_k=3)
    with pytest.raises(ValueError, match=queries["test"][0].query_id):
        rank_moments(queries["test"][0], empty, retriever, localizer, {}, cfg)


def test_inference_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(top_k=0)
    with pytest.raises(ValueError):
        InferenceConfig(nms_iou=1.0)
    with pytest.raises(ValueError):
        InferenceConfig(min_moment_len=5, max_moment_len=2)
    with pytest.raises(ValueError):
        InferenceConfig(scoring_mode="nope")
