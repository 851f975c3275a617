import numpy as np
import pytest

from minute.data import SyntheticConfig, generate_synthetic_corpus
from minute.localizer import MomentLocalizer
from minute.retriever import VideoRetriever


def cast_tree_float64(tree):
    """In-place promotion of a parameter tree to double precision."""
    for value in tree.values():
        if isinstance(value, dict):
            cast_tree_float64(value)
        else:
            value.data = value.data.astype(np.float64)
    return tree


SMALL_CFG = SyntheticConfig(
    n_videos=12, min_frames=5, max_frames=8, d_img=16, d_sub=16, d_word=16,
    n_concepts=6, noise_std=0.1, min_query_len=2, max_query_len=4,
    min_moment_len=2, max_moment_len=4,
    queries_per_video_train=2, queries_per_video_test=1,
)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(SMALL_CFG, seed=100)


@pytest.fixture(scope="session")
def init_models(small_corpus):
    """Randomly initialized (epochs=0) models: structurally valid, untrained."""
    _, videos, queries = small_corpus
    retriever = VideoRetriever(d_model=16, n_heads=4, max_len=32, epochs=0, seed=1)
    retriever.fit(videos, queries["train"])
    localizer = MomentLocalizer(d_model=16, n_heads=4, max_len=32, mmt_layers=2,
                                epochs=0, n_negatives=2, seed=2)
    ranklists = {q.query_id: [v.video_id for v in videos] for q in queries["train"]}
    localizer.fit(videos, queries["train"], ranklists)
    return retriever, localizer
