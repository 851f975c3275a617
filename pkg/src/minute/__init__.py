"""Two-stage video corpus moment retrieval at desk scale."""

from .data import (
    CorpusManifest,
    Frame,
    Moment,
    Query,
    SyntheticConfig,
    Video,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    temporal_iou,
)
from .driver import MomentRetrievalPipeline, run_all
from .localizer import FrameLogits, MomentLocalizer
from .ranking import (
    CandidateMoment,
    InferenceConfig,
    RankedResult,
    rank_moments,
    score_candidate_additive,
    score_candidate_baseline,
    shared_norm_inference,
)
from .retriever import QueryEmbeddings, VideoEmbeddings, VideoRetriever
from .vector_index import VectorIndex, build_index, top_k_mips

__version__ = "0.1.0"

__all__ = [
    "CandidateMoment",
    "CorpusManifest",
    "Frame",
    "FrameLogits",
    "InferenceConfig",
    "Moment",
    "MomentLocalizer",
    "MomentRetrievalPipeline",
    "Query",
    "QueryEmbeddings",
    "RankedResult",
    "SyntheticConfig",
    "VectorIndex",
    "Video",
    "VideoEmbeddings",
    "VideoRetriever",
    "build_index",
    "generate_synthetic_corpus",
    "load_corpus",
    "rank_moments",
    "run_all",
    "save_corpus",
    "score_candidate_additive",
    "score_candidate_baseline",
    "shared_norm_inference",
    "temporal_iou",
    "top_k_mips",
]
