"""Corpus data model, binary feature IO, and the synthetic corpus generator.

Time is measured in frame indices throughout; wall-clock seconds are only
derived via each video's frame duration. Moments are inclusive frame spans
and all interval math happens on the half-open [st, ed+1) view so a
single-frame moment has length 1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"MNTF"
FORMAT_VERSION = 1


class CorpusError(Exception):
    """Base class for corpus ingestion failures."""


class BadMagicError(CorpusError):
    pass


class BadVersionError(CorpusError):
    pass


class DimensionMismatchError(CorpusError):
    pass


class FrameCountMismatchError(CorpusError):
    pass


class TruncatedFileError(CorpusError):
    pass


@dataclass(frozen=True)
class Moment:
    """An inclusive (video, start frame, end frame) span."""

    video_id: str
    st_frame: int
    ed_frame: int

    def __post_init__(self):
        if self.st_frame < 0 or self.ed_frame < self.st_frame:
            raise ValueError(
                f"invalid moment [{self.st_frame}, {self.ed_frame}] in {self.video_id}"
            )

    @property
    def n_frames(self) -> int:
        return self.ed_frame - self.st_frame + 1


@dataclass(frozen=True)
class Frame:
    image_feature: np.ndarray
    subtitle_feature: np.ndarray
    has_subtitle: bool


@dataclass
class Video:
    """Frames stored as packed arrays; `frames` yields per-frame views."""

    video_id: str
    image_features: np.ndarray  # (n_frames, d_img) float32
    subtitle_features: np.ndarray  # (n_frames, d_sub) float32
    subtitle_mask: np.ndarray  # (n_frames,) bool, True = frame has a subtitle
    frame_duration_s: float

    def __post_init__(self):
        n = self.image_features.shape[0]
        if n < 1:
            raise ValueError(f"video {self.video_id} has no frames")
        if self.subtitle_features.shape[0] != n or self.subtitle_mask.shape[0] != n:
            raise ValueError(f"video {self.video_id}: per-frame arrays disagree on length")
        if self.frame_duration_s <= 0:
            raise ValueError(f"video {self.video_id}: frame duration must be positive")
        # missing subtitles are stored as zero vectors and masked downstream
        self.subtitle_features = self.subtitle_features.copy()
        self.subtitle_features[~self.subtitle_mask] = 0.0

    @property
    def n_frames(self) -> int:
        return self.image_features.shape[0]

    @property
    def frames(self) -> list[Frame]:
        return [
            Frame(self.image_features[j], self.subtitle_features[j], bool(self.subtitle_mask[j]))
            for j in range(self.n_frames)
        ]


@dataclass
class Query:
    query_id: str
    word_features: np.ndarray  # (n_words, d_word) float32
    ground_truth: Optional[Moment] = None

    def __post_init__(self):
        if self.word_features.ndim != 2 or self.word_features.shape[0] < 1:
            raise ValueError(f"query {self.query_id} needs at least one word feature")


@dataclass
class VideoEntry:
    video_id: str
    n_frames: int
    frame_duration_s: float
    image_file: str
    subtitle_file: str
    has_subtitle: list[int]


@dataclass
class CorpusManifest:
    videos: list[VideoEntry]
    d_img: int
    d_sub: int
    d_word: int
    seed: Optional[int] = None
    query_files: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate video ids in manifest")


def temporal_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """IoU of two inclusive frame spans via their half-open [st, ed+1) view."""
    (ast, aed), (bst, bed) = a, b
    if aed < ast or bed < bst:
        raise ValueError(f"inverted span: {a if aed < ast else b}")
    lo = max(ast, bst)
    hi = min(aed, bed) + 1
    inter = max(0, hi - lo)
    union = (aed - ast + 1) + (bed - bst + 1) - inter
    return inter / union


# ---------------------------------------------------------------------------
# MNTF binary feature files
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIII")  # magic, version, n_rows, dim


def write_feature_file(path: Path, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError(f"feature rows must be 2-D, got shape {rows.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, rows.shape[0], rows.shape[1]))
        f.write(rows.tobytes())


def read_feature_file(path: Path, expect_dim: Optional[int] = None,
                      expect_rows: Optional[int] = None) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise TruncatedFileError(f"{path}: file shorter than header")
        magic, version, n_rows, dim = _HEADER.unpack(header)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise BadVersionError(f"{path}: unsupported version {version}")
        if expect_dim is not None and dim != expect_dim:
            raise DimensionMismatchError(
                f"{path}: dimension mismatch (header says {dim}, manifest says {expect_dim})"
            )
        if expect_rows is not None and n_rows != expect_rows:
            raise FrameCountMismatchError(
                f"{path}: frame count mismatch (header says {n_rows}, manifest says {expect_rows})"
            )
        payload = f.read(4 * n_rows * dim)
        if len(payload) < 4 * n_rows * dim:
            raise TruncatedFileError(
                f"{path}: expected {4 * n_rows * dim} payload bytes, got {len(payload)}"
            )
    return np.frombuffer(payload, dtype="<f4").reshape(n_rows, dim).copy()


# ---------------------------------------------------------------------------
# Manifest + query IO
# ---------------------------------------------------------------------------


def save_corpus(out_dir: Path, manifest: CorpusManifest, videos: list[Video],
                queries: dict[str, list[Query]]) -> Path:
    """Write manifest.json, per-video MNTF files, and query JSONL files."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    by_id = {v.video_id: v for v in videos}
    for entry in manifest.videos:
        video = by_id[entry.video_id]
        write_feature_file(out_dir / entry.image_file, video.image_features)
        write_feature_file(out_dir / entry.subtitle_file, video.subtitle_features)
    for split, qs in queries.items():
        rel = manifest.query_files[split]
        with open(out_dir / rel, "w") as f:
            for q in qs:
                feature_file = f"features/{q.query_id}.mntf"
                write_feature_file(out_dir / feature_file, q.word_features)
                gt = q.ground_truth
                row = {
                    "query_id": q.query_id,
                    "video_id": gt.video_id if gt else None,
                    "st_frame": gt.st_frame if gt else None,
                    "ed_frame": gt.ed_frame if gt else None,
                    "feature_file": feature_file,
                }
                f.write(json.dumps(row, sort_keys=True) + "\n")
    manifest_path = out_dir / "manifest.json"
    doc = {
        "format": "minute-corpus",
        "version": FORMAT_VERSION,
        "dims": {"d_img": manifest.d_img, "d_sub": manifest.d_sub, "d_word": manifest.d_word},
        "seed": manifest.seed,
        "query_files": manifest.query_files,
        "videos": [
            {
                "video_id": e.video_id,
                "n_frames": e.n_frames,
                "frame_duration_s": e.frame_duration_s,
                "image_file": e.image_file,
                "subtitle_file": e.subtitle_file,
                "has_subtitle": e.has_subtitle,
            }
            for e in manifest.videos
        ],
    }
    with open(manifest_path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest_path


def load_queries(path: Path, d_word: int) -> list[Query]:
    path = Path(path)
    base = path.parent
    queries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            feats = read_feature_file(base / row["feature_file"], expect_dim=d_word)
            gt = None
            if row.get("video_id") is not None:
                gt = Moment(row["video_id"], int(row["st_frame"]), int(row["ed_frame"]))
            queries.append(Query(row["query_id"], feats, gt))
    return queries


def load_corpus(manifest_path: Path) -> tuple[CorpusManifest, list[Video], dict[str, list[Query]]]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    with open(manifest_path) as f:
        doc = json.load(f)
    if doc.get("format") != "minute-corpus":
        raise BadMagicError(f"{manifest_path}: not a corpus manifest")
    if doc.get("version") != FORMAT_VERSION:
        raise BadVersionError(f"{manifest_path}: unsupported manifest version {doc.get('version')}")
    dims = doc["dims"]
    entries = [
        VideoEntry(
            video_id=v["video_id"],
            n_frames=int(v["n_frames"]),
            frame_duration_s=float(v["frame_duration_s"]),
            image_file=v["image_file"],
            subtitle_file=v["subtitle_file"],
            has_subtitle=[int(x) for x in v["has_subtitle"]],
        )
        for v in doc["videos"]
    ]
    manifest = CorpusManifest(
        videos=entries,
        d_img=int(dims["d_img"]),
        d_sub=int(dims["d_sub"]),
        d_word=int(dims["d_word"]),
        seed=doc.get("seed"),
        query_files=dict(doc.get("query_files", {})),
    )
    videos = []
    for e in entries:
        if len(e.has_subtitle) != e.n_frames:
            raise FrameCountMismatchError(
                f"{manifest_path}: has_subtitle length {len(e.has_subtitle)} != "
                f"n_frames {e.n_frames} for {e.video_id}"
            )
        img = read_feature_file(base / e.image_file, expect_dim=manifest.d_img,
                                expect_rows=e.n_frames)
        sub = read_feature_file(base / e.subtitle_file, expect_dim=manifest.d_sub,
                                expect_rows=e.n_frames)
        videos.append(Video(e.video_id, img, sub,
                            np.asarray(e.has_subtitle, dtype=bool), e.frame_duration_s))
    gt_bounds = {v.video_id: v.n_frames for v in videos}
    queries: dict[str, list[Query]] = {}
    for split, rel in manifest.query_files.items():
        qs = load_queries(base / rel, manifest.d_word)
        for q in qs:
            gt = q.ground_truth
            if gt is not None:
                n = gt_bounds.get(gt.video_id)
                if n is None:
                    raise CorpusError(f"{rel}: query {q.query_id} references unknown video {gt.video_id}")
                if gt.ed_frame >= n:
                    raise CorpusError(
                        f"{rel}: query {q.query_id} moment end {gt.ed_frame} "
                        f"outside video of {n} frames"
                    )
        queries[split] = qs
    return manifest, videos, queries


# ---------------------------------------------------------------------------
# Synthetic corpus with planted ground-truth moments
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Latent-concept corpus: each video carries a unique signature concept
    planted only inside its ground-truth span; other frames reuse a shared
    distractor pool, which is what makes retrieval nontrivial."""

    n_videos: int = 150
    min_frames: int = 12
    max_frames: int = 20
    d_img: int = 32
    d_sub: int = 32
    d_word: int = 32
    n_concepts: int = 24
    noise_std: float = 0.3
    min_query_len: int = 3
    max_query_len: int = 5
    min_moment_len: int = 2
    max_moment_len: int = 6
    queries_per_video_train: int = 4
    queries_per_video_test: int = 2
    span_signature_purity: float = 0.6
    hard_query_rate: float = 0.08
    hard_signature_scale: float = 0.55
    subtitle_rate: float = 1.0
    frame_duration_s: float = 1.5

    def validate(self) -> None:
        if self.n_videos < 1 or self.min_frames < 1:
            raise ValueError("need at least one video and one frame per video")
        if self.min_frames > self.max_frames:
            raise ValueError("min_frames > max_frames")
        if not (self.d_img == self.d_sub == self.d_word):
            raise ValueError("synthetic generation requires equal feature dims across modalities")
        if self.n_concepts < 1:
            raise ValueError("need a nonempty shared concept pool")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not (1 <= self.min_query_len <= self.max_query_len):
            raise ValueError("bad query length range")
        if not (1 <= self.min_moment_len <= self.max_moment_len):
            raise ValueError("bad moment length range")
        if self.min_moment_len > self.min_frames:
            raise ValueError("min_moment_len cannot exceed min_frames")
        if not (0.0 <= self.span_signature_purity <= 1.0):
            raise ValueError("span_signature_purity must be in [0, 1]")
        if not (0.0 <= self.hard_query_rate <= 1.0):
            raise ValueError("hard_query_rate must be in [0, 1]")
        if not (0.0 < self.hard_signature_scale <= 1.0):
            raise ValueError("hard_signature_scale must be in (0, 1]")
        if not (0.0 <= self.subtitle_rate <= 1.0):
            raise ValueError("subtitle_rate must be in [0, 1]")


def generate_synthetic_corpus(cfg: SyntheticConfig, seed: int
                              ) -> tuple[CorpusManifest, list[Video], dict[str, list[Query]]]:
    """Deterministically generate videos with planted moments and queries.

    Concept k has one unit latent vector shared by all modalities; a frame
    showing concept k stores that vector plus modality-specific Gaussian
    noise. Concepts 0..n_concepts-1 form the shared pool; concept
    n_concepts+i is video i's signature, present only inside its span.
    Every query contains at least one signature word.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    d = cfg.d_img
    n_total_concepts = cfg.n_concepts + cfg.n_videos
    concepts = rng.standard_normal((n_total_concepts, d))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    concepts = concepts.astype(np.float32)

    def noisy(concept_ids: np.ndarray) -> np.ndarray:
        base = concepts[concept_ids]
        if cfg.noise_std == 0:
            return base.copy()
        return (base + cfg.noise_std * rng.standard_normal(base.shape)).astype(np.float32)

    videos: list[Video] = []
    entries: list[VideoEntry] = []
    spans: list[Moment] = []
    span_concepts: list[np.ndarray] = []
    for i in range(cfg.n_videos):
        vid = f"v{i:04d}"
        n_frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        span_len = int(rng.integers(cfg.min_moment_len,
                                    min(cfg.max_moment_len, n_frames) + 1))
        st = int(rng.integers(0, n_frames - span_len + 1))
        ed = st + span_len - 1
        frame_concepts = rng.integers(0, cfg.n_concepts, size=n_frames)
        signature = cfg.n_concepts + i
        in_span = rng.random(span_len) < cfg.span_signature_purity
        in_span[int(rng.integers(0, span_len))] = True  # signature always planted
        frame_concepts[st:ed + 1] = np.where(in_span, signature, frame_concepts[st:ed + 1])
        img = noisy(frame_concepts)
        sub = noisy(frame_concepts)
        has_sub = rng.random(n_frames) < cfg.subtitle_rate
        videos.append(Video(vid, img, sub, has_sub, cfg.frame_duration_s))
        entries.append(VideoEntry(vid, n_frames, cfg.frame_duration_s,
                                  f"features/{vid}_img.mntf", f"features/{vid}_sub.mntf",
                                  [int(b) for b in has_sub]))
        spans.append(Moment(vid, st, ed))
        span_concepts.append(frame_concepts[st:ed + 1].copy())

    def make_queries(split: str, per_video: int) -> list[Query]:
        out = []
        for i in range(cfg.n_videos):
            for j in range(per_video):
                qid = f"q_{split}_{i:04d}_{j}"
                n_words = int(rng.integers(cfg.min_query_len, cfg.max_query_len + 1))
                signature = cfg.n_concepts + i
                pool = span_concepts[i]
                if n_words > 1:
                    word_concepts = np.concatenate(
                        [[signature], rng.choice(pool, size=n_words - 1)])
                else:
                    word_concepts = np.array([signature])
                word_concepts = word_concepts[rng.permutation(n_words)]
                base = concepts[word_concepts].copy()
                # hard queries attenuate the signature word: the target video
                # stays uniquely identifiable but with a weak retrieval
                # margin, so it tends to land mid-ranking while its span
                # still matches the query for localization
                if rng.random() < cfg.hard_query_rate:
                    base[word_concepts == signature] *= cfg.hard_signature_scale
                if cfg.noise_std > 0:
                    base = (base + cfg.noise_std
                            * rng.standard_normal(base.shape)).astype(np.float32)
                out.append(Query(qid, base.astype(np.float32), spans[i]))
        return out

    queries = {
        "train": make_queries("train", cfg.queries_per_video_train),
        "test": make_queries("test", cfg.queries_per_video_test),
    }
    manifest = CorpusManifest(
        videos=entries, d_img=cfg.d_img, d_sub=cfg.d_sub, d_word=cfg.d_word, seed=seed,
        query_files={"train": "queries_train.jsonl", "test": "queries_test.jsonl"},
    )
    return manifest, videos, queries
