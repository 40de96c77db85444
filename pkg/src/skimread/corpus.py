"""Corpus handling: feature/caption ingestion, vocabularies, synthetic data.

Frame features arrive precomputed (one vector per sampled frame); this module
never touches raw video.  A deterministic synthetic corpus generator provides
desk-scale data whose captions and frame features share per-video topics, so
retrieval on it is actually learnable.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

FEATURE_MAGIC = b"RIVF"
FEATURE_VERSION = 1
SPECIAL_TOKEN = "<unk>"


class CorpusError(ValueError):
    """Raised for malformed corpus files or inconsistent corpus contents."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class FrameFeatureSequence:
    """A video as an ordered sequence of per-frame feature vectors."""

    video_id: str
    frames: np.ndarray  # (m, d_frame) float32

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise CorpusError(f"video {self.video_id!r}: need a (m>=1, d) frame array")
        if not np.isfinite(self.frames).all():
            raise CorpusError(f"video {self.video_id!r}: non-finite frame values")

    @property
    def m(self) -> int:
        return self.frames.shape[0]

    @property
    def d_frame(self) -> int:
        return self.frames.shape[1]


@dataclass
class Caption:
    """A tokenized sentence tied to one video."""

    sentence_id: str
    video_id: str
    tokens: list[str]
    external_embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.tokens:
            raise CorpusError(f"caption {self.sentence_id!r}: empty token list")
        self.tokens = [t.lower() for t in self.tokens]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class Vocabulary:
    """Word -> contiguous index map with a catch-all special token.

    Words below ``min_count`` in the training captions are not mapped and
    resolve to ``special_token_index`` at lookup time.
    """

    word2idx: dict[str, int]
    special_token_index: int
    min_count: int

    def __len__(self) -> int:
        return len(self.word2idx)

    def index(self, word: str) -> int:
        return self.word2idx.get(word, self.special_token_index)

    def indices(self, tokens: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    @property
    def size(self) -> int:
        return len(self.word2idx)


@dataclass
class ConceptVocabulary:
    """Concept word -> contiguous index map of size K."""

    concept2idx: dict[str, int]

    def __len__(self) -> int:
        return len(self.concept2idx)

    @property
    def size(self) -> int:
        return len(self.concept2idx)


@dataclass
class CorpusSplit:
    """One split of a corpus: videos, captions, and their pairing."""

    videos: list[FrameFeatureSequence]
    captions: list[Caption]

    pairing: dict[str, str] = field(init=False)     # sentence_id -> video_id
    video_by_id: dict[str, FrameFeatureSequence] = field(init=False)

    def __post_init__(self) -> None:
        self.video_by_id = {v.video_id: v for v in self.videos}
        if len(self.video_by_id) != len(self.videos):
            raise CorpusError("duplicate video_id in split")
        seen = set()
        for c in self.captions:
            if c.sentence_id in seen:
                raise CorpusError(f"duplicate sentence_id {c.sentence_id!r}")
            seen.add(c.sentence_id)
            if c.video_id not in self.video_by_id:
                raise CorpusError(
                    f"caption {c.sentence_id!r} references unknown video {c.video_id!r}"
                )
        self.pairing = {c.sentence_id: c.video_id for c in self.captions}

    @property
    def n_videos(self) -> int:
        return len(self.videos)

    @property
    def n_captions(self) -> int:
        return len(self.captions)

    def captions_of(self, video_id: str) -> list[Caption]:
        return [c for c in self.captions if c.video_id == video_id]


@dataclass
class Batch:
    """A list of (video, caption) training pairs.

    Within a batch, any (video, caption) combination whose ids are not linked
    in the corpus pairing counts as a negative for hardest-negative mining.
    """

    pairs: list[tuple[FrameFeatureSequence, Caption]]

    @property
    def size(self) -> int:
        return len(self.pairs)

    def negative_mask(self) -> np.ndarray:
        """(B, B) bool; entry [i, j] is True iff caption j is NOT paired with video i."""
        vids = [v.video_id for v, _ in self.pairs]
        cap_vids = [c.video_id for _, c in self.pairs]
        return np.array([[cv != vi for cv in cap_vids] for vi in vids], dtype=bool)


# ---------------------------------------------------------------------------
# binary frame-feature file format
# ---------------------------------------------------------------------------
# header: magic "RIVF", version u32, video count u32
# per video: id length u32, UTF-8 id, m u32, d_frame u32,
#            m*d_frame little-endian float32, row-major by frame

def write_frame_features(path: str, videos: Sequence[FrameFeatureSequence]) -> None:
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", FEATURE_VERSION, len(videos)))
        for v in videos:
            vid = v.video_id.encode("utf-8")
            f.write(struct.pack("<I", len(vid)))
            f.write(vid)
            f.write(struct.pack("<II", v.m, v.d_frame))
            f.write(np.ascontiguousarray(v.frames, dtype="<f4").tobytes())


def load_frame_features(path: str) -> list[FrameFeatureSequence]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: bad magic {data[:4]!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", data, off)
    except struct.error as e:
        raise CorpusError(f"{path}: truncated header") from e
    off += 8
    if version != FEATURE_VERSION:
        raise CorpusError(f"{path}: unsupported version {version}")
    videos: list[FrameFeatureSequence] = []
    for _ in range(count):
        try:
            (id_len,) = struct.unpack_from("<I", data, off)
            off += 4
            video_id = data[off : off + id_len].decode("utf-8")
            off += id_len
            m, d_frame = struct.unpack_from("<II", data, off)
            off += 8
        except (struct.error, UnicodeDecodeError) as e:
            raise CorpusError(f"{path}: malformed record at offset {off}") from e
        if m < 1 or d_frame < 1:
            raise CorpusError(f"{path}: video {video_id!r} declares m={m}, d={d_frame}")
        n_bytes = 4 * m * d_frame
        if off + n_bytes > len(data):
            raise CorpusError(
                f"{path}: video {video_id!r} declares {m}x{d_frame} floats "
                "but the file ends early"
            )
        frames = np.frombuffer(data[off : off + n_bytes], dtype="<f4").reshape(m, d_frame)
        off += n_bytes
        if not np.isfinite(frames).all():
            raise CorpusError(f"{path}: video {video_id!r} contains non-finite values")
        videos.append(FrameFeatureSequence(video_id, frames.copy()))
    if off != len(data):
        raise CorpusError(f"{path}: {len(data) - off} trailing bytes")
    return videos


def load_external_embeddings(path: str) -> dict[str, np.ndarray]:
    """Sentence-embedding file: the feature layout with m=1 per sentence_id."""
    records = load_frame_features(path)
    out: dict[str, np.ndarray] = {}
    for rec in records:
        if rec.m != 1:
            raise CorpusError(f"{path}: sentence {rec.video_id!r} has m={rec.m}, want 1")
        out[rec.video_id] = rec.frames[0]
    return out


# ---------------------------------------------------------------------------
# caption file format: sentence_id<TAB>video_id<TAB>sentence text
# ---------------------------------------------------------------------------

def write_captions(path: str, captions: Sequence[Caption]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for c in captions:
            f.write(f"{c.sentence_id}\t{c.video_id}\t{c.text}\n")


def load_captions(path: str) -> list[Caption]:
    captions: list[Caption] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3:
                raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated fields")
            sentence_id, video_id, text = parts
            tokens = text.lower().split()
            if not tokens:
                raise CorpusError(f"{path}:{lineno}: empty sentence")
            captions.append(Caption(sentence_id, video_id, tokens))
    return captions


# ---------------------------------------------------------------------------
# vocabularies
# ---------------------------------------------------------------------------

def build_vocabulary(captions: Sequence[Caption], min_count: int = 5) -> Vocabulary:
    """Map words occurring >= min_count times; everything else hits <unk>.

    Deterministic: the special token takes index 0, then words ordered by
    descending count with lexicographic tie-break.
    """
    if not captions:
        raise CorpusError("cannot build a vocabulary from zero captions")
    counts = Counter(t for c in captions for t in c.tokens)
    kept = sorted(
        (w for w, n in counts.items() if n >= min_count),
        key=lambda w: (-counts[w], w),
    )
    word2idx = {SPECIAL_TOKEN: 0}
    for w in kept:
        word2idx[w] = len(word2idx)
    return Vocabulary(word2idx=word2idx, special_token_index=0, min_count=min_count)


def build_concept_vocabulary(
    captions: Sequence[Caption], k_concepts: int
) -> ConceptVocabulary:
    """The K most frequent training words, ties broken lexicographically."""
    if not captions:
        raise CorpusError("cannot build a concept vocabulary from zero captions")
    counts = Counter(t for c in captions for t in c.tokens)
    if k_concepts < 1:
        raise CorpusError("k_concepts must be >= 1")
    if k_concepts > len(counts):
        raise CorpusError(
            f"k_concepts={k_concepts} exceeds {len(counts)} distinct training words"
        )
    ranked = sorted(counts, key=lambda w: (-counts[w], w))[:k_concepts]
    return ConceptVocabulary({w: i for i, w in enumerate(ranked)})


def concept_targets(caption: Caption, cv: ConceptVocabulary) -> np.ndarray:
    """Binary membership vector over the concept vocabulary."""
    target = np.zeros(cv.size, dtype=np.float64)
    for t in caption.tokens:
        idx = cv.concept2idx.get(t)
        if idx is not None:
            target[idx] = 1.0
    return target


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

TOPIC_PREFIX = "thing"

_FILLER_POOL = [
    "a", "the", "this", "that", "small", "large", "red", "blue", "green",
    "shiny", "dull", "fast", "slow", "quiet", "bright", "near", "under",
    "over", "beside", "slowly", "quickly", "gently", "twice", "again",
]

_TEMPLATES = [
    ("{det}", "{adj}", "{topic}", "{verb}", "{adv}"),
    ("{det}", "{topic}", "{verb}", "{adv}"),
    ("{adj}", "{topic}", "{verb}", "{det}", "{adj2}"),
]


def _split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = max(1, int(round(n * fractions[0])))
    n_val = max(1, int(round(n * fractions[1])))
    n_train = min(n_train, n - 2)
    n_val = min(n_val, n - n_train - 1)
    return n_train, n_val, n - n_train - n_val


def make_synthetic_corpus(
    seed: int,
    n_videos: int = 48,
    captions_per_video: int = 1,
    m_range: tuple[int, int] = (4, 8),
    d_frame: int = 16,
    vocab_size: int = 72,
    n_topics: int = 0,
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> tuple[CorpusSplit, CorpusSplit, CorpusSplit]:
    """Deterministic synthetic corpus as (train, val, test).

    Each video carries a topic; its frame features cluster around a
    topic-specific direction and every one of its captions contains the topic
    word, so captions identify videos through a learnable signal.
    ``n_topics=0`` gives every video its own topic (test/val topics then do
    not occur in training captions); a positive value shares topics across
    videos round-robin.
    """
    if n_videos < 3:
        raise CorpusError("need at least 3 videos to populate three splits")
    if captions_per_video < 1 or d_frame < 1 or vocab_size < 1:
        raise CorpusError("all synthetic corpus sizes must be positive")
    if m_range[0] < 1 or m_range[1] < m_range[0]:
        raise CorpusError(f"bad m_range {m_range}")
    n_topics = n_topics if n_topics > 0 else n_videos
    n_fillers = vocab_size - n_topics
    if n_fillers < 6:
        raise CorpusError(
            f"vocab_size={vocab_size} leaves {n_fillers} filler words; need >= 6"
        )

    rng = np.random.default_rng(seed)
    topics = [f"{TOPIC_PREFIX}{t:03d}" for t in range(n_topics)]
    fillers = [
        _FILLER_POOL[i] if i < len(_FILLER_POOL) else f"word{i:03d}"
        for i in range(n_fillers)
    ]
    dets = fillers[:4]
    adjs = fillers[4 : max(5, n_fillers // 2)]
    verbs = fillers[max(5, n_fillers // 2) :] or fillers[-1:]
    # directions the frame features cluster around, one per topic
    centroids = rng.normal(size=(n_topics, d_frame))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)

    videos: list[FrameFeatureSequence] = []
    captions: list[Caption] = []
    for i in range(n_videos):
        topic_idx = i % n_topics
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        frames = 2.0 * centroids[topic_idx] + 0.25 * rng.normal(size=(m, d_frame))
        video_id = f"video{i:04d}"
        videos.append(FrameFeatureSequence(video_id, frames.astype(np.float32)))
        for j in range(captions_per_video):
            template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
            words = {
                "det": dets[int(rng.integers(len(dets)))],
                "adj": adjs[int(rng.integers(len(adjs)))],
                "adj2": adjs[int(rng.integers(len(adjs)))],
                "verb": verbs[int(rng.integers(len(verbs)))],
                "adv": fillers[int(rng.integers(len(fillers)))],
                "topic": topics[topic_idx],
            }
            tokens = [slot.format(**words) for slot in template]
            captions.append(Caption(f"sent{i:04d}_{j:02d}", video_id, tokens))

    order = rng.permutation(n_videos)
    n_train, n_val, _ = _split_sizes(n_videos, split_fractions)
    idx_train = set(order[:n_train].tolist())
    idx_val = set(order[n_train : n_train + n_val].tolist())

    def take(indices: set[int]) -> CorpusSplit:
        vids = [videos[i] for i in range(n_videos) if i in indices]
        vid_ids = {v.video_id for v in vids}
        caps = [c for c in captions if c.video_id in vid_ids]
        return CorpusSplit(vids, caps)

    idx_test = set(range(n_videos)) - idx_train - idx_val
    return take(idx_train), take(idx_val), take(idx_test)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_iter(split: CorpusSplit, batch_size: int, seed: int) -> Iterator[Batch]:
    """One epoch of batches over a seeded random permutation of the captions.

    The final short batch is emitted.  batch_size >= 2 because hardest-negative
    mining needs at least one in-batch negative.
    """
    if batch_size < 2:
        raise CorpusError("batch_size must be >= 2 for in-batch negative mining")
    rng = np.random.default_rng(seed)
    order = rng.permutation(split.n_captions)
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        pairs = [
            (split.video_by_id[split.captions[i].video_id], split.captions[i])
            for i in chunk
        ]
        yield Batch(pairs)


def topic_agreement(
    split: CorpusSplit, similarity: Callable[[np.ndarray, np.ndarray], float] | None = None
) -> tuple[float, float]:
    """(within, cross) mean cosine between video mean-features grouped by caption topic.

    Topic of a video = the topic-prefixed token shared by all its captions;
    only meaningful for synthetic corpora from make_synthetic_corpus.
    """
    if similarity is None:
        def similarity(a: np.ndarray, b: np.ndarray) -> float:
            return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    topic_of: dict[str, str] = {}
    for v in split.videos:
        shared: set[str] | None = None
        for c in split.captions_of(v.video_id):
            shared = set(c.tokens) if shared is None else shared & set(c.tokens)
        topical = sorted(t for t in (shared or set()) if t.startswith(TOPIC_PREFIX))
        topic_of[v.video_id] = topical[0] if topical else ""
    means = {v.video_id: v.frames.mean(axis=0) for v in split.videos}
    within, cross = [], []
    ids = [v.video_id for v in split.videos]
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            sim = similarity(means[a], means[b])
            (within if topic_of[a] == topic_of[b] else cross).append(sim)
    w = float(np.mean(within)) if within else 1.0
    c = float(np.mean(cross)) if cross else -1.0
    return w, c
