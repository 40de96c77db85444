"""Retrieval evaluation: similarity matrices, rank metrics, v2v protocol.

Ranking is deterministic: candidates sort by descending similarity with ties
broken by ascending candidate id.  R@K values are percentages; SumR is their
sum; Med r is the median (lower middle for even counts) of the first-relevant
rank; mAP averages precision over all relevant items.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import Caption, CorpusSplit
from .model import RetrievalModel, VideoEncoding


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# similarity matrices
# ---------------------------------------------------------------------------

@dataclass
class SimilarityMatrix:
    matrix: np.ndarray           # (n_queries, n_candidates)
    query_ids: list[str]
    candidate_ids: list[str]
    direction: str               # "t2v" or "v2v"

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (len(self.query_ids), len(self.candidate_ids)):
            raise EvalError("matrix shape does not match id lists")
        if len(set(self.query_ids)) != len(self.query_ids):
            raise EvalError("duplicate query ids")
        if len(set(self.candidate_ids)) != len(self.candidate_ids):
            raise EvalError("duplicate candidate ids")
        if not np.isfinite(self.matrix).all():
            raise EvalError("similarity matrix contains non-finite entries")


def encode_videos(
    model: RetrievalModel, split: CorpusSplit
) -> tuple[list[str], list[VideoEncoding]]:
    ids = sorted(v.video_id for v in split.videos)
    with torch.no_grad():
        encs = [model.encode_video(split.video_by_id[i].frames) for i in ids]
    return ids, encs


def similarity_matrix(
    model: RetrievalModel,
    split: CorpusSplit,
    direction: str = "t2v",
    branch: str = "both",
    space: str = "raw",
) -> SimilarityMatrix:
    """Score every query against every candidate.

    t2v: queries are captions, candidates are videos, scores are the hybrid
    retrieval similarity.  v2v: queries and candidates are videos, scores are
    cosine similarities of branch features (raw) or of their latent
    projections (space="latent"); branch selects preview / intensive / both
    (both = concatenation).
    """
    if split.n_videos == 0 or split.n_captions == 0:
        raise EvalError("cannot evaluate an empty split")
    vid_ids, encs = encode_videos(model, split)
    if direction == "t2v":
        cap_ids = sorted(c.sentence_id for c in split.captions)
        caps = {c.sentence_id: c for c in split.captions}
        with torch.no_grad():
            text_feats = [model.encode_caption(caps[i]) for i in cap_ids]
            matrix = np.array(
                [
                    [model.pair_similarity(enc, feat) for enc in encs]
                    for feat in text_feats
                ]
            )
        return SimilarityMatrix(matrix, cap_ids, vid_ids, "t2v")
    if direction == "v2v":
        feats = _branch_features(model, encs, branch, space)
        matrix = np.array(
            [[_cosine(a, b) for b in feats] for a in feats]
        )
        return SimilarityMatrix(matrix, vid_ids, vid_ids, "v2v")
    raise EvalError(f"unknown direction {direction!r}")


def _branch_features(
    model: RetrievalModel,
    encs: Sequence[VideoEncoding],
    branch: str,
    space: str,
) -> list[np.ndarray]:
    if branch not in ("preview", "intensive", "both"):
        raise EvalError(f"unknown branch {branch!r}")
    if space not in ("raw", "latent"):
        raise EvalError(f"unknown space {space!r}")
    out = []
    with torch.no_grad():
        for e in encs:
            parts = []
            if branch in ("preview", "both"):
                if e.p is None:
                    raise EvalError("preview branch not present in this model")
                vec = e.p
                if space == "latent":
                    vec = model.preview_space.video_latent(vec)
                parts.append(vec)
            if branch in ("intensive", "both"):
                if e.g is None:
                    raise EvalError("intensive branch not present in this model")
                vec = e.g
                if space == "latent":
                    vec = model.intensive_space.video_latent(vec)
                parts.append(vec)
            out.append(torch.cat(parts).numpy())
    return out


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def t2v_ground_truth(split: CorpusSplit) -> dict[str, set[str]]:
    return {c.sentence_id: {c.video_id} for c in split.captions}


# ---------------------------------------------------------------------------
# rank metrics
# ---------------------------------------------------------------------------

@dataclass
class RankMetrics:
    r1: float
    r5: float
    r10: float
    med_r: float
    mean_ap: float
    sum_r: float
    ndcg: float | None = None

    def __post_init__(self) -> None:
        if not (self.r1 <= self.r5 <= self.r10):
            raise EvalError(f"recall ordering violated: {self.r1}, {self.r5}, {self.r10}")
        if self.sum_r != self.r1 + self.r5 + self.r10:
            raise EvalError("SumR identity violated")

    def as_dict(self) -> dict:
        d = {
            "R@1": self.r1, "R@5": self.r5, "R@10": self.r10,
            "Med r": self.med_r, "mAP": self.mean_ap, "SumR": self.sum_r,
        }
        if self.ndcg is not None:
            d["nDCG"] = self.ndcg
        return d


def _ranked_candidates(
    sims: np.ndarray, candidate_ids: list[str], skip: set[str]
) -> list[int]:
    """Candidate indices by descending similarity, ties by ascending id."""
    order = sorted(
        (j for j in range(len(candidate_ids)) if candidate_ids[j] not in skip),
        key=lambda j: (-sims[j], candidate_ids[j]),
    )
    return order


def rank_metrics(
    sim: SimilarityMatrix,
    relevant: dict[str, set[str]],
    ignore: dict[str, set[str]] | None = None,
) -> RankMetrics:
    """Rank-based retrieval metrics over all queries.

    relevant maps each query id to its relevant candidate ids (>= 1 each).
    ignore removes candidates from individual queries' rankings (the v2v
    protocol drops the query video itself).
    """
    first_ranks: list[int] = []
    aps: list[float] = []
    for qi, qid in enumerate(sim.query_ids):
        rel = relevant.get(qid, set())
        skip = ignore.get(qid, set()) if ignore else set()
        rel = rel - skip
        if not rel:
            raise EvalError(f"query {qid!r} has no relevant candidate")
        order = _ranked_candidates(sim.matrix[qi], sim.candidate_ids, skip)
        first = None
        hits = 0
        precisions: list[float] = []
        for rank, j in enumerate(order, start=1):
            if sim.candidate_ids[j] in rel:
                hits += 1
                precisions.append(hits / rank)
                if first is None:
                    first = rank
        if first is None:
            raise EvalError(f"query {qid!r}: relevant ids missing from candidates")
        first_ranks.append(first)
        aps.append(sum(precisions) / len(precisions))
    n = len(first_ranks)
    r1 = 100.0 * sum(1 for r in first_ranks if r <= 1) / n
    r5 = 100.0 * sum(1 for r in first_ranks if r <= 5) / n
    r10 = 100.0 * sum(1 for r in first_ranks if r <= 10) / n
    med = float(sorted(first_ranks)[(n - 1) // 2])
    return RankMetrics(
        r1=r1, r5=r5, r10=r10, med_r=med,
        mean_ap=sum(aps) / n, sum_r=r1 + r5 + r10,
    )


def ndcg(
    sim: SimilarityMatrix,
    relevance: dict[str, dict[str, float]],
    cutoff: int | None = None,
    ignore: dict[str, set[str]] | None = None,
) -> float:
    """Mean nDCG: gain = relevance, discount 1/log2(rank + 1), full list default.

    A query whose relevance is all zero contributes 0.
    """
    scores = []
    for qi, qid in enumerate(sim.query_ids):
        gains = relevance.get(qid, {})
        skip = ignore.get(qid, set()) if ignore else set()
        order = _ranked_candidates(sim.matrix[qi], sim.candidate_ids, skip)
        if cutoff is not None:
            order = order[:cutoff]
        dcg = sum(
            gains.get(sim.candidate_ids[j], 0.0) / math.log2(rank + 1)
            for rank, j in enumerate(order, start=1)
        )
        ideal_gains = sorted(
            (g for cid, g in gains.items() if cid not in skip), reverse=True
        )
        if cutoff is not None:
            ideal_gains = ideal_gains[:cutoff]
        idcg = sum(g / math.log2(rank + 1) for rank, g in enumerate(ideal_gains, 1))
        scores.append(dcg / idcg if idcg > 0 else 0.0)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# video-to-video annotation protocol
# ---------------------------------------------------------------------------

def token_set_jaccard(a: Caption, b: Caption) -> float:
    """Default sentence similarity: Jaccard over the two token sets."""
    sa, sb = set(a.tokens), set(b.tokens)
    union = sa | sb
    return len(sa & sb) / len(union) if union else 0.0


@dataclass
class V2VAnnotation:
    pair_similarity: dict[tuple[str, str], float]   # both orders of each pair
    relevant: dict[str, set[str]]                   # query video -> relevant videos
    queries: list[str]                              # videos with >= 1 relevant
    threshold: float

    def graded_relevance(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {q: {} for q in self.queries}
        for (a, b), s in self.pair_similarity.items():
            if a in out and s > 0:
                out[a][b] = s
        return out

    def binary_relevance(self) -> dict[str, dict[str, float]]:
        return {
            q: {c: 1.0 for c in self.relevant[q]} for q in self.queries
        }


def build_v2v_annotations(
    split: CorpusSplit,
    sentence_sim_fn: Callable[[Caption, Caption], float] | None = None,
    threshold: float = 0.2,
) -> V2VAnnotation:
    """Video pair similarity = mean sentence similarity over the caption
    cross product; pairs above the threshold (strict) are relevant; queries
    are the videos with at least one relevant partner."""
    fn = sentence_sim_fn or token_set_jaccard
    caps = {v.video_id: split.captions_of(v.video_id) for v in split.videos}
    for vid, cs in caps.items():
        if not cs:
            raise EvalError(f"video {vid!r} has no captions")
    ids = sorted(caps)
    pair_sim: dict[tuple[str, str], float] = {}
    relevant: dict[str, set[str]] = {i: set() for i in ids}
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            sims = [fn(ca, cb) for ca in caps[a] for cb in caps[b]]
            s = float(np.mean(sims))
            pair_sim[(a, b)] = s
            pair_sim[(b, a)] = s
            if s > threshold:
                relevant[a].add(b)
                relevant[b].add(a)
    queries = [i for i in ids if relevant[i]]
    return V2VAnnotation(
        pair_similarity=pair_sim,
        relevant={q: relevant[q] for q in queries},
        queries=queries,
        threshold=threshold,
    )


def v2v_metrics(
    model: RetrievalModel,
    split: CorpusSplit,
    annotation: V2VAnnotation,
    branch: str = "both",
    space: str = "raw",
    graded: bool = False,
) -> tuple[RankMetrics, float]:
    """Rank metrics + nDCG for video-to-video retrieval under an annotation."""
    sims = similarity_matrix(model, split, direction="v2v", branch=branch, space=space)
    keep = [i for i, q in enumerate(sims.query_ids) if q in annotation.relevant]
    filtered = SimilarityMatrix(
        sims.matrix[keep],
        [sims.query_ids[i] for i in keep],
        sims.candidate_ids,
        "v2v",
    )
    ignore = {q: {q} for q in filtered.query_ids}   # never retrieve the query itself
    metrics = rank_metrics(filtered, annotation.relevant, ignore=ignore)
    rel = annotation.graded_relevance() if graded else annotation.binary_relevance()
    metrics.ndcg = ndcg(filtered, rel, ignore=ignore)
    return metrics, metrics.ndcg


# ---------------------------------------------------------------------------
# model statistics
# ---------------------------------------------------------------------------

@dataclass
class ModelStats:
    parameters: int
    macs: int
    breakdown: dict[str, int]


def model_stats(model: RetrievalModel, m: int = 32, sentence_len: int = 8) -> ModelStats:
    """Exact trainable-parameter count plus an analytic multiply-accumulate
    estimate for encoding one (video, sentence) pair; m = frame count."""
    cfg = model.cfg
    macs: dict[str, int] = {}
    L = sentence_len

    t = cfg.text
    gru_text = L * 2 * (3 * t.h_text * t.d_word + 3 * t.h_text * t.h_text)
    conv_text = sum(
        (max(L, w) - w + 1) * t.r_text * (w * 2 * t.h_text) for w in t.windows
    )
    macs["text"] = gru_text + conv_text

    if model.has_preview:
        p = cfg.preview
        if p.kind == "bigru":
            macs["preview"] = m * 2 * (
                3 * p.hidden * model.d_frame + 3 * p.hidden * p.hidden
            )
        else:
            macs["preview"] = m * model.d_frame * p.out_dim
    if model.has_intensive:
        i = cfg.intensive
        d_query = cfg.preview.out_dim
        total = m * model.d_frame * i.d_map
        for n in i.windows:
            m_n = (max(m, n) - n) // i.stride + 1
            total += m_n * i.filters * (n * i.d_map)
            total += _attention_macs(i, d_query, m_n)
        macs["intensive"] = total

    d_text = model.text_encoder.out_dim
    h = cfg.hybrid
    spaces = 0
    if model.preview_space is not None:
        spaces += _space_macs(cfg.preview.out_dim, d_text, h.d_lat, h.k_concepts)
    if model.intensive_space is not None:
        spaces += _space_macs(
            model.intensive_encoder.out_dim, d_text, h.d_lat, h.k_concepts
        )
    macs["hybrid"] = spaces

    return ModelStats(
        parameters=model.parameter_count(),
        macs=sum(macs.values()),
        breakdown=macs,
    )


def _attention_macs(i, d_query: int, m_n: int) -> int:
    r, d_k, d_v, d_ff = i.filters, i.d_k, i.d_v, i.ff_dim
    tail = d_v * d_ff + d_ff * d_v                     # MLP
    if i.variant == "paa":
        core = d_query * d_k + m_n * r * d_k + m_n * r * d_v
        core += m_n * d_k + m_n * d_v + d_v * d_v      # scores, mix, W4
    elif i.variant == "mean":
        core = m_n * r + r * d_v + d_v * d_v
    elif i.variant == "simple":
        core = m_n * (d_query + r) + m_n * r + r * d_v + d_v * d_v
    else:                                              # self-attention variants
        fuse = m_n * (r + d_query) * r if i.variant == "concat_sa" else d_query * r
        core = fuse + m_n * r * d_k * 2 + m_n * r * d_v
        core += m_n * m_n * d_k + m_n * m_n * d_v + m_n * d_v * d_v
    return core + tail


def _space_macs(video_dim: int, text_dim: int, d_lat: int, k: int) -> int:
    proj = video_dim * d_lat + video_dim * k + text_dim * d_lat + text_dim * k
    return proj + 3 * d_lat                            # cosine dot + two norms


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_run_record(path: str, run_id: str, config_hash: str, metrics: dict) -> None:
    """Append one machine-readable record (JSON line) for a run."""
    record = {"run_id": run_id, "config_hash": config_hash, "metrics": metrics}
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


METRIC_COLUMNS = ("R@1", "R@5", "R@10", "Med r", "mAP", "SumR")


def format_table(rows: list[dict], label_key: str = "cell") -> str:
    """Aligned plain-text table with the standard metric column layout."""
    label_w = max([len(str(r.get(label_key, ""))) for r in rows] + [len(label_key)])
    header = f"{label_key:<{label_w}}  " + "  ".join(f"{c:>8}" for c in METRIC_COLUMNS)
    lines = [header, "-" * len(header)]
    for r in rows:
        cells = []
        for c in METRIC_COLUMNS:
            v = r.get(c)
            cells.append(f"{v:>8.1f}" if isinstance(v, (int, float)) else f"{'-':>8}")
        lines.append(f"{str(r.get(label_key, '')):<{label_w}}  " + "  ".join(cells))
    return "\n".join(lines)


def dump_attention(model: RetrievalModel, split: CorpusSplit, path: str) -> None:
    """Write per-video, per-granularity attention weights as text rows."""
    if not model.has_intensive:
        raise EvalError("attention dumps need the intensive branch")
    ids, encs = encode_videos(model, split)
    with open(path, "w", encoding="utf-8") as f:
        for vid, enc in zip(ids, encs):
            for n, w in sorted(enc.attention.items()):
                flat = w.detach().reshape(-1).tolist()
                f.write(f"{vid}\t{n}\t" + " ".join(f"{x:.6f}" for x in flat) + "\n")


def emit_plots(log_entries: list, out_dir: str) -> list[str]:
    """Metric-vs-epoch curves as SVG files; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [e.epoch for e in log_entries]
    written = []
    for attr, label, fname in (
        ("train_loss", "training loss", "loss_vs_epoch.svg"),
        ("val_objective", "validation objective", "objective_vs_epoch.svg"),
    ):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(epochs, [getattr(e, attr) for e in log_entries])
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        fig.tight_layout()
        path = f"{out_dir}/{fname}"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
