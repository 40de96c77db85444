"""The full two-branch retrieval model.

A video is encoded by a previewing branch (overview vector p) and an
intensive-reading branch (fine-grained vector g) whose attention query is p,
so the branches are dependent.  Each branch owns a hybrid space against the
shared multi-level text encoding; the retrieval score of a pair is the sum of
its per-space similarities.

Topology knobs: either branch can be dropped, and the dependency can be cut
by replacing the attention query with a learned constant vector (the
"independent" ablation; also the query source whenever the previewing branch
is absent).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .config import Config
from .corpus import Batch, Caption, ConceptVocabulary, Vocabulary, concept_targets
from .hybrid import HybridSpace, LossValue
from .intensive import IntensiveEncoder
from .preview import PreviewEncoder
from .textenc import TextEncoder


def torch_dtype(name: str) -> torch.dtype:
    if name == "float64":
        return torch.float64
    if name == "float32":
        return torch.float32
    raise ValueError(f"unsupported dtype {name!r}")


@dataclass
class VideoEncoding:
    """Branch outputs for one video; absent branches are None."""

    p: Tensor | None
    g: Tensor | None
    attention: dict[int, Tensor] | None  # window size -> weights


class RetrievalModel(nn.Module):
    """Two-branch video encoder + text encoder + per-branch hybrid spaces."""

    def __init__(
        self,
        cfg: Config,
        vocab: Vocabulary,
        concept_vocab: ConceptVocabulary,
        d_frame: int,
    ):
        super().__init__()
        cfg.validate()
        if concept_vocab.size != cfg.hybrid.k_concepts:
            raise ValueError(
                f"concept vocabulary size {concept_vocab.size} != configured "
                f"k_concepts {cfg.hybrid.k_concepts}"
            )
        self.cfg = cfg
        self.vocab = vocab
        self.concept_vocab = concept_vocab
        self.d_frame = d_frame
        self.dtype = torch_dtype(cfg.train.dtype)
        generator = torch.Generator().manual_seed(cfg.train.seed)

        self.text_encoder = TextEncoder(vocab, cfg.text, self.dtype, generator)

        self.has_preview = cfg.model.branches in ("preview", "both")
        self.has_intensive = cfg.model.branches in ("intensive", "both")
        self.dependent = cfg.model.dependent

        self.preview_encoder = (
            PreviewEncoder(d_frame, cfg.preview, self.dtype, generator)
            if self.has_preview
            else None
        )
        d_query = cfg.preview.out_dim
        if self.has_intensive:
            self.intensive_encoder = IntensiveEncoder(
                d_frame, d_query, cfg.intensive, self.dtype, generator
            )
            if not (self.has_preview and self.dependent):
                # learned stand-in for the overview query
                bound = 1.0 / np.sqrt(d_query)
                self.const_query = nn.Parameter(
                    torch.empty(d_query, dtype=self.dtype).uniform_(
                        -bound, bound, generator=generator
                    )
                )
        else:
            self.intensive_encoder = None

        text_dim = self.text_encoder.out_dim
        self.preview_space = (
            HybridSpace(cfg.preview.out_dim, text_dim, cfg.hybrid, self.dtype, generator)
            if self.has_preview
            else None
        )
        if self.has_intensive:
            shared = self.preview_space if cfg.hybrid.share_text_proj else None
            self.intensive_space = HybridSpace(
                self.intensive_encoder.out_dim,
                text_dim,
                cfg.hybrid,
                self.dtype,
                generator,
                shared_text=shared,
            )
        else:
            self.intensive_space = None

    # -- encoding ---------------------------------------------------------------

    def frames_tensor(self, frames: np.ndarray | Tensor) -> Tensor:
        t = torch.as_tensor(np.asarray(frames)) if not isinstance(frames, Tensor) else frames
        return t.to(self.dtype)

    def encode_video(self, frames: np.ndarray | Tensor) -> VideoEncoding:
        x = self.frames_tensor(frames)
        p = self.preview_encoder(x) if self.has_preview else None
        g, attention = None, None
        if self.has_intensive:
            query = p if (self.dependent and p is not None) else self.const_query
            g, attention = self.intensive_encoder(x, query)
        return VideoEncoding(p=p, g=g, attention=attention)

    def encode_caption(self, caption: Caption) -> Tensor:
        return self.text_encoder(caption)

    # -- similarity ---------------------------------------------------------------

    def pair_similarity(self, enc: VideoEncoding, text_feat: Tensor) -> float:
        """Retrieval score: sum of hybrid similarities over the active spaces."""
        total = 0.0
        if self.preview_space is not None:
            total += self.preview_space.sim(enc.p, text_feat)
        if self.intensive_space is not None:
            total += self.intensive_space.sim(enc.g, text_feat)
        return total

    def similarity(self, frames: np.ndarray | Tensor, caption: Caption) -> float:
        with torch.no_grad():
            return self.pair_similarity(
                self.encode_video(frames), self.encode_caption(caption)
            )

    # -- training loss ---------------------------------------------------------------

    def concept_target_matrix(self, captions: list[Caption]) -> Tensor:
        rows = [concept_targets(c, self.concept_vocab) for c in captions]
        return torch.as_tensor(np.stack(rows), dtype=self.dtype)

    def batch_loss(self, batch: Batch) -> LossValue:
        """Sum of the per-space losses on one batch of (video, caption) pairs."""
        encodings = [self.encode_video(v.frames) for v, _ in batch.pairs]
        text_feats = torch.stack([self.encode_caption(c) for _, c in batch.pairs])
        targets = self.concept_target_matrix([c for _, c in batch.pairs])
        neg_mask = torch.as_tensor(batch.negative_mask())
        total: LossValue | None = None
        if self.preview_space is not None:
            p_feats = torch.stack([e.p for e in encodings])
            total = self.preview_space.space_loss(
                p_feats, text_feats, targets, self.cfg.loss, neg_mask
            )
        if self.intensive_space is not None:
            g_feats = torch.stack([e.g for e in encodings])
            part = self.intensive_space.space_loss(
                g_feats, text_feats, targets, self.cfg.loss, neg_mask
            )
            total = part if total is None else total + part
        assert total is not None
        return total

    # -- stats ---------------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)
