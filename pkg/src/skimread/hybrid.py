"""Hybrid-space learning: latent + concept projections, similarities, losses.

A hybrid space pairs a latent space (cosine similarity) with a concept space
(sigmoid probabilities compared by generalized Jaccard), blended by a weight
alpha.  One space is learned per branch; the retrieval score of a video-text
pair is the sum of its similarities in the two spaces.

Losses per space: an improved triplet ranking loss (hardest in-batch negative,
both retrieval directions) on each of the latent and concept similarities,
plus binary cross-entropy tying video-side and text-side concept
probabilities to the caption's concept targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import HybridConfig, LossConfig
from .layers import make_linear

logger = logging.getLogger(__name__)
_warned_degenerate = False

_NEG_FILL = -1e18  # stands in for "no negative here" inside row/col maxima


def _as_vector(x) -> Tensor:
    t = torch.as_tensor(x, dtype=torch.float64) if not isinstance(x, Tensor) else x
    if t.ndim != 1:
        raise ValueError(f"expected a vector, got shape {tuple(t.shape)}")
    return t.detach()


def cosine_sim(a, b) -> float:
    """a.b / (|a||b|); degenerate inputs (norm < 1e-12) score 0."""
    global _warned_degenerate
    a, b = _as_vector(a), _as_vector(b)
    na, nb = float(a.norm()), float(b.norm())
    if na < 1e-12 or nb < 1e-12:
        if not _warned_degenerate:
            logger.warning("cosine_sim called with a (near-)zero vector; returning 0")
            _warned_degenerate = True
        return 0.0
    return float(a @ b / (na * nb))


def jaccard_sim(a, b) -> float:
    """Generalized Jaccard: sum(min) / sum(max) over non-negative vectors."""
    a, b = _as_vector(a), _as_vector(b)
    if (a < 0).any() or (b < 0).any():
        raise ValueError("generalized Jaccard requires non-negative components")
    denom = float(torch.maximum(a, b).sum())
    if denom == 0.0:
        return 0.0
    return float(torch.minimum(a, b).sum() / denom)


def cosine_sim_matrix(a: Tensor, b: Tensor) -> Tensor:
    """(n, d) x (m, d) -> (n, m) cosine similarities, zero-safe."""
    na = a.norm(dim=1, keepdim=True).clamp_min(1e-12)
    nb = b.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return (a / na) @ (b / nb).T


def jaccard_sim_matrix(a: Tensor, b: Tensor) -> Tensor:
    """(n, K) x (m, K) -> (n, m) generalized Jaccard similarities."""
    lo = torch.minimum(a.unsqueeze(1), b.unsqueeze(0)).sum(dim=2)
    hi = torch.maximum(a.unsqueeze(1), b.unsqueeze(0)).sum(dim=2)
    return lo / hi.clamp_min(1e-12)


def triplet_loss(
    sims: Tensor, margin: float, negative_mask: Tensor | None = None
) -> Tensor:
    """Hardest-negative triplet ranking loss on a (B, B) similarity matrix.

    The diagonal holds positive-pair similarities.  For each index i the
    hardest negative caption (row direction) and hardest negative video
    (column direction) each contribute a hinge; the result is the mean over i.
    negative_mask[i, j] = False removes (video i, caption j) from the negative
    pool (used when a batch carries several captions of one video).
    """
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ValueError(f"expected a square matrix, got {tuple(sims.shape)}")
    b = sims.shape[0]
    if b < 2:
        raise ValueError("triplet loss needs a batch of at least 2")
    mask = torch.ones(b, b, dtype=torch.bool, device=sims.device)
    mask.fill_diagonal_(False)
    if negative_mask is not None:
        mask &= negative_mask.to(torch.bool)
    pos = sims.diagonal()
    masked = torch.where(mask, sims, torch.full_like(sims, _NEG_FILL))
    hardest_caption = masked.max(dim=1).values          # per video
    hardest_video = masked.max(dim=0).values            # per caption
    loss = (
        torch.relu(margin + hardest_caption - pos)
        + torch.relu(margin + hardest_video - pos)
    )
    return loss.mean()


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.clamp(1e-7, 1.0 - 1e-7)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


@dataclass
class LossValue:
    """Weighted loss decomposition for one or both hybrid spaces."""

    total: Tensor
    triplet_lat: float
    triplet_con: float
    bce_con: float

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(
            total=self.total + other.total,
            triplet_lat=self.triplet_lat + other.triplet_lat,
            triplet_con=self.triplet_con + other.triplet_con,
            bce_con=self.bce_con + other.bce_con,
        )

    @property
    def value(self) -> float:
        return float(self.total.detach())


class HybridSpace(nn.Module):
    """Latent + concept projections for one branch and its paired text side."""

    def __init__(
        self,
        video_dim: int,
        text_dim: int,
        cfg: HybridConfig,
        dtype: torch.dtype,
        generator: torch.Generator,
        shared_text: "HybridSpace | None" = None,
    ):
        super().__init__()
        self.alpha = cfg.alpha
        self.concept_triplet_sim = cfg.concept_triplet_sim
        self.video_latent = make_linear(video_dim, cfg.d_lat, dtype, generator)
        self.video_concept = make_linear(video_dim, cfg.k_concepts, dtype, generator)
        if shared_text is not None:
            self.text_latent = shared_text.text_latent
            self.text_concept = shared_text.text_concept
        else:
            self.text_latent = make_linear(text_dim, cfg.d_lat, dtype, generator)
            self.text_concept = make_linear(text_dim, cfg.k_concepts, dtype, generator)

    # -- projections ---------------------------------------------------------

    def project_video(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """(latent, concept-probability) views of branch features."""
        return self.video_latent(feats), torch.sigmoid(self.video_concept(feats))

    def project_text(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        return self.text_latent(feats), torch.sigmoid(self.text_concept(feats))

    # -- similarities ----------------------------------------------------------

    def sim(self, video_vec: Tensor, text_vec: Tensor) -> float:
        """Blended similarity of one (video, sentence) pair in this space."""
        lat_v, con_v = self.project_video(video_vec)
        lat_s, con_s = self.project_text(text_vec)
        return self.alpha * cosine_sim(lat_v, lat_s) + (
            1.0 - self.alpha
        ) * jaccard_sim(con_v, con_s)

    def sim_matrix(self, video_feats: Tensor, text_feats: Tensor) -> Tensor:
        """(n_videos, n_texts) blended similarities."""
        lat_v, con_v = self.project_video(video_feats)
        lat_s, con_s = self.project_text(text_feats)
        return self.alpha * cosine_sim_matrix(lat_v, lat_s) + (
            1.0 - self.alpha
        ) * jaccard_sim_matrix(con_v, con_s)

    # -- training loss -----------------------------------------------------------

    def space_loss(
        self,
        video_feats: Tensor,
        text_feats: Tensor,
        concept_targets: Tensor,
        loss_cfg: LossConfig,
        negative_mask: Tensor | None = None,
    ) -> LossValue:
        """Triplet (latent + concept similarities) plus concept BCE."""
        if video_feats.shape[0] < 2:
            raise ValueError("space_loss needs a batch of at least 2 pairs")
        lat_v, con_v = self.project_video(video_feats)
        lat_s, con_s = self.project_text(text_feats)
        trip_lat = loss_cfg.w_lat * triplet_loss(
            cosine_sim_matrix(lat_v, lat_s), loss_cfg.margin, negative_mask
        )
        if loss_cfg.concept_terms:
            if self.concept_triplet_sim == "jaccard":
                con_sims = jaccard_sim_matrix(con_v, con_s)
            else:
                con_sims = cosine_sim_matrix(con_v, con_s)
            trip_con = loss_cfg.w_con_trip * triplet_loss(
                con_sims, loss_cfg.margin, negative_mask
            )
            bce = loss_cfg.w_bce * (
                bce_loss(con_v, concept_targets) + bce_loss(con_s, concept_targets)
            )
        else:
            trip_con = trip_lat.new_zeros(())
            bce = trip_lat.new_zeros(())
        total = trip_lat + trip_con + bce
        return LossValue(
            total=total,
            triplet_lat=float(trip_lat.detach()),
            triplet_con=float(trip_con.detach()),
            bce_con=float(bce.detach()),
        )
