"""Intensive-reading branch: multi-granularity segments + guided attention.

Frames are affinely mapped down, grouped into overlapping segments by strided
1-D convolutions (one bank per window size), and each segment bank is
aggregated into a single vector by an attention block whose query is the
previewing branch's overview vector.  Per-granularity outputs are concatenated
in ascending window order.

The attention block has one head.  Ablation variants replace the attention
step but keep the same residual / layer-norm / feed-forward tail:

* ``mean``       temporal mean of the segments,
* ``simple``     softmax weights from an affine scorer on [query || segment],
* ``concat_sa``  fuse the query into every segment by concatenation+affine,
                 then self-attention and a temporal mean,
* ``sum_sa``     fuse by summation (query projected to segment width), then
                 self-attention and a temporal mean.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import IntensiveConfig
from .layers import MLP, make_linear, uniform_fan_in_

VARIANTS = ("paa", "mean", "simple", "concat_sa", "sum_sa")


def scaled_dot_attention(q: Tensor, keys: Tensor, values: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax(q K^T / sqrt(d_k)) V.

    q may be a single (d_k,) query or a (n_q, d_k) stack.  Returns
    (attended, weights); weights rows are non-negative and sum to 1.
    """
    single = q.ndim == 1
    if single:
        q = q.unsqueeze(0)
    if keys.shape[1] != q.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != key dim {keys.shape[1]}")
    if keys.shape[0] != values.shape[0]:
        raise ValueError("keys and values disagree on sequence length")
    scores = q @ keys.T / math.sqrt(q.shape[1])        # (n_q, m)
    weights = torch.softmax(scores, dim=1)
    out = weights @ values                              # (n_q, d_v)
    if single:
        return out[0], weights[0]
    return out, weights


def segment_count(m: int, n: int, stride: int) -> int:
    """Number of segments a width-n stride-s window yields on m frames."""
    return (max(m, n) - n) // stride + 1


def segment_conv(
    mapped: Tensor, weight: Tensor, bias: Tensor | None, stride: int
) -> Tensor:
    """ReLU(valid cross-correlation) over time.

    mapped: (m, d_map); weight: (r, d_map, n).  Inputs shorter than the window
    are zero-padded up to it.  Returns (m_n, r).
    """
    n = weight.shape[2]
    x = mapped
    if x.shape[0] < n:
        x = torch.cat([x, x.new_zeros(n - x.shape[0], x.shape[1])], dim=0)
    y = F.conv1d(x.T.unsqueeze(0), weight, bias, stride=stride)  # (1, r, m_n)
    return torch.relu(y[0].T)


class PaaBlock(nn.Module):
    """One-round aggregation of a segment bank under an overview query.

    The core step produces ``o`` (variant-dependent); the shared tail is
    ``o' = LN(o + maxpool(segments))`` followed by ``LN(o' + MLP(o'))``.
    Max-pooling the (m_n, r) bank yields an r-vector, so r must equal d_v.
    """

    def __init__(
        self,
        d_query: int,
        cfg: IntensiveConfig,
        dtype: torch.dtype,
        generator: torch.Generator,
    ):
        super().__init__()
        if cfg.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {cfg.variant!r}")
        if cfg.filters != cfg.d_v:
            raise ValueError(
                f"max-pool residual needs filters == d_v, got {cfg.filters} != {cfg.d_v}"
            )
        self.variant = cfg.variant
        self.d_query = d_query
        r, d_k, d_v = cfg.filters, cfg.d_k, cfg.d_v
        bias = cfg.bias
        self.w1 = make_linear(d_query, d_k, dtype, generator, bias=bias)
        self.w2 = make_linear(r, d_k, dtype, generator, bias=bias)
        self.w3 = make_linear(r, d_v, dtype, generator, bias=bias)
        self.w4 = make_linear(d_v, d_v, dtype, generator, bias=bias)
        self.mlp = MLP(d_v, cfg.ff_dim, d_v, dtype, generator)
        self.ln1 = nn.LayerNorm(d_v, eps=1e-5, dtype=dtype)
        self.ln2 = nn.LayerNorm(d_v, eps=1e-5, dtype=dtype)
        if cfg.variant == "simple":
            self.scorer = make_linear(d_query + r, 1, dtype, generator, bias=bias)
        elif cfg.variant == "concat_sa":
            self.fuse = make_linear(r + d_query, r, dtype, generator, bias=bias)
            self.w_q = make_linear(r, d_k, dtype, generator, bias=bias)
        elif cfg.variant == "sum_sa":
            self.proj_query = make_linear(d_query, r, dtype, generator, bias=bias)
            self.w_q = make_linear(r, d_k, dtype, generator, bias=bias)

    def forward(self, segments: Tensor, query: Tensor) -> tuple[Tensor, Tensor]:
        """segments: (m_n, r); query: (d_query,) -> (out (d_v,), weights)."""
        if segments.ndim != 2 or segments.shape[0] < 1:
            raise ValueError(f"expected (m_n>=1, r) segments, got {tuple(segments.shape)}")
        o, weights = self._aggregate(segments, query)
        enhanced = self.ln1(o + segments.max(dim=0).values)
        return self.ln2(enhanced + self.mlp(enhanced)), weights

    def _aggregate(self, segments: Tensor, query: Tensor) -> tuple[Tensor, Tensor]:
        m_n = segments.shape[0]
        if self.variant == "paa":
            attended, weights = scaled_dot_attention(
                self.w1(query), self.w2(segments), self.w3(segments)
            )
            return self.w4(attended), weights
        if self.variant == "mean":
            weights = segments.new_full((m_n,), 1.0 / m_n)
            return self.w4(self.w3(weights @ segments)), weights
        if self.variant == "simple":
            scored = torch.cat(
                [query.unsqueeze(0).expand(m_n, -1), segments], dim=1
            )
            weights = torch.softmax(self.scorer(scored).squeeze(1), dim=0)
            return self.w4(self.w3(weights @ segments)), weights
        # self-attention variants: fuse the query into every segment row
        if self.variant == "concat_sa":
            fused = self.fuse(
                torch.cat([segments, query.unsqueeze(0).expand(m_n, -1)], dim=1)
            )
        else:  # sum_sa
            fused = segments + self.proj_query(query)
        attended, weights = scaled_dot_attention(
            self.w_q(fused), self.w2(fused), self.w3(fused)
        )
        return self.w4(attended).mean(dim=0), weights


class IntensiveEncoder(nn.Module):
    """Frame map + per-window segment convolutions + per-window attention."""

    def __init__(
        self,
        d_frame: int,
        d_query: int,
        cfg: IntensiveConfig,
        dtype: torch.dtype,
        generator: torch.Generator,
    ):
        super().__init__()
        self.cfg = cfg
        self.windows = tuple(sorted(cfg.windows))
        self.frame_map = make_linear(d_frame, cfg.d_map, dtype, generator)
        self.conv_weights = nn.ParameterList()
        self.conv_biases = nn.ParameterList()
        self.blocks = nn.ModuleList()
        for n in self.windows:
            weight = torch.empty(cfg.filters, cfg.d_map, n, dtype=dtype)
            uniform_fan_in_(weight, cfg.d_map * n, generator)
            self.conv_weights.append(nn.Parameter(weight))
            self.conv_biases.append(nn.Parameter(torch.zeros(cfg.filters, dtype=dtype)))
            self.blocks.append(PaaBlock(d_query, cfg, dtype, generator))

    @property
    def out_dim(self) -> int:
        return len(self.windows) * self.cfg.d_v

    def map_frames(self, frames: Tensor) -> Tensor:
        """Affine map of each frame, order preserved: (m, d_frame) -> (m, d_map)."""
        if frames.shape[1] != self.frame_map.in_features:
            raise ValueError(
                f"frame dim {frames.shape[1]} does not match map input "
                f"{self.frame_map.in_features}"
            )
        return self.frame_map(frames)

    def segment_bank(self, mapped: Tensor) -> dict[int, Tensor]:
        """Per-window segment matrices C^n, each (m_n, r)."""
        return {
            n: segment_conv(mapped, w, b, self.cfg.stride)
            for n, w, b in zip(self.windows, self.conv_weights, self.conv_biases)
        }

    def forward(self, frames: Tensor, query: Tensor) -> tuple[Tensor, dict[int, Tensor]]:
        """Returns (g, attention weights keyed by window size)."""
        bank = self.segment_bank(self.map_frames(frames))
        outs, weights = [], {}
        for n, block in zip(self.windows, self.blocks):
            out, w = block(bank[n], query)
            outs.append(out)
            weights[n] = w
        return torch.cat(outs), weights
