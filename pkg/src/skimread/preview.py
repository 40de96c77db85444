"""Previewing branch: a lightweight overview encoder for a frame sequence.

The default encoder runs a biGRU over the frames and mean-pools the hidden
states into a single overview vector.  A cheaper per-frame affine variant
("fc") exists for ablations; it is order-free by construction.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .config import PreviewConfig
from .layers import BiGRU, make_linear


class PreviewEncoder(nn.Module):
    """Maps a (m, d_frame) sequence to the overview vector of dim 2*hidden."""

    def __init__(
        self,
        d_frame: int,
        cfg: PreviewConfig,
        dtype: torch.dtype,
        generator: torch.Generator,
    ):
        super().__init__()
        self.kind = cfg.kind
        self.d_frame = d_frame
        self.out_dim = cfg.out_dim
        if cfg.kind == "bigru":
            self.bigru = BiGRU(d_frame, cfg.hidden, dtype, generator)
        elif cfg.kind == "fc":
            self.fc = make_linear(d_frame, cfg.out_dim, dtype, generator)
        else:
            raise ValueError(f"unknown preview kind {cfg.kind!r}")

    def hidden_states(self, frames: Tensor) -> Tensor:
        """biGRU state sequence H, (m, 2*hidden); bigru kind only."""
        if self.kind != "bigru":
            raise ValueError("hidden states exist only for the bigru kind")
        self._check(frames)
        return self.bigru(frames)

    def forward(self, frames: Tensor) -> Tensor:
        """Overview vector p: temporal mean of per-frame encodings."""
        self._check(frames)
        if self.kind == "bigru":
            return self.bigru(frames).mean(dim=0)
        return self.fc(frames).mean(dim=0)

    def _check(self, frames: Tensor) -> None:
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"expected (m>=1, d) frames, got {tuple(frames.shape)}")
        if frames.shape[1] != self.d_frame:
            raise ValueError(
                f"frame dim {frames.shape[1]} does not match encoder dim {self.d_frame}"
            )
