"""Multi-level text encoding.

A sentence becomes the concatenation of three views, in this fixed order:
bag-of-words counts over the vocabulary, the temporal mean of biGRU hidden
states over word embeddings, and max-pooled 1-D convolutions of several
window sizes over the biGRU state sequence.  An optional precomputed external
sentence embedding may be appended; it is a frozen input and never trained.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import TextConfig
from .corpus import Caption, Vocabulary
from .layers import BiGRU, uniform_fan_in_


def encode_bow(
    caption: Caption, vocab: Vocabulary, binary: bool = False
) -> np.ndarray:
    """Count vector over the vocabulary; unknown words count at the special index."""
    out = np.zeros(vocab.size, dtype=np.float64)
    for token in caption.tokens:
        out[vocab.index(token)] += 1.0
    if binary:
        out = (out > 0).astype(np.float64)
    return out


class TextEncoder(nn.Module):
    """BoW + biGRU + biGRU-CNN sentence encoder over a fixed vocabulary."""

    def __init__(
        self,
        vocab: Vocabulary,
        cfg: TextConfig,
        dtype: torch.dtype,
        generator: torch.Generator,
    ):
        super().__init__()
        self.vocab = vocab
        self.cfg = cfg
        self.embedding = nn.Parameter(
            torch.empty(vocab.size, cfg.d_word, dtype=dtype)
        )
        uniform_fan_in_(self.embedding, cfg.d_word, generator)
        self.bigru = BiGRU(cfg.d_word, cfg.h_text, dtype, generator)
        self.conv_weights = nn.ParameterList()
        self.conv_biases = nn.ParameterList()
        for w in cfg.windows:
            weight = torch.empty(cfg.r_text, 2 * cfg.h_text, w, dtype=dtype)
            uniform_fan_in_(weight, 2 * cfg.h_text * w, generator)
            self.conv_weights.append(nn.Parameter(weight))
            self.conv_biases.append(nn.Parameter(torch.zeros(cfg.r_text, dtype=dtype)))
        self._dtype = dtype

    @property
    def out_dim(self) -> int:
        d = self.vocab.size + 2 * self.cfg.h_text + len(self.cfg.windows) * self.cfg.r_text
        if self.cfg.external_enabled:
            d += self.cfg.external_dim
        return d

    # -- sub-encoders --------------------------------------------------------

    def embed(self, caption: Caption) -> Tensor:
        idx = torch.tensor(self.vocab.indices(caption.tokens), dtype=torch.long)
        return self.embedding[idx]                      # (L, d_word)

    def bigru_states(self, caption: Caption) -> Tensor:
        """biGRU hidden-state sequence, (L, 2*h_text)."""
        if not caption.tokens:
            raise ValueError(f"caption {caption.sentence_id!r} has no tokens")
        return self.bigru(self.embed(caption))

    def encode_bigru(self, caption: Caption) -> Tensor:
        """Temporal mean of the biGRU states, (2*h_text,)."""
        return self.bigru_states(caption).mean(dim=0)

    def conv_pool(self, states: Tensor) -> Tensor:
        """Per-window conv + ReLU + max-over-time on a (L, 2*h_text) sequence."""
        outs = []
        for w, weight, bias in zip(self.cfg.windows, self.conv_weights, self.conv_biases):
            x = states
            if x.shape[0] < w:                          # zero-pad up to the window
                pad = x.new_zeros(w - x.shape[0], x.shape[1])
                x = torch.cat([x, pad], dim=0)
            y = F.conv1d(x.T.unsqueeze(0), weight, bias)    # (1, r_text, L-w+1)
            outs.append(torch.relu(y[0]).max(dim=1).values)
        return torch.cat(outs)

    def encode_bigru_cnn(self, caption: Caption) -> Tensor:
        """Max-pooled convolutions over the biGRU states, (len(windows)*r_text,)."""
        return self.conv_pool(self.bigru_states(caption))

    # -- full encoding ---------------------------------------------------------

    def forward(self, caption: Caption, external: np.ndarray | None = None) -> Tensor:
        """Concatenate [BoW || biGRU || biGRU-CNN || external?]."""
        bow = torch.as_tensor(
            encode_bow(caption, self.vocab, binary=self.cfg.bow_binary),
            dtype=self._dtype,
        )
        states = self.bigru_states(caption)
        parts = [bow, states.mean(dim=0), self.conv_pool(states)]
        if self.cfg.external_enabled:
            if external is None:
                external = caption.external_embedding
            if external is None:
                raise ValueError(
                    f"external embeddings enabled but none given for "
                    f"{caption.sentence_id!r}"
                )
            ext = torch.as_tensor(np.asarray(external), dtype=self._dtype)
            if ext.numel() != self.cfg.external_dim:
                raise ValueError(
                    f"external embedding for {caption.sentence_id!r} has "
                    f"{ext.numel()} dims, configured {self.cfg.external_dim}"
                )
            parts.append(ext.detach())
        return torch.cat(parts)
