"""Shared fixtures: a tiny fast configuration and its corpus/model."""

from __future__ import annotations

import pytest
import torch

from skimread.config import (
    Config,
    DataConfig,
    HybridConfig,
    IntensiveConfig,
    PreviewConfig,
    TextConfig,
    TrainSettings,
)
from skimread.pipeline import build_model, load_corpus

torch.set_num_threads(1)


def tiny_config(seed: int = 0, **overrides) -> Config:
    """Much smaller than the desk profile; float64 for exact checks."""
    cfg = Config()
    cfg.text = TextConfig(d_word=8, h_text=8, r_text=8)
    cfg.preview = PreviewConfig(kind="bigru", hidden=4)
    cfg.intensive = IntensiveConfig(
        d_map=8, windows=(1, 3), filters=8, stride=2, d_k=4, d_v=8
    )
    cfg.hybrid = HybridConfig(alpha=0.6, d_lat=8, k_concepts=6)
    cfg.train = TrainSettings(
        batch_size=4, lr=1e-3, seed=seed, dtype="float64", vocab_min_count=1
    )
    cfg.data = DataConfig(
        seed=seed + 5, n_videos=12, captions_per_video=1,
        m_min=3, m_max=5, d_frame=6, vocab_size=24,
    )
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def tiny_cfg() -> Config:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_corpus(tiny_cfg):
    return load_corpus(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg, tiny_corpus):
    train_split, _, _ = tiny_corpus
    model, eff_cfg = build_model(tiny_cfg, train_split)
    return model, eff_cfg
