"""Hybrid-space tests: similarities, triplet/BCE losses, space composition."""

from __future__ import annotations

import logging
import math

import numpy as np
import pytest
import torch

from oracles import enumerate_triplet_loss
from skimread.config import HybridConfig, LossConfig
from skimread.hybrid import (
    HybridSpace,
    bce_loss,
    cosine_sim,
    cosine_sim_matrix,
    jaccard_sim,
    jaccard_sim_matrix,
    triplet_loss,
)


class TestCosine:
    def test_self_similarity(self):
        assert cosine_sim([1.0, 2.0, -3.0], [1.0, 2.0, -3.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim([1.0, 0.0], [0.0, 2.0]) == pytest.approx(0.0)

    def test_hand_value(self):
        # dot = 4, norms sqrt(5) each -> 4/5
        assert cosine_sim([1.0, 2.0], [2.0, 1.0]) == pytest.approx(0.8, abs=1e-12)

    def test_degenerate_returns_zero_and_logs_once(self, caplog):
        import skimread.hybrid as hybrid_mod

        hybrid_mod._warned_degenerate = False
        with caplog.at_level(logging.WARNING, logger="skimread.hybrid"):
            assert cosine_sim([0.0, 0.0], [1.0, 1.0]) == 0.0
            assert cosine_sim([1e-13, 0.0], [1.0, 1.0]) == 0.0
        assert sum("zero vector" in r.message for r in caplog.records) == 1

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a, b = rng.normal(size=6), rng.normal(size=6)
            c = float(rng.uniform(0.1, 100.0))
            assert abs(cosine_sim(c * a, b) - cosine_sim(a, b)) < 1e-9

    def test_matrix_matches_pointwise(self):
        rng = np.random.default_rng(4)
        a = torch.tensor(rng.normal(size=(3, 5)))
        b = torch.tensor(rng.normal(size=(4, 5)))
        m = cosine_sim_matrix(a, b)
        for i in range(3):
            for j in range(4):
                assert float(m[i, j]) == pytest.approx(cosine_sim(a[i], b[j]), abs=1e-12)


class TestJaccard:
    def test_self_similarity(self):
        assert jaccard_sim([0.3, 0.0, 0.7], [0.3, 0.0, 0.7]) == pytest.approx(1.0)

    def test_disjoint_support(self):
        assert jaccard_sim([1.0, 0.0], [0.0, 2.0]) == 0.0

    def test_hand_value(self):
        # min sum 0.4, max sum 1.6
        assert jaccard_sim([0.2, 0.8], [0.8, 0.2]) == pytest.approx(0.25, abs=1e-12)

    def test_both_zero(self):
        assert jaccard_sim([0.0, 0.0], [0.0, 0.0]) == 0.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            jaccard_sim([-0.1, 0.2], [0.1, 0.2])

    def test_range_and_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            a = rng.uniform(0, 1, size=8)
            b = rng.uniform(0, 1, size=8)
            s = jaccard_sim(a, b)
            assert 0.0 <= s <= 1.0
            assert s == pytest.approx(jaccard_sim(b, a), abs=1e-15)

    def test_monotone_in_overlap(self):
        # raising a component toward the other vector's value adds min-mass
        # without touching max-mass, so the similarity cannot drop
        rng = np.random.default_rng(6)
        for _ in range(100):
            a = rng.uniform(0, 1, size=6)
            b = rng.uniform(0, 1, size=6)
            low = np.where(a < b)[0]
            if low.size == 0:
                continue
            i = int(rng.choice(low))
            bumped = a.copy()
            bumped[i] = a[i] + float(rng.uniform(0, b[i] - a[i]))
            assert jaccard_sim(bumped, b) >= jaccard_sim(a, b) - 1e-12

    def test_matrix_matches_pointwise(self):
        rng = np.random.default_rng(7)
        a = torch.tensor(rng.uniform(0, 1, size=(3, 5)))
        b = torch.tensor(rng.uniform(0, 1, size=(4, 5)))
        m = jaccard_sim_matrix(a, b)
        for i in range(3):
            for j in range(4):
                assert float(m[i, j]) == pytest.approx(jaccard_sim(a[i], b[j]), abs=1e-12)


class TestTripletLoss:
    def test_satisfied_margins(self):
        sims = torch.full((3, 3), -1.0, dtype=torch.float64)
        sims.fill_diagonal_(1.0)
        assert float(triplet_loss(sims, margin=0.2)) == 0.0

    def test_all_equal_matrix(self):
        sims = torch.full((4, 4), 0.3, dtype=torch.float64)
        # both hinges sit exactly at the margin for every pair
        assert float(triplet_loss(sims, margin=0.2)) == pytest.approx(0.4, abs=1e-12)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(50):
            b = int(rng.integers(2, 9))
            sims = rng.normal(size=(b, b))
            ours = float(triplet_loss(torch.tensor(sims), margin=0.2))
            assert abs(ours - enumerate_triplet_loss(sims, 0.2)) < 1e-8

    def test_mask_respected_against_oracle(self):
        rng = np.random.default_rng(9)
        for trial in range(20):
            b = int(rng.integers(3, 7))
            sims = rng.normal(size=(b, b))
            mask = rng.uniform(size=(b, b)) > 0.3
            np.fill_diagonal(mask, False)
            ours = float(
                triplet_loss(torch.tensor(sims), 0.2, torch.tensor(mask))
            )
            assert abs(ours - enumerate_triplet_loss(sims, 0.2, mask)) < 1e-8

    def test_small_batch_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            triplet_loss(torch.ones(1, 1), 0.2)


class TestBceLoss:
    def test_perfect_prediction(self):
        t = torch.tensor([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
        assert float(bce_loss(t.clone(), t)) <= 1e-6

    def test_coin_flip(self):
        p = torch.full((10,), 0.5, dtype=torch.float64)
        t = torch.tensor(np.random.default_rng(1).integers(0, 2, 10), dtype=torch.float64)
        assert float(bce_loss(p, t)) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_flip_symmetry(self):
        rng = np.random.default_rng(2)
        p = torch.tensor(rng.uniform(0.01, 0.99, size=12))
        t = torch.tensor(rng.integers(0, 2, 12).astype(float))
        assert float(bce_loss(p, t)) == pytest.approx(
            float(bce_loss(1.0 - p, 1.0 - t)), abs=1e-12
        )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            bce_loss(torch.ones(3), torch.ones(4))


def make_space(video_dim=6, text_dim=6, seed=0, **cfg_kwargs) -> HybridSpace:
    cfg = HybridConfig(**{"alpha": 0.6, "d_lat": 5, "k_concepts": 4, **cfg_kwargs})
    gen = torch.Generator().manual_seed(seed)
    return HybridSpace(video_dim, text_dim, cfg, torch.float64, gen)


class TestHybridSpace:
    def test_alpha_one_is_latent_cosine(self):
        space = make_space(alpha=1.0, seed=1)
        v = torch.tensor(np.random.default_rng(1).normal(size=6))
        s = torch.tensor(np.random.default_rng(2).normal(size=6))
        lat_v, _ = space.project_video(v)
        lat_s, _ = space.project_text(s)
        assert space.sim(v, s) == pytest.approx(cosine_sim(lat_v, lat_s), abs=1e-12)

    def test_alpha_zero_is_concept_jaccard(self):
        space = make_space(alpha=0.0, seed=2)
        v = torch.tensor(np.random.default_rng(3).normal(size=6))
        s = torch.tensor(np.random.default_rng(4).normal(size=6))
        _, con_v = space.project_video(v)
        _, con_s = space.project_text(s)
        assert space.sim(v, s) == pytest.approx(jaccard_sim(con_v, con_s), abs=1e-12)

    def test_perfect_agreement_blends_to_one(self):
        # same feature through identical projections: both sub-similarities
        # are 1, so any alpha blend is 1
        space = make_space(seed=3)
        space.text_latent.load_state_dict(space.video_latent.state_dict())
        space.text_concept.load_state_dict(space.video_concept.state_dict())
        x = torch.tensor(np.random.default_rng(5).normal(size=6))
        assert space.sim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_sim_matrix_matches_pointwise(self):
        space = make_space(seed=4)
        rng = np.random.default_rng(6)
        videos = torch.tensor(rng.normal(size=(3, 6)))
        texts = torch.tensor(rng.normal(size=(4, 6)))
        m = space.sim_matrix(videos, texts).detach()
        for i in range(3):
            for j in range(4):
                assert float(m[i, j]) == pytest.approx(
                    space.sim(videos[i], texts[j]), abs=1e-12
                )


class TestSpaceLoss:
    def loss_cfg(self, **kw) -> LossConfig:
        return LossConfig(**kw)

    def test_identical_pairs_and_perfect_concepts(self):
        # identical pairs make every similarity matrix constant: each triplet
        # term sits exactly at its margin and contributes 2*margin; the BCE
        # term cannot reach 0 because sigmoid outputs are strictly inside
        # (0, 1), so the total is 2 * (2*margin) + a small positive BCE
        space = make_space(seed=5)
        x = torch.tensor(np.random.default_rng(7).normal(size=6))
        videos = x.repeat(4, 1)
        texts = x.repeat(4, 1)
        _, con = space.project_text(x)
        targets = (con > 0.5).to(torch.float64).repeat(4, 1)
        out = space.space_loss(videos, texts, targets, self.loss_cfg(margin=0.2))
        assert out.triplet_lat == pytest.approx(0.4, abs=1e-9)
        assert out.triplet_con == pytest.approx(0.4, abs=1e-9)
        assert out.bce_con > 0.0
        assert out.value == pytest.approx(0.8 + out.bce_con, abs=1e-9)

    def test_concept_terms_disabled(self):
        space = make_space(seed=6)
        rng = np.random.default_rng(8)
        videos = torch.tensor(rng.normal(size=(3, 6)))
        texts = torch.tensor(rng.normal(size=(3, 6)))
        targets = torch.tensor(rng.integers(0, 2, size=(3, 4)).astype(float))
        full = space.space_loss(videos, texts, targets, self.loss_cfg())
        lat_only = space.space_loss(
            videos, texts, targets, self.loss_cfg(concept_terms=False)
        )
        assert lat_only.triplet_con == 0.0 and lat_only.bce_con == 0.0
        assert lat_only.value == pytest.approx(full.triplet_lat, abs=1e-12)

    def test_finite_for_random_inputs(self):
        space = make_space(seed=7)
        rng = np.random.default_rng(9)
        videos = torch.tensor(rng.normal(size=(5, 6)) * 10)
        texts = torch.tensor(rng.normal(size=(5, 6)) * 10)
        targets = torch.tensor(rng.integers(0, 2, size=(5, 4)).astype(float))
        out = space.space_loss(videos, texts, targets, self.loss_cfg())
        assert math.isfinite(out.value)

    def test_total_is_sum_of_parts(self):
        space = make_space(seed=8)
        rng = np.random.default_rng(10)
        videos = torch.tensor(rng.normal(size=(4, 6)))
        texts = torch.tensor(rng.normal(size=(4, 6)))
        targets = torch.tensor(rng.integers(0, 2, size=(4, 4)).astype(float))
        out = space.space_loss(videos, texts, targets, self.loss_cfg())
        assert out.value == pytest.approx(
            out.triplet_lat + out.triplet_con + out.bce_con, abs=1e-12
        )

    def test_weights_scale_terms(self):
        space = make_space(seed=9)
        rng = np.random.default_rng(11)
        videos = torch.tensor(rng.normal(size=(4, 6)))
        texts = torch.tensor(rng.normal(size=(4, 6)))
        targets = torch.tensor(rng.integers(0, 2, size=(4, 4)).astype(float))
        base = space.space_loss(videos, texts, targets, self.loss_cfg())
        scaled = space.space_loss(
            videos, texts, targets, self.loss_cfg(w_lat=2.0, w_bce=0.5)
        )
        assert scaled.triplet_lat == pytest.approx(2 * base.triplet_lat, abs=1e-12)
        assert scaled.bce_con == pytest.approx(0.5 * base.bce_con, abs=1e-12)
