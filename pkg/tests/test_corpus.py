"""Corpus tests: file formats, vocabularies, synthetic data, batching."""

from __future__ import annotations

import numpy as np
import pytest

from skimread.corpus import (
    Caption,
    CorpusError,
    FrameFeatureSequence,
    SPECIAL_TOKEN,
    batch_iter,
    build_concept_vocabulary,
    build_vocabulary,
    concept_targets,
    load_captions,
    load_external_embeddings,
    load_frame_features,
    make_synthetic_corpus,
    topic_agreement,
    write_captions,
    write_frame_features,
)


def cap(sid: str, vid: str, text: str) -> Caption:
    return Caption(sid, vid, text.split())


# ---------------------------------------------------------------------------
# frame-feature files
# ---------------------------------------------------------------------------

class TestFrameFeatureFiles:
    def test_zero_video(self, tmp_path):
        path = str(tmp_path / "f.bin")
        write_frame_features(
            path, [FrameFeatureSequence("v0", np.zeros((4, 3), dtype=np.float32))]
        )
        videos = load_frame_features(path)
        assert len(videos) == 1
        assert videos[0].video_id == "v0"
        assert videos[0].m == 4 and videos[0].d_frame == 3
        assert (videos[0].frames == 0).all()

    def test_declared_counts(self, tmp_path):
        path = str(tmp_path / "f.bin")
        rng = np.random.default_rng(0)
        write_frame_features(
            path,
            [
                FrameFeatureSequence("a", rng.normal(size=(2, 5)).astype(np.float32)),
                FrameFeatureSequence("b", rng.normal(size=(5, 5)).astype(np.float32)),
            ],
        )
        videos = load_frame_features(path)
        assert [v.m for v in videos] == [2, 5]

    def test_round_trip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(42)
        for trial in range(10):
            videos = [
                FrameFeatureSequence(
                    f"vid{k}", rng.normal(size=(int(rng.integers(1, 7)),
                                                int(rng.integers(1, 9)))).astype(np.float32)
                )
                for k in range(int(rng.integers(1, 5)))
            ]
            p1 = str(tmp_path / f"a{trial}.bin")
            p2 = str(tmp_path / f"b{trial}.bin")
            write_frame_features(p1, videos)
            write_frame_features(p2, load_frame_features(p1))
            assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CorpusError, match="magic"):
            load_frame_features(str(path))

    def test_truncated_payload_names_video(self, tmp_path):
        path = str(tmp_path / "f.bin")
        write_frame_features(
            path, [FrameFeatureSequence("culprit", np.ones((3, 3), dtype=np.float32))]
        )
        data = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(data[:-8])
        with pytest.raises(CorpusError, match="culprit"):
            load_frame_features(str(path))

    def test_non_finite_rejected(self, tmp_path):
        path = str(tmp_path / "f.bin")
        frames = np.ones((2, 2), dtype=np.float32)
        good = FrameFeatureSequence("v", frames)
        good.frames = frames.copy()
        good.frames[1, 1] = np.nan          # bypass the constructor check
        write_frame_features(path, [good])
        with pytest.raises(CorpusError, match="v"):
            load_frame_features(str(path))

    def test_external_embeddings_require_single_row(self, tmp_path):
        path = str(tmp_path / "e.bin")
        write_frame_features(
            path, [FrameFeatureSequence("s1", np.ones((1, 4), dtype=np.float32))]
        )
        emb = load_external_embeddings(path)
        assert set(emb) == {"s1"} and emb["s1"].shape == (4,)
        write_frame_features(
            path, [FrameFeatureSequence("s1", np.ones((2, 4), dtype=np.float32))]
        )
        with pytest.raises(CorpusError, match="m=2"):
            load_external_embeddings(path)


class TestCaptionFiles:
    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "c.tsv")
        caps = [cap("s1", "v1", "a red thing"), cap("s2", "v2", "the Blue one")]
        write_captions(path, caps)
        loaded = load_captions(path)
        assert [(c.sentence_id, c.video_id, c.tokens) for c in loaded] == [
            ("s1", "v1", ["a", "red", "thing"]),
            ("s2", "v2", ["the", "blue", "one"]),   # lowercased
        ]

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_text("only two\tfields\n")
        with pytest.raises(CorpusError, match="3 tab-separated"):
            load_captions(str(path))


# ---------------------------------------------------------------------------
# vocabularies
# ---------------------------------------------------------------------------

class TestVocabulary:
    def test_threshold_hand_count(self):
        caps = [cap("s1", "v1", "a a a a a"), cap("s2", "v1", "a b")]
        vocab = build_vocabulary(caps, min_count=5)
        assert set(vocab.word2idx) == {SPECIAL_TOKEN, "a"}
        assert vocab.index("b") == vocab.special_token_index

    def test_min_count_one_keeps_everything(self):
        caps = [cap("s1", "v1", "x y z"), cap("s2", "v1", "x q")]
        vocab = build_vocabulary(caps, min_count=1)
        assert set(vocab.word2idx) == {SPECIAL_TOKEN, "x", "y", "z", "q"}

    def test_deterministic(self):
        caps = [cap("s1", "v1", "m n o p q r"), cap("s2", "v1", "p q r")]
        assert build_vocabulary(caps, 1).word2idx == build_vocabulary(caps, 1).word2idx

    def test_indices_contiguous(self):
        caps = [cap("s1", "v1", "a b c d")]
        vocab = build_vocabulary(caps, 1)
        assert sorted(vocab.word2idx.values()) == list(range(len(vocab)))

    def test_empty_captions_error(self):
        with pytest.raises(CorpusError):
            build_vocabulary([], 1)


class TestConceptVocabulary:
    def test_frequency_ranking(self):
        caps = [
            cap("s1", "v1", " ".join(["cat"] * 5 + ["dog"] * 3 + ["a"] * 9)),
        ]
        cv = build_concept_vocabulary(caps, 2)
        assert set(cv.concept2idx) == {"a", "cat"}

    def test_full_inclusion(self):
        caps = [cap("s1", "v1", "u v w")]
        cv = build_concept_vocabulary(caps, 3)
        assert set(cv.concept2idx) == {"u", "v", "w"}

    def test_lexicographic_tie(self):
        caps = [cap("s1", "v1", "x y x y")]
        cv = build_concept_vocabulary(caps, 1)
        assert set(cv.concept2idx) == {"x"}

    def test_k_too_large(self):
        caps = [cap("s1", "v1", "x y")]
        with pytest.raises(CorpusError, match="exceeds"):
            build_concept_vocabulary(caps, 3)


class TestConceptTargets:
    def test_membership(self):
        cv = build_concept_vocabulary(
            [cap("s", "v", "a a a cat cat dog")], 3
        )  # ranks: a, cat, dog
        t = concept_targets(cap("q", "v", "a cat"), cv)
        expected = np.zeros(3)
        expected[cv.concept2idx["a"]] = 1
        expected[cv.concept2idx["cat"]] = 1
        assert (t == expected).all()

    def test_zero_vector(self):
        cv = build_concept_vocabulary([cap("s", "v", "a b")], 2)
        assert (concept_targets(cap("q", "v", "z z"), cv) == 0).all()

    def test_duplicates_and_order_invariant(self):
        cv = build_concept_vocabulary([cap("s", "v", "a b c")], 3)
        t1 = concept_targets(cap("q", "v", "a b"), cv)
        t2 = concept_targets(cap("q", "v", "b a a b"), cv)
        assert (t1 == t2).all()
        assert set(np.unique(t1)) <= {0.0, 1.0}


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

class TestSyntheticCorpus:
    def test_determinism(self):
        a = make_synthetic_corpus(seed=3, n_videos=12, vocab_size=24)
        b = make_synthetic_corpus(seed=3, n_videos=12, vocab_size=24)
        for sa, sb in zip(a, b):
            assert [v.video_id for v in sa.videos] == [v.video_id for v in sb.videos]
            for va, vb in zip(sa.videos, sb.videos):
                assert va.frames.tobytes() == vb.frames.tobytes()
            assert [(c.sentence_id, c.tokens) for c in sa.captions] == [
                (c.sentence_id, c.tokens) for c in sb.captions
            ]

    def test_counts_and_bijection(self):
        splits = make_synthetic_corpus(
            seed=1, n_videos=32, captions_per_video=1, vocab_size=48
        )
        all_caps = [c for s in splits for c in s.captions]
        all_vids = [v for s in splits for v in s.videos]
        assert len(all_caps) == 32 and len(all_vids) == 32
        assert {c.video_id for c in all_caps} == {v.video_id for v in all_vids}

    def test_splits_disjoint(self):
        train, val, test = make_synthetic_corpus(seed=2, n_videos=20, vocab_size=32)
        ids = [{v.video_id for v in s.videos} for s in (train, val, test)]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])

    def test_topic_correlation_over_seeds(self):
        # shared topics so within-topic video pairs exist inside one split
        for seed in range(10):
            train, _, _ = make_synthetic_corpus(
                seed=seed, n_videos=24, vocab_size=40, n_topics=6
            )
            within, cross = topic_agreement(train)
            assert within > cross, f"seed {seed}: {within} <= {cross}"

    def test_caption_contains_topic_word(self):
        train, val, test = make_synthetic_corpus(seed=5, n_videos=12, vocab_size=24)
        for split in (train, val, test):
            for v in split.videos:
                caps = split.captions_of(v.video_id)
                shared = set.intersection(*(set(c.tokens) for c in caps))
                assert any(t.startswith("thing") for t in shared)

    def test_bad_sizes(self):
        with pytest.raises(CorpusError):
            make_synthetic_corpus(seed=0, n_videos=2)
        with pytest.raises(CorpusError):
            make_synthetic_corpus(seed=0, n_videos=12, vocab_size=12)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class TestBatchIter:
    @pytest.fixture()
    def split(self):
        train, _, _ = make_synthetic_corpus(seed=9, n_videos=14, vocab_size=28)
        return train

    def test_sizes(self, split):
        # train split has 10 captions under the default split fractions
        assert split.n_captions == 10
        sizes = [b.size for b in batch_iter(split, 4, seed=0)]
        assert sizes == [4, 4, 2]

    def test_seeded_order(self, split):
        ids1 = [c.sentence_id for b in batch_iter(split, 4, seed=3) for _, c in b.pairs]
        ids2 = [c.sentence_id for b in batch_iter(split, 4, seed=3) for _, c in b.pairs]
        ids3 = [c.sentence_id for b in batch_iter(split, 4, seed=4) for _, c in b.pairs]
        assert ids1 == ids2
        assert ids1 != ids3

    def test_epoch_covers_each_caption_once(self, split):
        seen = sorted(
            c.sentence_id for b in batch_iter(split, 3, seed=1) for _, c in b.pairs
        )
        assert seen == sorted(c.sentence_id for c in split.captions)

    def test_batch_size_below_two(self, split):
        with pytest.raises(CorpusError):
            list(batch_iter(split, 1, seed=0))

    def test_negative_mask(self):
        v1 = FrameFeatureSequence("v1", np.ones((2, 3), dtype=np.float32))
        v2 = FrameFeatureSequence("v2", np.ones((2, 3), dtype=np.float32))
        from skimread.corpus import Batch

        batch = Batch([(v1, cap("s1", "v1", "x")), (v2, cap("s2", "v2", "y")),
                       (v1, cap("s3", "v1", "z"))])
        mask = batch.negative_mask()
        # caption s3 describes video v1, so it is not a negative for row 0
        assert not mask[0, 2] and not mask[2, 0]
        assert mask[0, 1] and mask[1, 0]
