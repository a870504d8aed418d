"""Greedy topic segmentation and the TextTiling baseline."""

import random

import numpy as np
import pytest

from tseg.corpus import TopicSegmentation
from tseg.encoders import EmbeddingEncoder, EmbeddingTable, TfEncoder
from tseg.segmenter import (SegmenterConfig, SegmenterError, TextTilingConfig,
                            candidate_cost, segment_dialogue, texttiling)
from util import make_dialogue, synthetic_recovery_corpus

TF = TfEncoder()

TWO_TOPIC = make_dialogue([
    "red apple pie", "red apple tart", "apple pie crumble", "red pie tart",
    "blue ocean wave", "blue ocean tide", "ocean wave surf", "blue tide surf",
], "two-topic")


class TestConfig:
    def test_defaults(self):
        cfg = SegmenterConfig()
        assert (cfg.max_range, cfg.jump, cfg.context_window, cfg.cost_threshold) == (8, 2, 2, 0.6)

    def test_jump_must_be_positive(self):
        with pytest.raises(SegmenterError):
            SegmenterConfig(jump=0)

    def test_jump_bounded_by_range(self):
        with pytest.raises(SegmenterError):
            SegmenterConfig(max_range=2, jump=3)


class TestCandidateCost:
    def test_both_sides_absent(self):
        cost, degenerate = candidate_cost(TF, [["a"]], None, None)
        assert cost == float("-inf") and not degenerate

    def test_max_of_sides(self):
        # unit vectors with cosines exactly 0.2 (left) and 0.7 (right)
        table = EmbeddingTable(dim=2, vectors={
            "q": np.array([1.0, 0.0], dtype=np.float32),
            "l": np.array([0.2, (1 - 0.04) ** 0.5], dtype=np.float32),
            "r": np.array([0.7, (1 - 0.49) ** 0.5], dtype=np.float32),
        })
        enc = EmbeddingEncoder(table)
        cost, _ = candidate_cost(enc, [["q"]], [["l"]], [["r"]])
        assert cost == pytest.approx(0.7, abs=1e-6)

    def test_identical_left_no_right(self):
        cost, degenerate = candidate_cost(TF, [["a", "b"]], [["a", "b"]], None)
        assert cost == 1.0 and not degenerate

    def test_degenerate_flag(self):
        cost, degenerate = candidate_cost(TF, [["a"]], [[]], None)
        assert cost == 0.0 and degenerate


class TestSegmentDialogue:
    def test_single_utterance(self):
        out = segment_dialogue(make_dialogue(["solo"]), TF)
        assert out.boundaries == ()

    def test_two_disjoint_topics(self):
        """4+4 disjoint vocabularies cut exactly at the junction.

        Candidate enumeration at the start (jump grid 2, 4, 6, 8): the
        4-utterance candidate faces the other topic on its right, so its
        cost is exactly 0; shorter/longer candidates share vocabulary with
        a context side and cost more; the 8-utterance candidate has no
        context at all and cannot outbid them.
        """
        tokens = [list(u.tokens) for u in TWO_TOPIC.utterances]
        cost4, _ = candidate_cost(TF, tokens[0:4], None, tokens[4:6])
        cost2, _ = candidate_cost(TF, tokens[0:2], None, tokens[2:4])
        cost6, _ = candidate_cost(TF, tokens[0:6], None, tokens[6:8])
        cost8, _ = candidate_cost(TF, tokens[0:8], None, None)
        assert cost4 == 0.0
        assert cost2 > 0.0 and cost6 > 0.0
        assert cost8 == float("-inf")
        out = segment_dialogue(TWO_TOPIC, TF)
        assert out.boundaries == (4,)

    def test_all_identical_never_cuts(self):
        dlg = make_dialogue(["same words here"] * 10)
        out = segment_dialogue(dlg, TF)
        assert out.boundaries == ()

    def test_forced_cut_suppressed_at_end(self):
        # whole dialogue fits one candidate with no context: single segment
        dlg = make_dialogue(["aa bb", "aa cc"])
        out = segment_dialogue(dlg, TF)
        assert out.boundaries == ()

    def test_degenerate_everywhere_falls_back_to_range_cuts(self):
        dlg = make_dialogue(["...", "?!", "--", "..", "!!", "??", ".", "!", "?", ","] * 2)
        out = segment_dialogue(dlg, TF, SegmenterConfig(max_range=4, jump=2))
        assert out.boundaries == (4, 8, 12, 16)

    def test_threshold_one_cuts_every_minimum(self):
        dlg = make_dialogue(["same words here"] * 10)
        out = segment_dialogue(dlg, TF, SegmenterConfig(cost_threshold=1.0))
        assert len(out.boundaries) > 0

    def test_fuzz_output_validity_and_determinism(self):
        rng = random.Random(17)
        vocab = [f"v{i}" for i in range(12)]
        for trial in range(120):
            n = rng.randint(1, 25)
            texts = [" ".join(rng.choices(vocab, k=rng.randint(0, 6))) for _ in range(n)]
            dlg = make_dialogue(texts, f"fz{trial}")
            jump = rng.randint(1, 4)
            cfg = SegmenterConfig(max_range=rng.randint(jump, 10), jump=jump,
                                  context_window=rng.randint(1, 3),
                                  cost_threshold=rng.uniform(-1, 1))
            out = segment_dialogue(dlg, TF, cfg)
            assert out == segment_dialogue(dlg, TF, cfg)
            prev = 0
            for b in out.boundaries:
                assert prev < b <= n - 1
                prev = b
            # boundaries partition the utterances: segments concatenate back
            cuts = [0, *out.boundaries, n]
            pieces = [dlg.utterances[lo:hi] for lo, hi in zip(cuts, cuts[1:])]
            assert all(pieces)
            assert tuple(u for piece in pieces for u in piece) == dlg.utterances

    def test_threshold_sweep_monotone(self):
        """Raising the cut threshold only admits more cuts, never fewer."""
        corpus = synthetic_recovery_corpus(count=40, seed=13)
        previous = -1
        for theta in (-1.0, 0.0, 0.3, 0.6, 0.9, 1.0):
            cfg = SegmenterConfig(cost_threshold=theta)
            total = sum(len(segment_dialogue(d, TF, cfg).boundaries) for d in corpus)
            assert total >= previous
            previous = total


class TestTextTiling:
    def test_uniform_text_no_boundaries(self):
        dlg = make_dialogue(["aa " * 12] * 12)
        assert texttiling(dlg).boundaries == ()

    def test_disjoint_halves_single_junction(self):
        cfg = TextTilingConfig()
        need = cfg.block_size * cfg.pseudo_sentence_len
        dlg = make_dialogue(["alpha " * (need + 6), "bravo " * (need + 6)])
        assert texttiling(dlg, cfg).boundaries == (1,)

    def test_embedding_variant_matches_on_disjoint_halves(self):
        cfg = TextTilingConfig()
        need = cfg.block_size * cfg.pseudo_sentence_len
        dlg = make_dialogue(["alpha " * (need + 6), "bravo " * (need + 6)])
        table = EmbeddingTable(dim=2, vectors={
            "alpha": np.array([1.0, 0.0], dtype=np.float32),
            "bravo": np.array([0.0, 1.0], dtype=np.float32),
        })
        assert texttiling(dlg, cfg, embedding_table=table).boundaries == (1,)

    def test_single_utterance(self):
        assert texttiling(make_dialogue(["alpha " * 100])).boundaries == ()

    def test_too_short_for_pseudo_sentences(self):
        assert texttiling(make_dialogue(["one two", "three"])).boundaries == ()

    def test_fuzz_validity(self):
        rng = random.Random(23)
        vocab = [f"v{i}" for i in range(9)]
        for trial in range(60):
            n = rng.randint(1, 15)
            texts = [" ".join(rng.choices(vocab, k=rng.randint(0, 20))) for _ in range(n)]
            dlg = make_dialogue(texts, f"tt{trial}")
            out = texttiling(dlg, TextTilingConfig(pseudo_sentence_len=rng.randint(3, 12),
                                                   window_size=rng.randint(1, 6),
                                                   block_size=rng.randint(1, 6)))
            assert isinstance(out, TopicSegmentation)
            prev = 0
            for b in out.boundaries:
                assert prev < b <= n - 1
                prev = b
