"""CLI wiring: subcommands, manifests, usage errors, reproducibility basics."""

import json

import pytest

from tseg.cli import main
from tseg.corpus import load_dialogues, read_segmentations, write_dialogues, write_segmentations
from util import make_dialogue, write_overfit_tsv


def run(*argv):
    return main([str(a) for a in argv])


class TestSynth:
    def test_deterministic(self, tmp_path):
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        for out in (a, b):
            assert run("synth", "--output", out, "--count", 6, "--topics", "2-3",
                       "--utterances", "4-6", "--seed", 7) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_empty_source_fails(self, tmp_path):
        src = tmp_path / "empty.jsonl"
        src.write_text("")
        out = tmp_path / "out.jsonl"
        assert run("synth", "--input", src, "--output", out) == 1

    def test_manifest_written(self, tmp_path):
        out = tmp_path / "c.jsonl"
        assert run("synth", "--output", out, "--count", 3, "--seed", 5) == 0
        manifest = json.loads((tmp_path / "c.jsonl.manifest.json").read_text())
        assert manifest["subcommand"] == "synth"
        assert manifest["seed"] == 5
        assert "wall_clock_seconds" in manifest

    def test_cross_topic_vocabulary_disjoint(self, tmp_path):
        out = tmp_path / "d.jsonl"
        assert run("synth", "--output", out, "--count", 4, "--seed", 11) == 0
        for dlg in load_dialogues(out):
            cuts = [0, *dlg.gold_boundaries, len(dlg.utterances)]
            topic_vocabs = []
            for lo, hi in zip(cuts, cuts[1:]):
                topic_vocabs.append({t for u in dlg.utterances[lo:hi] for t in u.tokens})
            for i in range(len(topic_vocabs)):
                for j in range(i + 1, len(topic_vocabs)):
                    assert not (topic_vocabs[i] & topic_vocabs[j])


class TestSegmentAndEval:
    def corpus(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        assert run("synth", "--output", path, "--count", 8, "--topics", "2-3",
                   "--utterances", "4-6", "--seed", 13) == 0
        return path

    def test_segment_writes_valid_file(self, tmp_path):
        corpus = self.corpus(tmp_path)
        segs = tmp_path / "segs.jsonl"
        assert run("segment", "--input", corpus, "--output", segs, "--encoder", "tf",
                   "--range", 8, "--jump", 2, "--window", 2, "--threshold", 0.6) == 0
        dialogues = {d.id: d for d in load_dialogues(corpus)}
        for seg in read_segmentations(segs):
            n = len(dialogues[seg.dialogue_id].utterances)
            assert all(1 <= b <= n - 1 for b in seg.boundaries)

    def test_jump_zero_is_usage_error(self, tmp_path, capsys):
        corpus = self.corpus(tmp_path)
        with pytest.raises(SystemExit) as exc:
            run("segment", "--input", corpus, "--output", tmp_path / "s.jsonl",
                "--jump", 0)
        assert exc.value.code != 0

    def test_unknown_encoder_lists_choices(self, tmp_path, capsys):
        corpus = self.corpus(tmp_path)
        with pytest.raises(SystemExit):
            run("segment", "--input", corpus, "--output", tmp_path / "s.jsonl",
                "--encoder", "nope")
        err = capsys.readouterr().err
        assert "tf" in err and "glove" in err and "precomputed" in err

    def test_perfect_predictions_score_perfectly(self, tmp_path, capsys):
        corpus = self.corpus(tmp_path)
        dialogues = load_dialogues(corpus)
        segs = tmp_path / "gold_as_pred.jsonl"
        from tseg.corpus import TopicSegmentation
        write_segmentations(segs, [TopicSegmentation(d.id, d.gold_boundaries or ())
                                   for d in dialogues])
        report_path = tmp_path / "report.json"
        assert run("eval-seg", "--input", segs, "--gold", corpus,
                   "--output", report_path, "--wd-window", 4) == 0
        report = json.loads(report_path.read_text())
        assert report["mae"] == 0.0
        assert report["window_diff"] == 0.0
        assert report["f1"] == 1.0
        assert (tmp_path / "report.json.png").exists()
        out = capsys.readouterr().out
        assert "WindowDiff" in out

    def test_empty_prediction_file_fails(self, tmp_path):
        corpus = self.corpus(tmp_path)
        segs = tmp_path / "empty.jsonl"
        segs.write_text("")
        assert run("eval-seg", "--input", segs, "--gold", corpus,
                   "--output", tmp_path / "r.json") == 1

    def test_glove_encoder_path(self, tmp_path):
        corpus = self.corpus(tmp_path)
        glove = tmp_path / "glove.txt"
        vocab = sorted({t for d in load_dialogues(corpus)
                        for u in d.utterances for t in u.tokens})
        import numpy as np
        rng = np.random.default_rng(0)
        with open(glove, "w") as fh:
            for tok in vocab:
                vals = " ".join(f"{v:.5f}" for v in rng.normal(size=8))
                fh.write(f"{tok} {vals}\n")
        segs = tmp_path / "segs_glove.jsonl"
        assert run("segment", "--input", corpus, "--output", segs,
                   "--encoder", "glove", "--glove-path", glove) == 0


class TestMatcherPipeline:
    def test_train_score_eval_loop(self, tmp_path, capsys):
        tsv = tmp_path / "train.tsv"
        write_overfit_tsv(tsv)
        ckpt = tmp_path / "model.ckpt"
        shape = ["--model-dim", 8, "--max-seg-len", 12, "--max-segments", 4]
        assert run("train", "--input", tsv, "--output", ckpt, "--lr", 0.01,
                   "--batch", 20, "--steps", 40, "--seed", 13, *shape) == 0
        assert ckpt.exists()
        assert (tmp_path / "model.ckpt.loss.tsv").exists()
        assert (tmp_path / "model.ckpt.loss.png").exists()
        assert (tmp_path / "model.ckpt.vocab.json").exists()

        scores = tmp_path / "scores.tsv"
        assert run("score", "--input", tsv, "--checkpoint", ckpt,
                   "--output", scores, *shape) == 0
        rows = [line.split("\t") for line in scores.read_text().splitlines()]
        assert len(rows) == 20
        assert all(len(r) == 4 for r in rows)
        assert len({r[0] for r in rows}) == 10

        report = tmp_path / "retrieval.json"
        assert run("eval-retrieval", "--input", scores, "--output", report) == 0
        data = json.loads(report.read_text())
        assert data["groups"] == 10
        assert set(data["metrics"]) >= {"MAP", "MRR", "P@1"}
        assert (tmp_path / "retrieval.json.png").exists()

    def test_score_with_wrong_dim_names_parameter(self, tmp_path, capsys):
        tsv = tmp_path / "train.tsv"
        write_overfit_tsv(tsv)
        ckpt = tmp_path / "model.ckpt"
        assert run("train", "--input", tsv, "--output", ckpt, "--steps", 5,
                   "--model-dim", 8, "--max-seg-len", 12, "--max-segments", 4) == 0
        code = run("score", "--input", tsv, "--checkpoint", ckpt,
                   "--output", tmp_path / "s.tsv",
                   "--model-dim", 16, "--max-seg-len", 12, "--max-segments", 4)
        assert code == 1
        assert "embedding" in capsys.readouterr().err

    def test_variant_flag_accepted(self, tmp_path):
        tsv = tmp_path / "train.tsv"
        write_overfit_tsv(tsv)
        ckpt = tmp_path / "variant.ckpt"
        assert run("train", "--input", tsv, "--output", ckpt, "--steps", 5,
                   "--model-dim", 8, "--max-seg-len", 12, "--max-segments", 4,
                   "--variant", "use_word_weights=false,match_pool=max") == 0


class TestSeedReporting:
    def test_seed_always_printed(self, tmp_path, capsys):
        out = tmp_path / "c.jsonl"
        run("synth", "--output", out, "--count", 2)
        assert "seed: 13" in capsys.readouterr().err
