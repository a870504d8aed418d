"""The ``tseg`` command: segmentation, matching, and evaluation pipeline.

Subcommands: ``segment``, ``eval-seg``, ``train``, ``score``,
``eval-retrieval``, ``synth``. Every output artifact gets a sibling
``<output>.manifest.json`` recording the resolved configuration, inputs,
seed, and version; report paths also render a PNG figure next to the
delimited output. Set ``TSEG_LOG`` to error/warn/info/debug to control
diagnostics (stderr only).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

from . import __version__, reporting
from .corpus import (CorpusError, Dialogue, generate_topic_pool, load_dialogues,
                     load_retrieval_tsv, read_segmentations, splice_synthetic_corpus,
                     write_dialogues, write_segmentations)
from .encoders import (EncoderError, EmbeddingEncoder, PrecomputedEncoder, TfEncoder,
                       load_glove_text, load_precomputed)
from .matcher import (MatcherConfig, MatcherError, apply_variant, load_matcher,
                      prepare, save_matcher, score_example, train)
from .numerics import NumericsError
from .retrieval_metrics import (RetrievalMetricsError, load_scores_file,
                                mean_average_precision, mean_reciprocal_rank, p_at_1,
                                recall_at_k)
from .seg_metrics import SegMetricsError, evaluate_segmentations
from .segmenter import SegmenterConfig, SegmenterError, segment_dialogue

log = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}

_ERRORS = (CorpusError, EncoderError, SegmenterError, SegMetricsError,
           MatcherError, NumericsError, RetrievalMetricsError, OSError)


def _setup_logging() -> None:
    level = os.environ.get("TSEG_LOG", "warn").strip().lower()
    logging.basicConfig(stream=sys.stderr,
                        level=_LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _span(text: str) -> tuple[int, int]:
    """Parse 'A-B' (or a single 'A') into an inclusive integer range."""
    parts = text.split("-", 1)
    lo = int(parts[0])
    hi = int(parts[1]) if len(parts) == 2 else lo
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"bad range {text!r}")
    return lo, hi


def _write_manifest(output: str, subcommand: str, args: argparse.Namespace,
                    inputs: list[str], outputs: list[str], started: float) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "wall_clock_seconds": time.time() - started,
    }
    with open(f"{output}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _parallel_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _build_encoder(args: argparse.Namespace):
    if args.encoder == "tf":
        return TfEncoder()
    if args.encoder == "glove":
        if not args.glove_path:
            raise EncoderError("--encoder glove requires --glove-path")
        return EmbeddingEncoder(load_glove_text(args.glove_path))
    if not args.emb_path:
        raise EncoderError("--encoder precomputed requires --emb-path")
    return PrecomputedEncoder(load_precomputed(args.emb_path))


def _print_seed(seed: int) -> None:
    print(f"seed: {seed}", file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_segment(args: argparse.Namespace) -> int:
    started = time.time()
    _print_seed(args.seed)
    dialogues = load_dialogues(args.input)
    encoder = _build_encoder(args)
    config = SegmenterConfig(max_range=args.range, jump=args.jump,
                             context_window=args.window, cost_threshold=args.threshold)
    segmentations = _parallel_map(lambda d: segment_dialogue(d, encoder, config),
                                  dialogues, args.threads)
    write_segmentations(args.output, segmentations)
    _write_manifest(args.output, "segment", args, [args.input], [args.output], started)
    log.info("segmented %d dialogues -> %s", len(dialogues), args.output)
    return 0


def cmd_eval_seg(args: argparse.Namespace) -> int:
    started = time.time()
    _print_seed(args.seed)
    predictions = read_segmentations(args.input)
    if not predictions:
        raise SegMetricsError(f"{args.input}: no predictions found")
    gold = load_dialogues(args.gold)
    report = evaluate_segmentations(predictions, gold, wd_window=args.wd_window)
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    figure = f"{args.output}.png"
    reporting.save_seg_eval_figure(figure, report)
    print(f"{'metric':<12} value")
    for name, value in (("MAE", report.mae), ("WindowDiff", report.window_diff),
                        ("Precision", report.precision), ("Recall", report.recall),
                        ("F1", report.f1)):
        print(f"{name:<12} {value:.4f}")
    _write_manifest(args.output, "eval-seg", args, [args.input, args.gold],
                    [args.output, figure], started)
    return 0


def _matcher_config(args: argparse.Namespace) -> MatcherConfig:
    config = MatcherConfig(max_segments=args.max_segments,
                           max_segment_tokens=args.max_seg_len,
                           model_dim=args.model_dim,
                           weight_channels=args.weight_channels,
                           alpha=args.alpha,
                           token_budget=args.token_budget)
    if args.variant:
        config = apply_variant(config, args.variant)
    return config


def _segment_contexts(examples, args: argparse.Namespace):
    """Segment each distinct context once; returns one segmentation per example."""
    encoder = _build_encoder(args)
    seg_config = SegmenterConfig(max_range=args.range, jump=args.jump,
                                 context_window=args.window,
                                 cost_threshold=args.threshold)
    cache: dict[tuple, object] = {}
    segmentations = []
    for example in examples:
        key = tuple(u.text for u in example.context)
        if key not in cache:
            dialogue = Dialogue(id=f"ctx-{len(cache)}", utterances=example.context)
            cache[key] = segment_dialogue(dialogue, encoder, seg_config)
        segmentations.append(cache[key])
    return segmentations


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    _print_seed(args.seed)
    examples = load_retrieval_tsv(args.input)
    if not examples:
        raise MatcherError(f"{args.input}: no training examples")
    segmentations = _segment_contexts(examples, args)
    config = _matcher_config(args)
    params, trace = train(list(zip(examples, segmentations)), config,
                          lr=args.lr, batch_size=args.batch, steps=args.steps,
                          seed=args.seed)
    save_matcher(args.output, params)
    loss_path = f"{args.output}.loss.tsv"
    with open(loss_path, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\n")
        for step, loss in enumerate(trace.step_losses, start=1):
            fh.write(f"{step}\t{loss!r}\n")
    figure = f"{args.output}.loss.png"
    reporting.save_loss_curve(figure, trace.step_losses, trace.epoch_losses)
    _write_manifest(args.output, "train", args, [args.input],
                    [args.output, loss_path, figure], started)
    final = trace.epoch_losses[-1] if trace.epoch_losses else float("nan")
    log.info("trained %d steps, final epoch mean loss %.6f", len(trace.step_losses), final)
    return 0


def _group_consecutive(examples):
    """Group rows sharing a context (consecutive in the file) under one id."""
    groups: list[tuple[str, list[int]]] = []
    last_key = None
    for idx, example in enumerate(examples):
        key = tuple(u.text for u in example.context)
        if key != last_key:
            groups.append((f"g{len(groups):05d}", []))
            last_key = key
        groups[-1][1].append(idx)
    return groups


def cmd_score(args: argparse.Namespace) -> int:
    started = time.time()
    _print_seed(args.seed)
    examples = load_retrieval_tsv(args.input)
    if not examples:
        raise MatcherError(f"{args.input}: no examples to score")
    config = _matcher_config(args)
    params = load_matcher(args.checkpoint, config)
    segmentations = _segment_contexts(examples, args)
    groups = _group_consecutive(examples)

    def score_group(group):
        gid, indices = group
        rows = []
        for cand_idx, ex_idx in enumerate(indices):
            example = examples[ex_idx]
            ctx = prepare(example, segmentations[ex_idx], config, vocab=params.vocab)
            rows.append((gid, cand_idx, score_example(params, ctx), example.label))
        return rows

    scored = _parallel_map(score_group, groups, args.threads)
    with open(args.output, "w", encoding="utf-8") as fh:
        for rows in scored:
            for gid, cand_idx, score, label in rows:
                fh.write(f"{gid}\t{cand_idx}\t{score!r}\t{label}\n")
    _write_manifest(args.output, "score", args, [args.input, args.checkpoint],
                    [args.output], started)
    return 0


def cmd_eval_retrieval(args: argparse.Namespace) -> int:
    started = time.time()
    _print_seed(args.seed)
    groups = load_scores_file(args.input)
    if not groups:
        raise RetrievalMetricsError(f"{args.input}: no score rows")
    smallest = min(len(g.scores) for g in groups)
    metrics: dict[str, float] = {}
    for k in (1, 2, 5):
        if k <= smallest:
            metrics[f"R@{k}"] = recall_at_k(groups, k)
    metrics["MAP"] = mean_average_precision(groups)
    metrics["MRR"] = mean_reciprocal_rank(groups)
    metrics["P@1"] = p_at_1(groups)
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump({"groups": len(groups), "group_size_min": smallest, "metrics": metrics},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    figure = f"{args.output}.png"
    reporting.save_retrieval_metrics_figure(figure, metrics)
    for name, value in metrics.items():
        print(f"{name:<6} {value:.4f}")
    _write_manifest(args.output, "eval-retrieval", args, [args.input],
                    [args.output, figure], started)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.time()
    _print_seed(args.seed)
    lo, hi = args.topics
    if args.input:
        pool = load_dialogues(args.input)
        if not pool:
            raise CorpusError(f"{args.input}: no source dialogues")
    else:
        pool = generate_topic_pool(n_topics=args.count * hi, seed=args.seed,
                                   utterance_counts=range(args.utterances[0],
                                                          args.utterances[1] + 1),
                                   vocab_size=args.vocab_size)
    corpus = splice_synthetic_corpus(pool, seed=args.seed + 1,
                                     topics_per_dialogue=(lo, hi), count=args.count)
    write_dialogues(args.output, corpus)
    _write_manifest(args.output, "synth", args,
                    [args.input] if args.input else [], [args.output], started)
    log.info("wrote %d spliced dialogues -> %s", len(corpus), args.output)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_segmenter_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--encoder", choices=("tf", "glove", "precomputed"), default="tf")
    parser.add_argument("--glove-path", default=None)
    parser.add_argument("--emb-path", default=None)
    parser.add_argument("--range", type=_positive_int, default=8,
                        help="maximum candidate segment length")
    parser.add_argument("--jump", type=_positive_int, default=2,
                        help="evaluate candidates every this many utterances")
    parser.add_argument("--window", type=_positive_int, default=2,
                        help="context utterances on each side")
    parser.add_argument("--threshold", type=float, default=0.6,
                        help="cut when the candidate cost is at or below this")


def _add_matcher_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--alpha", type=float, default=0.5)
    parser.add_argument("--max-segments", type=_positive_int, default=10)
    parser.add_argument("--max-seg-len", type=_positive_int, default=32)
    parser.add_argument("--token-budget", type=_positive_int, default=350)
    parser.add_argument("--model-dim", type=_positive_int, default=16)
    parser.add_argument("--weight-channels", type=_positive_int, default=4)
    parser.add_argument("--variant", default="",
                        help="comma-separated flag=value overrides, e.g. "
                             "use_word_weights=false,match_pool=max")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=13)
    parser.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tseg", description=__doc__)
    parser.add_argument("--version", action="version", version=f"tseg {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("segment", help="topic-segment a dialogue corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _add_segmenter_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval-seg", help="evaluate segmentations against gold boundaries")
    p.add_argument("--input", required=True, help="predicted segmentations (JSONL)")
    p.add_argument("--gold", required=True, help="gold dialogues (JSONL)")
    p.add_argument("--output", required=True, help="JSON report path")
    p.add_argument("--wd-window", type=_positive_int, default=4)
    _add_common(p)
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("train", help="train the matching head on a retrieval TSV")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="checkpoint path (TSEG-CKPT)")
    _add_segmenter_flags(p)
    _add_matcher_flags(p)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=_positive_int, default=8)
    p.add_argument("--steps", type=_positive_int, default=500)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score candidates with a trained checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True, help="scores TSV path")
    _add_segmenter_flags(p)
    _add_matcher_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval-retrieval", help="ranking metrics over a scores file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="JSON report path")
    _add_common(p)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("synth", help="build a synthetic multi-topic corpus")
    p.add_argument("--input", default=None, help="optional single-topic source dialogues")
    p.add_argument("--output", required=True)
    p.add_argument("--count", type=_positive_int, default=200)
    p.add_argument("--topics", type=_span, default=(2, 4))
    p.add_argument("--utterances", type=_span, default=(4, 8))
    p.add_argument("--vocab-size", type=_positive_int, default=30)
    _add_common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"tseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
