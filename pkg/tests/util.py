"""Shared builders for the test suite."""

from __future__ import annotations

import random

from tseg.corpus import (Dialogue, RetrievalExample, TopicSegmentation, Utterance,
                         generate_topic_pool, splice_synthetic_corpus)


def make_dialogue(texts, dialogue_id="d", gold=None):
    return Dialogue(id=dialogue_id,
                    utterances=tuple(Utterance.from_text(t) for t in texts),
                    gold_boundaries=tuple(gold) if gold is not None else None)


def synthetic_recovery_corpus(count=200, seed=13):
    """Spliced multi-topic corpus with disjoint 30-token topic vocabularies.

    Topic lengths are drawn from even values in [4, 8]: with a jump step of
    2 the scan can only cut at even offsets from a segment start, so even
    lengths keep every junction on the evaluation grid.
    """
    pool = generate_topic_pool(n_topics=count * 4, seed=seed,
                               utterance_counts=(4, 6, 8), vocab_size=30)
    return splice_synthetic_corpus(pool, seed=seed + 1,
                                   topics_per_dialogue=(2, 4), count=count)


def overfit_retrieval_set(seed=13):
    """20 examples: 10 shared-vocabulary positives, 10 disjoint negatives.

    Returns (dataset, groups) where dataset pairs each example with a
    trivial one-segment segmentation and groups holds (context,
    [positive, negative], segmentation) triples for ranking checks.
    """
    rng = random.Random(seed)
    shared = [f"s{i}" for i in range(30)]
    alien = [f"neg{i}" for i in range(30)]
    dataset, groups = [], []
    for g in range(10):
        ctx_words = rng.sample(shared, 12)
        ctx = tuple(Utterance.from_text(" ".join(ctx_words[k * 4:(k + 1) * 4]))
                    for k in range(3))
        pos = Utterance.from_text(" ".join(rng.sample(ctx_words, 5)))
        neg = Utterance.from_text(" ".join(rng.sample(alien, 5)))
        seg = TopicSegmentation(dialogue_id=f"g{g}", boundaries=())
        dataset.append((RetrievalExample(context=ctx, response=pos, label=1), seg))
        dataset.append((RetrievalExample(context=ctx, response=neg, label=0), seg))
        groups.append((ctx, [pos, neg], seg))
    return dataset, groups


def write_overfit_tsv(path, seed=13):
    """The overfit set in retrieval TSV form (positive then negative per context)."""
    dataset, _ = overfit_retrieval_set(seed)
    with open(path, "w", encoding="utf-8") as fh:
        for example, _ in dataset:
            fields = [str(example.label), *[u.text for u in example.context],
                      example.response.text]
            fh.write("\t".join(fields) + "\n")
