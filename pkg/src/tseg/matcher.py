"""Dual-attention matching head over topic-segmented contexts.

Pipeline, per (context, candidate response) pair:

1. ``prepare`` splits the context into segments, truncates (last ``T``
   segments, last ``L`` tokens each, total token budget), and embeds
   tokens through a trainable toy embedding table (or frozen externally
   supplied vectors).
2. Segment weighting: a word-level matching feature map against the
   response gives per-segment weights ``s1`` (softmax over valid
   segments); mean-pooled cosine similarity gives ``s2``; they are mixed
   by ``alpha`` and scale each segment's representation.
3. Dual cross-attention: each weighted segment attends to the response
   and vice versa through a shared attentive module (scaled dot-product
   attention, layer norm, ReLU feed-forward, no residual connections);
   both directions are pooled over tokens and fused into one matching
   vector per segment.
4. Aggregation: a GRU runs over the per-segment matching vectors; the
   last valid segment's matching vector gets its own linear head; the two
   are fused and squashed to a score in (0, 1).

Every stage has a hand-derived backward; the whole pipeline is gradient
checked in the test suite. Ablation variants (dropping either weighting
level, either aggregation part, one attention direction, or switching
pooling/fusion) are plain configuration flags and reuse the same code
paths.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import RetrievalExample, TopicSegmentation
from .numerics import (Adam, GruParams, Parameter, layer_norm, layer_norm_backward,
                       load_checkpoint, max_pool, max_pool_backward, mean_pool,
                       mean_pool_backward, relu, relu_backward, save_checkpoint, sigmoid,
                       softmax, softmax_backward, tanh, gru_sequence,
                       gru_sequence_backward)

MATCH_SIDES = ("dual", "segment_only", "response_only")
POOLS = ("mean", "max")
FUSES = ("concat", "sum")

_BOOL_FIELDS = {"use_word_weights", "use_segment_weights",
                "use_last_segment_match", "use_multi_turn_match"}


class MatcherError(ValueError):
    pass


@dataclass(frozen=True)
class MatcherConfig:
    max_segments: int = 10
    max_segment_tokens: int = 32
    model_dim: int = 16
    weight_channels: int = 4
    alpha: float = 0.5
    token_budget: int = 350
    use_word_weights: bool = True
    use_segment_weights: bool = True
    use_last_segment_match: bool = True
    use_multi_turn_match: bool = True
    match_side: str = "dual"
    match_pool: str = "mean"
    match_fuse: str = "concat"
    aggregate_fuse: str = "concat"

    def __post_init__(self):
        if min(self.max_segments, self.max_segment_tokens, self.model_dim,
               self.weight_channels, self.token_budget) < 1:
            raise MatcherError("all matcher dimensions must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise MatcherError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (self.use_last_segment_match or self.use_multi_turn_match):
            raise MatcherError(
                "at least one of use_last_segment_match / use_multi_turn_match must be on")
        if self.match_side not in MATCH_SIDES:
            raise MatcherError(f"match_side must be one of {MATCH_SIDES}")
        if self.match_pool not in POOLS:
            raise MatcherError(f"match_pool must be one of {POOLS}")
        if self.match_fuse not in FUSES or self.aggregate_fuse not in FUSES:
            raise MatcherError(f"fusion modes must be one of {FUSES}")

    @property
    def match_width(self) -> int:
        """Width of one segment's fused matching vector."""
        if self.match_side != "dual" or self.match_fuse == "sum":
            return self.model_dim
        return 2 * self.model_dim

    @property
    def hidden_size(self) -> int:
        return 2 * self.model_dim

    @property
    def score_width(self) -> int:
        both = self.use_last_segment_match and self.use_multi_turn_match
        if both and self.aggregate_fuse == "concat":
            return 2 * self.hidden_size
        return self.hidden_size


def parse_variant_flags(text: str) -> dict:
    """Parse ``flag=value,...`` overrides using MatcherConfig field names."""
    out: dict = {}
    valid = set(MatcherConfig.__dataclass_fields__)
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise MatcherError(f"variant flag {chunk!r} is not of the form name=value")
        name, value = chunk.split("=", 1)
        name = name.strip()
        if name not in valid:
            raise MatcherError(f"unknown variant flag {name!r}")
        if name in _BOOL_FIELDS:
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0"):
                raise MatcherError(f"variant flag {name!r} needs a boolean, got {value!r}")
            out[name] = lowered in ("true", "1")
        elif name == "alpha":
            out[name] = float(value)
        elif name in ("match_side", "match_pool", "match_fuse", "aggregate_fuse"):
            out[name] = value.strip()
        else:
            out[name] = int(value)
    return out


def apply_variant(config: MatcherConfig, text: str) -> MatcherConfig:
    return replace(config, **parse_variant_flags(text))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class MatcherParams:
    """All learnable arrays, addressable by name for checkpoints and checking."""

    def __init__(self, config: MatcherConfig, vocab: dict[str, int], seed: int = 13):
        self.config = config
        self.vocab = dict(vocab)
        rng = np.random.default_rng(seed)
        d = config.model_dim
        h = config.weight_channels
        L = config.max_segment_tokens
        m = config.match_width
        hidden = config.hidden_size
        d_ff = 4 * d

        def mat(name, rows, cols):
            return Parameter(name, rng.normal(0.0, rows ** -0.5, (rows, cols)))

        vocab_size = len(self.vocab) + 1  # row 0 is the unknown token
        self.embedding = Parameter("embedding", rng.normal(0.0, 0.1, (vocab_size, d)))
        self.word_weight_diag = mat("word_weight_diag", d, h)
        self.word_weight_proj = Parameter("word_weight_proj", rng.normal(0.0, h ** -0.5, h))
        self.weight_head_w = Parameter("weight_head_w", rng.normal(0.0, (2 * L) ** -0.5, 2 * L))
        self.weight_head_b = Parameter("weight_head_b", np.zeros(1))
        self.attn_ln_gain = Parameter("attn_ln_gain", np.ones(d))
        self.attn_ln_bias = Parameter("attn_ln_bias", np.zeros(d))
        self.attn_ffn_w1 = mat("attn_ffn_w1", d, d_ff)
        self.attn_ffn_b1 = Parameter("attn_ffn_b1", np.zeros(d_ff))
        self.attn_ffn_w2 = mat("attn_ffn_w2", d_ff, d)
        self.attn_ffn_b2 = Parameter("attn_ffn_b2", np.zeros(d))
        self.gru = GruParams(m, hidden, rng, prefix="gru")
        self.last_match_w = mat("last_match_w", m, hidden)
        self.last_match_b = Parameter("last_match_b", np.zeros(hidden))
        self.score_w = Parameter("score_w", rng.normal(0.0, config.score_width ** -0.5,
                                                       config.score_width))
        self.score_b = Parameter("score_b", np.zeros(1))

    def parameters(self) -> list[Parameter]:
        return [self.embedding, self.word_weight_diag, self.word_weight_proj,
                self.weight_head_w, self.weight_head_b,
                self.attn_ln_gain, self.attn_ln_bias,
                self.attn_ffn_w1, self.attn_ffn_b1, self.attn_ffn_w2, self.attn_ffn_b2,
                *self.gru.parameters(),
                self.last_match_w, self.last_match_b, self.score_w, self.score_b]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def build_vocab(dataset: Sequence[tuple[RetrievalExample, TopicSegmentation]]) -> dict[str, int]:
    tokens: set[str] = set()
    for example, _ in dataset:
        for utt in example.context:
            tokens.update(utt.tokens)
        tokens.update(example.response.tokens)
    return {tok: i + 1 for i, tok in enumerate(sorted(tokens))}


def save_matcher(path, params: MatcherParams) -> None:
    """Write the TSEG-CKPT file plus a vocab sidecar JSON next to it."""
    save_checkpoint(path, params.parameters())
    tokens = [tok for tok, _ in sorted(params.vocab.items(), key=lambda kv: kv[1])]
    with open(f"{path}.vocab.json", "w", encoding="utf-8") as fh:
        json.dump({"tokens": tokens}, fh, sort_keys=True)


def load_matcher(path, config: MatcherConfig) -> MatcherParams:
    """Load a checkpoint, validating every tensor shape against ``config``."""
    arrays = load_checkpoint(path)
    vocab_path = Path(f"{path}.vocab.json")
    if not vocab_path.exists():
        raise MatcherError(f"missing vocab sidecar {vocab_path}")
    with open(vocab_path, encoding="utf-8") as fh:
        tokens = json.load(fh)["tokens"]
    vocab = {tok: i + 1 for i, tok in enumerate(tokens)}
    params = MatcherParams(config, vocab, seed=0)
    for p in params.parameters():
        if p.name not in arrays:
            raise MatcherError(f"checkpoint {path} is missing parameter {p.name!r}")
        stored = arrays[p.name]
        if stored.shape != p.value.shape:
            raise MatcherError(
                f"checkpoint/config shape mismatch for {p.name!r}: "
                f"stored {stored.shape}, config wants {p.value.shape}")
        p.value[...] = stored
    return params


# ---------------------------------------------------------------------------
# input preparation
# ---------------------------------------------------------------------------

@dataclass
class EncodedContext:
    """Padded, masked matcher input; valid segments come first.

    Either token-id arrays (trainable embedding route) or materialized
    vector arrays (frozen external vectors) are populated.
    """

    ctx_token_mask: np.ndarray   # (T, L) bool
    seg_mask: np.ndarray         # (T,) bool
    resp_token_mask: np.ndarray  # (L,) bool
    n_valid: int
    ctx_token_ids: np.ndarray | None = None   # (T, L) int64, -1 where padded
    resp_token_ids: np.ndarray | None = None  # (L,) int64
    ctx_vectors: np.ndarray | None = None     # (T, L, d) float64
    resp_vectors: np.ndarray | None = None    # (L, d) float64


def _split_segments(context, boundaries) -> list[list[str]]:
    n = len(context)
    for b in boundaries:
        if not 1 <= b <= n - 1:
            raise MatcherError(f"segmentation boundary {b} invalid for {n} context utterances")
    cuts = [0, *boundaries, n]
    segments = []
    for lo, hi in zip(cuts, cuts[1:]):
        toks = [t for utt in context[lo:hi] for t in utt.tokens]
        if toks:
            segments.append(toks)
    return segments


def prepare(example: RetrievalExample, segmentation: TopicSegmentation,
            config: MatcherConfig, vocab: dict[str, int] | None = None,
            token_table=None) -> EncodedContext:
    """Segment, truncate, and index/embed one retrieval example.

    Truncation keeps the most recent content: the last ``max_segments``
    segments, the last ``max_segment_tokens`` tokens of each, and drops the
    earliest segments while the total context token count exceeds the
    budget. Empty segments (no word tokens) are dropped.
    """
    if vocab is None and token_table is None:
        raise MatcherError("prepare needs a vocab (trainable route) or a token_table")
    T, L = config.max_segments, config.max_segment_tokens

    segments = _split_segments(example.context, segmentation.boundaries)
    segments = segments[-T:]
    segments = [seg[-L:] for seg in segments]
    while len(segments) > 1 and sum(len(s) for s in segments) > config.token_budget:
        segments.pop(0)
    if len(segments) == 1 and len(segments[0]) > config.token_budget:
        segments[0] = segments[0][-config.token_budget:]
    if not segments:
        raise MatcherError("empty context after truncation: no tokens survive")

    resp = list(example.response.tokens)[-L:]
    if not resp:
        raise MatcherError("response has no word tokens")

    n_valid = len(segments)
    ctx_mask = np.zeros((T, L), dtype=bool)
    seg_mask = np.zeros(T, dtype=bool)
    resp_mask = np.zeros(L, dtype=bool)
    seg_mask[:n_valid] = True
    for i, seg in enumerate(segments):
        ctx_mask[i, :len(seg)] = True
    resp_mask[:len(resp)] = True

    ctx = EncodedContext(ctx_token_mask=ctx_mask, seg_mask=seg_mask,
                         resp_token_mask=resp_mask, n_valid=n_valid)
    if token_table is not None:
        d = token_table.dim
        cvec = np.zeros((T, L, d))
        rvec = np.zeros((L, d))
        for i, seg in enumerate(segments):
            for j, tok in enumerate(seg):
                hit = token_table.vectors.get(tok)
                if hit is not None:
                    cvec[i, j] = hit
        for j, tok in enumerate(resp):
            hit = token_table.vectors.get(tok)
            if hit is not None:
                rvec[j] = hit
        ctx.ctx_vectors = cvec
        ctx.resp_vectors = rvec
    else:
        cids = np.full((T, L), -1, dtype=np.int64)
        rids = np.full(L, -1, dtype=np.int64)
        for i, seg in enumerate(segments):
            for j, tok in enumerate(seg):
                cids[i, j] = vocab.get(tok, 0)
        for j, tok in enumerate(resp):
            rids[j] = vocab.get(tok, 0)
        ctx.ctx_token_ids = cids
        ctx.resp_token_ids = rids
    return ctx


# ---------------------------------------------------------------------------
# forward stages
# ---------------------------------------------------------------------------

def _embed(params: MatcherParams, ctx: EncodedContext):
    """Materialize (T, L, d) context and (L, d) response tensors; padding stays 0."""
    if ctx.ctx_vectors is not None:
        return ctx.ctx_vectors, ctx.resp_vectors
    d = params.config.model_dim
    T, L = ctx.ctx_token_ids.shape
    C = np.zeros((T, L, d))
    C[ctx.ctx_token_mask] = params.embedding.value[ctx.ctx_token_ids[ctx.ctx_token_mask]]
    R = np.zeros((L, d))
    R[ctx.resp_token_mask] = params.embedding.value[ctx.resp_token_ids[ctx.resp_token_mask]]
    return C, R


def _scatter_embedding_grads(params: MatcherParams, ctx: EncodedContext,
                             dC: np.ndarray, dR: np.ndarray) -> None:
    if ctx.ctx_vectors is not None:
        return
    np.add.at(params.embedding.grad, ctx.ctx_token_ids[ctx.ctx_token_mask],
              dC[ctx.ctx_token_mask])
    np.add.at(params.embedding.grad, ctx.resp_token_ids[ctx.resp_token_mask],
              dR[ctx.resp_token_mask])


def _word_weights_forward(params: MatcherParams, C, R, ctx: EncodedContext):
    """Word-level segment weights: matching feature map -> pooled -> softmax."""
    d = params.config.model_dim
    scale = 1.0 / math.sqrt(d)
    tm, rm, sm = ctx.ctx_token_mask, ctx.resp_token_mask, ctx.seg_mask

    m1 = np.einsum("xyk,kv,uk->xyuv", C, params.word_weight_diag.value, R)
    act = tanh(m1)
    m = np.einsum("xyuv,v->xyu", act, params.word_weight_proj.value) * scale

    masked_resp = np.where(rm[None, None, :], m, -np.inf)
    idx_resp = np.argmax(masked_resp, axis=2)                       # (T, L)
    over_resp = np.take_along_axis(masked_resp, idx_resp[:, :, None], axis=2)[:, :, 0]
    part1 = np.where(tm, over_resp, 0.0)

    masked_tok = np.where(tm[:, :, None], m, -np.inf)
    idx_tok = np.argmax(masked_tok, axis=1)                         # (T, L)
    over_tok = np.take_along_axis(masked_tok, idx_tok[:, None, :], axis=1)[:, 0, :]
    valid2 = sm[:, None] & rm[None, :]
    part2 = np.where(valid2, over_tok, 0.0)

    pooled = np.concatenate([part1, part2], axis=1)                 # (T, 2L)
    logits = pooled @ params.weight_head_w.value + params.weight_head_b.value[0]
    s1 = softmax(logits, axis=-1, mask=sm)
    cache = (m1, act, idx_resp, idx_tok, valid2, pooled, s1)
    return s1, cache


def _word_weights_backward(params: MatcherParams, C, R, ctx: EncodedContext,
                           cache, ds1):
    d = params.config.model_dim
    scale = 1.0 / math.sqrt(d)
    tm = ctx.ctx_token_mask
    m1, act, idx_resp, idx_tok, valid2, pooled, s1 = cache
    L = tm.shape[1]

    dlogits = softmax_backward(ds1, s1, axis=-1)
    params.weight_head_w.grad += pooled.T @ dlogits
    params.weight_head_b.grad += dlogits.sum(keepdims=True)
    dpooled = np.outer(dlogits, params.weight_head_w.value)          # (T, 2L)
    dpart1 = np.where(tm, dpooled[:, :L], 0.0)
    dpart2 = np.where(valid2, dpooled[:, L:], 0.0)

    dm = np.zeros_like(act[..., 0])                                  # (T, L, L)
    xs, ys = np.nonzero(tm)
    np.add.at(dm, (xs, ys, idx_resp[xs, ys]), dpart1[xs, ys])
    xs2, us2 = np.nonzero(valid2)
    np.add.at(dm, (xs2, idx_tok[xs2, us2], us2), dpart2[xs2, us2])

    params.word_weight_proj.grad += np.einsum("xyu,xyuv->v", dm, act) * scale
    dact = dm[..., None] * params.word_weight_proj.value * scale
    dm1 = dact * (1.0 - act * act)
    dC = np.einsum("xyuv,kv,uk->xyk", dm1, params.word_weight_diag.value, R)
    params.word_weight_diag.grad += np.einsum("xyuv,xyk,uk->kv", dm1, C, R)
    dR = np.einsum("xyuv,xyk,kv->uk", dm1, C, params.word_weight_diag.value)
    return dC, dR


def _segment_weights_forward(C, R, ctx: EncodedContext):
    """Segment-level weights: cosine between mean-pooled segment and response."""
    tm, rm, sm = ctx.ctx_token_mask, ctx.resp_token_mask, ctx.seg_mask
    seg_counts = np.maximum(tm.sum(axis=1), 1)
    seg_means = (C * tm[:, :, None]).sum(axis=1) / seg_counts[:, None]   # (T, d)
    resp_count = rm.sum()
    resp_mean = (R * rm[:, None]).sum(axis=0) / resp_count                # (d,)

    seg_norms = np.linalg.norm(seg_means, axis=1)
    resp_norm = float(np.linalg.norm(resp_mean))
    s2 = np.zeros(sm.shape[0])
    for i in np.nonzero(sm)[0]:
        if seg_norms[i] != 0.0 and resp_norm != 0.0:
            s2[i] = float(seg_means[i] @ resp_mean) / (seg_norms[i] * resp_norm)
    cache = (seg_means, resp_mean, seg_norms, resp_norm, seg_counts, resp_count, s2)
    return s2, cache


def _segment_weights_backward(ctx: EncodedContext, cache, ds2):
    tm, rm, sm = ctx.ctx_token_mask, ctx.resp_token_mask, ctx.seg_mask
    seg_means, resp_mean, seg_norms, resp_norm, seg_counts, resp_count, s2 = cache
    T, L = tm.shape
    d = seg_means.shape[1]
    dC = np.zeros((T, L, d))
    dresp_mean = np.zeros(d)
    for i in np.nonzero(sm)[0]:
        if seg_norms[i] == 0.0 or resp_norm == 0.0 or ds2[i] == 0.0:
            continue
        na, nb = seg_norms[i], resp_norm
        dmean_i = ds2[i] * (resp_mean / (na * nb) - s2[i] * seg_means[i] / (na * na))
        dresp_mean += ds2[i] * (seg_means[i] / (na * nb) - s2[i] * resp_mean / (nb * nb))
        dC[i] = tm[i][:, None] * dmean_i[None, :] / seg_counts[i]
    dR = rm[:, None] * dresp_mean[None, :] / resp_count
    return dC, dR


def _combine_weights(s1, s2, config: MatcherConfig, n_slots: int):
    """Mix the two weight levels per the variant flags; endpoints stay exact."""
    if config.use_word_weights and config.use_segment_weights:
        if config.alpha == 1.0:
            return s1, "word"
        if config.alpha == 0.0:
            return s2, "segment"
        return config.alpha * s1 + (1.0 - config.alpha) * s2, "mixed"
    if config.use_word_weights:
        return s1, "word"
    if config.use_segment_weights:
        return s2, "segment"
    return np.ones(n_slots), "none"


def combine_and_weight(C, s1, s2, config: MatcherConfig):
    """Scale each segment's representation by its combined weight."""
    s, mode = _combine_weights(s1, s2, config, C.shape[0])
    if mode == "none":
        return C, s
    return s[:, None, None] * C, s


# ---------------------------------------------------------------------------
# attentive module
# ---------------------------------------------------------------------------

def _attentive_forward(params: MatcherParams, query, key, value, key_mask):
    d = params.config.model_dim
    scale = 1.0 / math.sqrt(d)
    scores = (query @ key.T) * scale
    attn = softmax(scores, axis=-1, mask=np.broadcast_to(key_mask[None, :], scores.shape))
    v_att = attn @ value
    normed, ln_cache = layer_norm(v_att, params.attn_ln_gain.value,
                                  params.attn_ln_bias.value)
    pre = normed @ params.attn_ffn_w1.value + params.attn_ffn_b1.value
    hidden = relu(pre)
    out = hidden @ params.attn_ffn_w2.value + params.attn_ffn_b2.value
    cache = (query, key, value, attn, ln_cache, normed, pre, hidden, scale)
    return out, cache


def _attentive_backward(params: MatcherParams, cache, dout):
    query, key, value, attn, ln_cache, normed, pre, hidden, scale = cache
    params.attn_ffn_w2.grad += hidden.T @ dout
    params.attn_ffn_b2.grad += dout.sum(axis=0)
    dhidden = dout @ params.attn_ffn_w2.value.T
    dpre = relu_backward(dhidden, pre)
    params.attn_ffn_w1.grad += normed.T @ dpre
    params.attn_ffn_b1.grad += dpre.sum(axis=0)
    dnormed = dpre @ params.attn_ffn_w1.value.T
    dv_att, dgain, dbias = layer_norm_backward(dnormed, ln_cache)
    params.attn_ln_gain.grad += dgain
    params.attn_ln_bias.grad += dbias
    dattn = dv_att @ value.T
    dvalue = attn.T @ dv_att
    dscores = softmax_backward(dattn, attn, axis=-1)
    dquery = (dscores @ key) * scale
    dkey = (dscores.T @ query) * scale
    return dquery, dkey, dvalue


def attentive_module(params: MatcherParams, query, key, value, key_mask):
    """Attention + layer norm + feed-forward, forward only."""
    out, _ = _attentive_forward(params, query, key, value, key_mask)
    return out


# ---------------------------------------------------------------------------
# dual cross-attention matching
# ---------------------------------------------------------------------------

def _pool_tokens(x, mask, mode):
    if mode == "mean":
        return mean_pool(x, 0, mask), None
    values, idx = max_pool(x, 0, mask=mask)
    return values, idx


def _pool_tokens_backward(grad, x_shape, mask, mode, idx):
    if mode == "mean":
        return mean_pool_backward(grad, x_shape, 0, mask)
    return max_pool_backward(grad, x_shape, 0, idx)


def _dual_match_forward(params: MatcherParams, C_tilde, R, ctx: EncodedContext):
    config = params.config
    T = C_tilde.shape[0]
    rows = np.zeros((T, config.match_width))
    seg_caches: list[dict | None] = [None] * T
    for i in range(ctx.n_valid):
        tok_mask = ctx.ctx_token_mask[i]
        seg = C_tilde[i]
        entry: dict = {}
        if config.match_side in ("dual", "segment_only"):
            out_s, cache_s = _attentive_forward(params, seg, R, R, ctx.resp_token_mask)
            pooled_s, idx_s = _pool_tokens(out_s, tok_mask, config.match_pool)
            entry.update(cache_s=cache_s, out_s_shape=out_s.shape,
                         pooled_s=pooled_s, idx_s=idx_s)
        if config.match_side in ("dual", "response_only"):
            out_r, cache_r = _attentive_forward(params, R, seg, seg, tok_mask)
            pooled_r, idx_r = _pool_tokens(out_r, ctx.resp_token_mask, config.match_pool)
            entry.update(cache_r=cache_r, out_r_shape=out_r.shape,
                         pooled_r=pooled_r, idx_r=idx_r)
        if config.match_side == "dual":
            if config.match_fuse == "concat":
                rows[i] = np.concatenate([entry["pooled_s"], entry["pooled_r"]])
            else:
                rows[i] = entry["pooled_s"] + entry["pooled_r"]
        elif config.match_side == "segment_only":
            rows[i] = entry["pooled_s"]
        else:
            rows[i] = entry["pooled_r"]
        seg_caches[i] = entry
    return rows, seg_caches


def _dual_match_backward(params: MatcherParams, ctx: EncodedContext, seg_caches,
                         drows, C_shape, R_shape):
    config = params.config
    d = config.model_dim
    dC_tilde = np.zeros(C_shape)
    dR = np.zeros(R_shape)
    for i in range(ctx.n_valid):
        entry = seg_caches[i]
        drow = drows[i]
        tok_mask = ctx.ctx_token_mask[i]
        if config.match_side == "dual":
            if config.match_fuse == "concat":
                dpooled_s, dpooled_r = drow[:d], drow[d:]
            else:
                dpooled_s = dpooled_r = drow
        elif config.match_side == "segment_only":
            dpooled_s, dpooled_r = drow, None
        else:
            dpooled_s, dpooled_r = None, drow
        if dpooled_s is not None:
            dout_s = _pool_tokens_backward(dpooled_s, entry["out_s_shape"], tok_mask,
                                           config.match_pool, entry["idx_s"])
            dq, dk, dv = _attentive_backward(params, entry["cache_s"], dout_s)
            dC_tilde[i] += dq
            dR += dk + dv
        if dpooled_r is not None:
            dout_r = _pool_tokens_backward(dpooled_r, entry["out_r_shape"],
                                           ctx.resp_token_mask,
                                           config.match_pool, entry["idx_r"])
            dq, dk, dv = _attentive_backward(params, entry["cache_r"], dout_r)
            dR += dq
            dC_tilde[i] += dk + dv
    return dC_tilde, dR


def dual_cross_match(params: MatcherParams, C_tilde, R, ctx: EncodedContext):
    """Per-segment fused matching vectors, forward only; padded rows are zero."""
    rows, _ = _dual_match_forward(params, C_tilde, R, ctx)
    return rows


# ---------------------------------------------------------------------------
# aggregation and scoring
# ---------------------------------------------------------------------------

def _aggregate_forward(params: MatcherParams, rows, n_valid: int):
    config = params.config
    cache: dict = {}
    parts = []
    if config.use_multi_turn_match:
        h_final, gru_caches = gru_sequence(rows[:n_valid], params.gru)
        cache["gru_caches"] = gru_caches
        parts.append(h_final)
    last_row = rows[n_valid - 1]
    cache["last_row"] = last_row
    if config.use_last_segment_match:
        last_hat = last_row @ params.last_match_w.value + params.last_match_b.value
        cache["last_hat"] = last_hat
        parts.append(last_hat)
    if len(parts) == 2:
        fused = np.concatenate(parts) if config.aggregate_fuse == "concat" else parts[0] + parts[1]
    else:
        fused = parts[0]
    logit = float(fused @ params.score_w.value + params.score_b.value[0])
    score = float(sigmoid(np.asarray(logit)))
    cache.update(fused=fused, score=score, n_valid=n_valid, rows_shape=rows.shape)
    return score, cache


def _aggregate_backward(params: MatcherParams, cache, dscore):
    config = params.config
    score = cache["score"]
    dlogit = dscore * score * (1.0 - score)
    fused = cache["fused"]
    params.score_w.grad += dlogit * fused
    params.score_b.grad += np.array([dlogit])
    dfused = dlogit * params.score_w.value

    hidden = config.hidden_size
    dh = dlast_hat = None
    if config.use_multi_turn_match and config.use_last_segment_match:
        if config.aggregate_fuse == "concat":
            dh, dlast_hat = dfused[:hidden], dfused[hidden:]
        else:
            dh = dlast_hat = dfused
    elif config.use_multi_turn_match:
        dh = dfused
    else:
        dlast_hat = dfused

    drows = np.zeros(cache["rows_shape"])
    n_valid = cache["n_valid"]
    if dlast_hat is not None:
        params.last_match_w.grad += np.outer(cache["last_row"], dlast_hat)
        params.last_match_b.grad += dlast_hat
        drows[n_valid - 1] += params.last_match_w.value @ dlast_hat
    if dh is not None:
        dvalid = gru_sequence_backward(dh, cache["gru_caches"], params.gru,
                                       (n_valid, cache["rows_shape"][1]))
        drows[:n_valid] += dvalid
    return drows


def aggregate_and_score(params: MatcherParams, rows, n_valid: int) -> float:
    score, _ = _aggregate_forward(params, rows, n_valid)
    return score


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

def word_level_weights(params: MatcherParams, ctx: EncodedContext) -> np.ndarray:
    C, R = _embed(params, ctx)
    s1, _ = _word_weights_forward(params, C, R, ctx)
    return s1


def segment_level_weights(params: MatcherParams, ctx: EncodedContext) -> np.ndarray:
    C, R = _embed(params, ctx)
    s2, _ = _segment_weights_forward(C, R, ctx)
    return s2


def forward(params: MatcherParams, ctx: EncodedContext):
    """Score one (context, response) pair; the cache drives :func:`backward`."""
    config = params.config
    C, R = _embed(params, ctx)
    cache: dict = {"C": C, "R": R}

    s1 = s2 = None
    if config.use_word_weights:
        s1, cache["ww"] = _word_weights_forward(params, C, R, ctx)
    if config.use_segment_weights:
        s2, cache["sw"] = _segment_weights_forward(C, R, ctx)
    s, mode = _combine_weights(s1, s2, config, C.shape[0])
    cache.update(s=s, mode=mode)
    C_tilde = C if mode == "none" else s[:, None, None] * C

    rows, seg_caches = _dual_match_forward(params, C_tilde, R, ctx)
    cache.update(seg_caches=seg_caches)
    score, agg_cache = _aggregate_forward(params, rows, ctx.n_valid)
    cache["agg"] = agg_cache
    return score, cache


def backward(params: MatcherParams, ctx: EncodedContext, cache, dscore: float) -> None:
    """Accumulate d(score)/d(params) * dscore into all parameter gradients."""
    config = params.config
    C, R = cache["C"], cache["R"]
    s, mode = cache["s"], cache["mode"]

    drows = _aggregate_backward(params, cache["agg"], dscore)
    dC_tilde, dR = _dual_match_backward(params, ctx, cache["seg_caches"], drows,
                                        C.shape, R.shape)

    if mode == "none":
        dC = dC_tilde
        ds = None
    else:
        dC = s[:, None, None] * dC_tilde
        ds = np.einsum("xld,xld->x", dC_tilde, C)

    ds1 = ds2 = None
    if mode == "word":
        ds1 = ds
    elif mode == "segment":
        ds2 = ds
    elif mode == "mixed":
        ds1 = config.alpha * ds
        ds2 = (1.0 - config.alpha) * ds

    if ds2 is not None and config.use_segment_weights:
        dC_sw, dR_sw = _segment_weights_backward(ctx, cache["sw"], ds2)
        dC = dC + dC_sw
        dR = dR + dR_sw
    if ds1 is not None and config.use_word_weights:
        dC_ww, dR_ww = _word_weights_backward(params, C, R, ctx, cache["ww"], ds1)
        dC = dC + dC_ww
        dR = dR + dR_ww

    _scatter_embedding_grads(params, ctx, dC, dR)


def score_example(params: MatcherParams, ctx: EncodedContext) -> float:
    return forward(params, ctx)[0]


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------

_CLAMP = 1e-12


def bce_loss(score: float, label: int) -> float:
    s = min(max(score, _CLAMP), 1.0 - _CLAMP)
    return -(label * math.log(s) + (1 - label) * math.log(1.0 - s))


def bce_loss_backward(score: float, label: int) -> float:
    s = min(max(score, _CLAMP), 1.0 - _CLAMP)
    if score != s:
        return 0.0  # clamped: the loss is flat in score here
    return -label / s + (1 - label) / (1.0 - s)


def loss_and_gradients(params: MatcherParams, ctx: EncodedContext, label: int,
                       grad_scale: float = 1.0) -> tuple[float, float]:
    score, cache = forward(params, ctx)
    loss = bce_loss(score, label)
    backward(params, ctx, cache, bce_loss_backward(score, label) * grad_scale)
    return loss, score


@dataclass
class TrainTrace:
    step_losses: list[float]
    epoch_losses: list[float]


def train(dataset: Sequence[tuple[RetrievalExample, TopicSegmentation]],
          config: MatcherConfig, lr: float = 1e-3, batch_size: int = 8,
          steps: int = 500, seed: int = 13,
          beta1: float = 0.9, beta2: float = 0.999) -> tuple[MatcherParams, TrainTrace]:
    """Mini-batch Adam training of the matcher; deterministic per seed."""
    if not dataset:
        raise MatcherError("train: empty dataset")
    vocab = build_vocab(dataset)
    params = MatcherParams(config, vocab, seed=seed)
    prepared = [prepare(ex, seg, config, vocab=vocab) for ex, seg in dataset]
    labels = [ex.label for ex, _ in dataset]
    optimizer = Adam(params.parameters(), lr=lr, beta1=beta1, beta2=beta2)
    rng = np.random.default_rng(seed)

    n = len(dataset)
    perm = rng.permutation(n)
    cursor = 0
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    epoch_accum: list[float] = []
    for _ in range(steps):
        if cursor >= n:
            epoch_losses.append(sum(epoch_accum) / len(epoch_accum))
            epoch_accum = []
            perm = rng.permutation(n)
            cursor = 0
        batch = perm[cursor:cursor + batch_size]
        cursor += len(batch)
        total = 0.0
        for idx in batch:
            loss, _ = loss_and_gradients(params, prepared[idx], labels[idx],
                                         grad_scale=1.0 / len(batch))
            total += loss
        batch_loss = total / len(batch)
        if not math.isfinite(batch_loss):
            offender = next((p.name for p in params.parameters()
                             if not np.all(np.isfinite(p.grad))), "loss")
            raise MatcherError(f"non-finite training loss; first bad gradient: {offender}")
        optimizer.step()
        step_losses.append(batch_loss)
        epoch_accum.append(batch_loss)
    if epoch_accum:
        epoch_losses.append(sum(epoch_accum) / len(epoch_accum))
    return params, TrainTrace(step_losses=step_losses, epoch_losses=epoch_losses)


def score_candidates(context, candidates, segmentation: TopicSegmentation,
                     params: MatcherParams,
                     config: MatcherConfig | None = None) -> list[tuple[int, float]]:
    """Score every candidate against the same segmented context.

    Returns (candidate index, score) sorted by score descending, ties
    broken by original index.
    """
    if not candidates:
        raise MatcherError("score_candidates: need at least one candidate")
    config = config or params.config
    scored = []
    for idx, cand in enumerate(candidates):
        example = RetrievalExample(context=tuple(context), response=cand, label=0)
        ctx = prepare(example, segmentation, config, vocab=params.vocab)
        scored.append((idx, score_example(params, ctx)))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored
