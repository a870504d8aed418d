"""Text-to-vector encoders and cosine similarity.

Three interchangeable families feed the segmenter:

* ``TfEncoder`` — sparse term-frequency counts (plain dicts),
* ``EmbeddingEncoder`` — mean of known word vectors from a GloVe-style table,
* ``PrecomputedEncoder`` — per-utterance vectors from a TSEG-EMB file,
  combined as a token-count-weighted mean (exact for linear encoders).

Dense vectors are float32 arrays; cosine math runs in float64. A zero-norm
side makes cosine degenerate: the value is 0.0 and the flagged variant says
so, so callers can tell "orthogonal" from "no signal".
"""

from __future__ import annotations

import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

EMB_MAGIC = b"TSEG-EMB"
EMB_VERSION = 1


class EncoderError(ValueError):
    """Bad encoder input or malformed embedding file."""


# ---------------------------------------------------------------------------
# cosine
# ---------------------------------------------------------------------------

def cosine_flagged(a, b) -> tuple[float, bool]:
    """Cosine similarity plus a degeneracy flag (True when a norm is zero).

    The denominator is ``sqrt(|a|^2 * |b|^2)``, which keeps the identity
    ``cosine(v, v) == 1.0`` exact for integer count vectors.
    """
    if isinstance(a, Mapping) and isinstance(b, Mapping):
        dot = float(sum(v * b[k] for k, v in a.items() if k in b))
        na2 = float(sum(v * v for v in a.values()))
        nb2 = float(sum(v * v for v in b.values()))
    elif isinstance(a, Mapping) or isinstance(b, Mapping):
        raise EncoderError("cosine: cannot mix term-frequency and dense vectors")
    else:
        av = np.asarray(a, dtype=np.float64)
        bv = np.asarray(b, dtype=np.float64)
        if av.shape != bv.shape:
            raise EncoderError(f"cosine: dimension mismatch {av.shape} vs {bv.shape}")
        dot = float(av @ bv)
        na2 = float(av @ av)
        nb2 = float(bv @ bv)
    if na2 == 0.0 or nb2 == 0.0:
        return 0.0, True
    return dot / math.sqrt(na2 * nb2), False


def cosine(a, b) -> float:
    return cosine_flagged(a, b)[0]


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class TfEncoder:
    """Raw term-frequency counts over the concatenated utterances."""

    def encode(self, token_sequences: Sequence[Sequence[str]], keys=None) -> Counter:
        counts: Counter = Counter()
        for toks in token_sequences:
            counts.update(toks)
        return counts


@dataclass
class EmbeddingTable:
    """token -> float32 vector, all of dimension ``dim``; unknown tokens are skipped."""

    dim: int
    vectors: dict[str, np.ndarray]
    unknown_policy: str = "skip"


class EmbeddingEncoder:
    """Mean of the known-token vectors across the concatenation."""

    def __init__(self, table: EmbeddingTable):
        self.table = table
        self.dim = table.dim

    def encode(self, token_sequences: Sequence[Sequence[str]], keys=None) -> np.ndarray:
        total = np.zeros(self.dim, dtype=np.float64)
        known = 0
        vectors = self.table.vectors
        for toks in token_sequences:
            for tok in toks:
                vec = vectors.get(tok)
                if vec is not None:
                    total += vec
                    known += 1
        if known == 0:
            return np.zeros(self.dim, dtype=np.float32)
        return (total / known).astype(np.float32)


@dataclass
class PrecomputedStore:
    """Per-utterance vectors keyed by (dialogue_id, utterance_index)."""

    dim: int
    vectors: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)


class PrecomputedEncoder:
    """Token-count-weighted mean of stored per-utterance vectors.

    Weighting by token count makes the concatenation encoding exact for
    linear encoders and a stated approximation otherwise.
    """

    def __init__(self, store: PrecomputedStore):
        self.store = store
        self.dim = store.dim

    def encode(self, token_sequences: Sequence[Sequence[str]],
               keys: Sequence[tuple[str, int]] | None = None) -> np.ndarray:
        if keys is None:
            raise EncoderError("precomputed encoder requires per-utterance keys")
        if len(keys) != len(token_sequences):
            raise EncoderError(
                f"precomputed encoder: {len(keys)} keys for {len(token_sequences)} utterances")
        total = np.zeros(self.dim, dtype=np.float64)
        weight = 0
        for toks, key in zip(token_sequences, keys):
            w = len(toks)
            if w == 0:
                continue
            vec = self.store.vectors.get(tuple(key))
            if vec is None:
                continue
            total += w * vec.astype(np.float64)
            weight += w
        if weight == 0:
            return np.zeros(self.dim, dtype=np.float32)
        return (total / weight).astype(np.float32)


def encode(encoder, token_sequences: Sequence[Sequence[str]], keys=None):
    """Uniform entry point over the three encoder families."""
    return encoder.encode(token_sequences, keys=keys)


# ---------------------------------------------------------------------------
# GloVe text format
# ---------------------------------------------------------------------------

def load_glove_text(path) -> EmbeddingTable:
    """Read ``token v1 ... vd`` lines; dimension is inferred from the first line."""
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise EncoderError(
                    f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            try:
                vec = np.asarray([float(v) for v in values], dtype=np.float32)
            except ValueError as exc:
                raise EncoderError(f"{path}:{lineno}: bad float: {exc}") from exc
            if token in vectors:
                log.warning("duplicate token %r at %s:%d, last occurrence wins",
                            token, path, lineno)
            vectors[token] = vec
    if dim is None:
        raise EncoderError(f"{path}: empty embedding file")
    return EmbeddingTable(dim=dim, vectors=vectors)


# ---------------------------------------------------------------------------
# TSEG-EMB binary format
# ---------------------------------------------------------------------------

def write_precomputed(path, store: PrecomputedStore) -> None:
    """Write a TSEG-EMB file (little-endian, float32 payload)."""
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IIQ", EMB_VERSION, store.dim, len(store.vectors)))
        for (dialogue_id, idx), vec in store.vectors.items():
            key = f"{dialogue_id}#{idx}".encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            arr = np.asarray(vec, dtype="<f4")
            if arr.shape != (store.dim,):
                raise EncoderError(
                    f"vector for {dialogue_id!r}#{idx} has shape {arr.shape}, want ({store.dim},)")
            fh.write(arr.tobytes())


def load_precomputed(path) -> PrecomputedStore:
    """Read a TSEG-EMB file; errors carry the byte offset of the problem."""
    with open(path, "rb") as fh:
        data = fh.read()

    def fail(offset: int, why: str):
        raise EncoderError(f"{path}: {why} at byte {offset}")

    if len(data) < 8 or data[:8] != EMB_MAGIC:
        fail(0, f"bad magic {data[:8]!r}, expected {EMB_MAGIC!r}")
    off = 8
    if len(data) < off + 16:
        fail(off, "truncated header")
    version, dim, count = struct.unpack_from("<IIQ", data, off)
    if version != EMB_VERSION:
        fail(off, f"unsupported format version {version}")
    off += 16
    store = PrecomputedStore(dim=dim)
    rec_bytes = 4 * dim
    for _ in range(count):
        if len(data) < off + 2:
            fail(off, "truncated record header")
        (key_len,) = struct.unpack_from("<H", data, off)
        off += 2
        if len(data) < off + key_len + rec_bytes:
            fail(off, "truncated record")
        key = data[off:off + key_len].decode("utf-8")
        off += key_len
        if "#" not in key:
            fail(off - key_len, f"key {key!r} missing '#' separator")
        dialogue_id, _, idx_str = key.rpartition("#")
        try:
            idx = int(idx_str)
        except ValueError:
            fail(off - key_len, f"key {key!r} has non-integer utterance index")
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        if not np.all(np.isfinite(vec)):
            fail(off, f"non-finite value in record {key!r}")
        store.vectors[(dialogue_id, idx)] = vec
        off += rec_bytes
    return store
