/** Utterance encoders behind one batched interface.
 *
 * Two families:
 *  - `hash:<dim>` (alias `test:deterministic`, dim 64): a dependency-free
 *    deterministic encoder. Each token gets a PRNG vector seeded from its
 *    hash; `mean` pooling averages token vectors, `cls` draws a single
 *    sequence-level vector from the whole utterance text. Useful for
 *    pipeline tests and offline smoke runs.
 *  - anything else is treated as a feature-extraction model name for
 *    transformers.js, loaded lazily; a missing package or model fails with
 *    a clear message.
 */

import { tokenize } from "./corpus.js";

export type Pooling = "cls" | "mean";

export interface UtteranceEncoder {
  readonly dim: number;
  encodeBatch(texts: string[], pooling: Pooling): Promise<Float32Array[]>;
}

/** FNV-1a over UTF-8 bytes; stable across platforms. */
function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (const byte of Buffer.from(text, "utf-8")) {
    hash ^= byte;
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

/** mulberry32: tiny deterministic PRNG over a 32-bit state. */
function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function hashVector(seedText: string, dim: number): Float32Array {
  const next = mulberry32(fnv1a(seedText));
  const out = new Float32Array(dim);
  for (let i = 0; i < dim; i++) {
    out[i] = Math.fround(next() * 2 - 1);
  }
  return out;
}

export class HashEncoder implements UtteranceEncoder {
  constructor(readonly dim: number) {}

  tokenVector(token: string): Float32Array {
    return hashVector(`tok:${token}`, this.dim);
  }

  async encodeBatch(texts: string[], pooling: Pooling): Promise<Float32Array[]> {
    return texts.map((text) => {
      if (pooling === "cls") {
        return hashVector(`seq:${text}`, this.dim);
      }
      const tokens = tokenize(text);
      const acc = new Float64Array(this.dim);
      for (const token of tokens) {
        const vec = this.tokenVector(token);
        for (let i = 0; i < this.dim; i++) acc[i] += vec[i];
      }
      const out = new Float32Array(this.dim);
      if (tokens.length > 0) {
        for (let i = 0; i < this.dim; i++) out[i] = Math.fround(acc[i] / tokens.length);
      }
      return out;
    });
  }
}

class TransformersEncoder implements UtteranceEncoder {
  constructor(readonly dim: number, private extractor: any) {}

  async encodeBatch(texts: string[], pooling: Pooling): Promise<Float32Array[]> {
    const output = await this.extractor(texts, { pooling, normalize: false });
    const rows: number[][] = output.tolist();
    return rows.map((row) => Float32Array.from(row));
  }
}

async function loadTransformersEncoder(model: string): Promise<UtteranceEncoder> {
  let pipeline: any;
  try {
    const specifier = "@huggingface/transformers";
    ({ pipeline } = await import(specifier));
  } catch {
    try {
      const fallback = "@xenova/transformers";
      ({ pipeline } = await import(fallback));
    } catch {
      throw new Error(
        `encoder '${model}' needs the transformers.js package ` +
        `(@huggingface/transformers); it is not installed. ` +
        `Use 'hash:<dim>' or 'test:deterministic' for an offline encoder.`,
      );
    }
  }
  const extractor = await pipeline("feature-extraction", model);
  const probe = await extractor("probe", { pooling: "mean", normalize: false });
  const dim = probe.tolist()[0].length as number;
  return new TransformersEncoder(dim, extractor);
}

export async function resolveEncoder(model: string): Promise<UtteranceEncoder> {
  if (model === "test:deterministic") {
    return new HashEncoder(64);
  }
  const hashMatch = /^hash:(\d+)$/.exec(model);
  if (hashMatch) {
    const dim = Number(hashMatch[1]);
    if (dim < 1) throw new Error(`encoder '${model}': dimension must be >= 1`);
    return new HashEncoder(dim);
  }
  return loadTransformersEncoder(model);
}
