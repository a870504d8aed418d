/** TSEG-EMB binary format: per-utterance float32 vectors, little-endian.
 *
 * Layout: magic "TSEG-EMB" (8 bytes), u32 version = 1, u32 dim,
 * u64 record count; then per record u16 key length, UTF-8 key
 * "dialogueId#utteranceIndex", dim float32 values.
 */

import { readFileSync, writeFileSync } from "node:fs";

export const MAGIC = Buffer.from("TSEG-EMB", "ascii");
export const VERSION = 1;

export interface EmbeddingRecord {
  key: string;
  vector: Float32Array;
}

export function writeTsegEmb(path: string, dim: number, records: EmbeddingRecord[]): void {
  const chunks: Buffer[] = [];
  const header = Buffer.alloc(MAGIC.length + 16);
  MAGIC.copy(header, 0);
  header.writeUInt32LE(VERSION, 8);
  header.writeUInt32LE(dim, 12);
  header.writeBigUInt64LE(BigInt(records.length), 16);
  chunks.push(header);
  for (const { key, vector } of records) {
    if (vector.length !== dim) {
      throw new Error(`record '${key}' has ${vector.length} values, want ${dim}`);
    }
    const keyBytes = Buffer.from(key, "utf-8");
    const rec = Buffer.alloc(2 + keyBytes.length + 4 * dim);
    rec.writeUInt16LE(keyBytes.length, 0);
    keyBytes.copy(rec, 2);
    for (let i = 0; i < dim; i++) {
      rec.writeFloatLE(vector[i], 2 + keyBytes.length + 4 * i);
    }
    chunks.push(rec);
  }
  writeFileSync(path, Buffer.concat(chunks));
}

export function readTsegEmb(path: string): { dim: number; records: EmbeddingRecord[] } {
  const data = readFileSync(path);
  const fail = (offset: number, why: string) => {
    throw new Error(`${path}: ${why} at byte ${offset}`);
  };
  if (data.length < 8 || !data.subarray(0, 8).equals(MAGIC)) {
    fail(0, "bad magic");
  }
  const version = data.readUInt32LE(8);
  if (version !== VERSION) fail(8, `unsupported format version ${version}`);
  const dim = data.readUInt32LE(12);
  const count = Number(data.readBigUInt64LE(16));
  let offset = 24;
  const records: EmbeddingRecord[] = [];
  for (let r = 0; r < count; r++) {
    if (data.length < offset + 2) fail(offset, "truncated record header");
    const keyLen = data.readUInt16LE(offset);
    offset += 2;
    if (data.length < offset + keyLen + 4 * dim) fail(offset, "truncated record");
    const key = data.subarray(offset, offset + keyLen).toString("utf-8");
    offset += keyLen;
    const vector = new Float32Array(dim);
    for (let i = 0; i < dim; i++) {
      vector[i] = data.readFloatLE(offset + 4 * i);
      if (!Number.isFinite(vector[i])) fail(offset, `non-finite value in record '${key}'`);
    }
    offset += 4 * dim;
    records.push({ key, vector });
  }
  return { dim, records };
}
