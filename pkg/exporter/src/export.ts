/** The export job: corpus in, one TSEG-EMB record per utterance out. */

import { readCorpus, tokenize } from "./corpus.js";
import { Pooling, UtteranceEncoder, resolveEncoder } from "./encoders.js";
import { EmbeddingRecord, writeTsegEmb } from "./tsegemb.js";

export interface ExportJob {
  corpus: string;
  model: string;
  pooling: Pooling;
  out: string;
  batch: number;
}

export interface ExportResult {
  records: number;
  dim: number;
}

export async function runExport(job: ExportJob,
                                encoder?: UtteranceEncoder): Promise<ExportResult> {
  if (job.batch < 1) throw new Error(`batch size must be >= 1, got ${job.batch}`);
  const refs = readCorpus(job.corpus);
  const enc = encoder ?? (await resolveEncoder(job.model));
  const records: EmbeddingRecord[] = [];
  for (let start = 0; start < refs.length; start += job.batch) {
    const slice = refs.slice(start, start + job.batch);
    const vectors = await enc.encodeBatch(slice.map((r) => r.text), job.pooling);
    slice.forEach((ref, i) => {
      let vector = vectors[i];
      if (tokenize(ref.text).length === 0) {
        console.warn(`warning: utterance ${ref.key} has no word tokens, writing a zero vector`);
        vector = new Float32Array(enc.dim);
      }
      records.push({ key: ref.key, vector });
    });
  }
  writeTsegEmb(job.out, enc.dim, records);
  return { records: records.length, dim: enc.dim };
}
