/** Reading the dialogue corpus (JSONL, one dialogue per line). */

import { readFileSync } from "node:fs";

export interface UtteranceRef {
  /** Record key in the output file: `${dialogueId}#${utteranceIndex}`. */
  key: string;
  text: string;
}

const TOKEN_RE = /[\p{L}\p{N}]+/gu;

export function tokenize(text: string): string[] {
  return text.toLowerCase().match(TOKEN_RE) ?? [];
}

/**
 * Flatten a corpus into per-utterance records in file order.
 * Schema per line: {"id": str, "utterances": [{"speaker", "text"}...], ...}
 */
export function readCorpus(path: string): UtteranceRef[] {
  const refs: UtteranceRef[] = [];
  const seen = new Set<string>();
  const lines = readFileSync(path, "utf-8").split("\n");
  lines.forEach((line, i) => {
    if (!line.trim()) return;
    let record: { id?: unknown; utterances?: unknown };
    try {
      record = JSON.parse(line);
    } catch (err) {
      throw new Error(`${path}:${i + 1}: invalid JSON: ${(err as Error).message}`);
    }
    if (record.id === undefined || !Array.isArray(record.utterances)) {
      throw new Error(`${path}:${i + 1}: record needs 'id' and 'utterances'`);
    }
    const id = String(record.id);
    if (seen.has(id)) {
      throw new Error(`${path}:${i + 1}: duplicate dialogue id '${id}'`);
    }
    seen.add(id);
    record.utterances.forEach((utt: { text?: unknown }, index: number) => {
      refs.push({ key: `${id}#${index}`, text: String(utt.text ?? "") });
    });
  });
  return refs;
}
