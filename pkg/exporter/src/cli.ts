#!/usr/bin/env node
/** `tseg-export export --corpus ... --model ... --pooling ... --out ... --batch N` */

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { runExport } from "./export.js";

async function main(): Promise<number> {
  const argv = await yargs(hideBin(process.argv))
    .command("export", "encode a dialogue corpus into a TSEG-EMB file", (cmd) =>
      cmd
        .option("corpus", { type: "string", demandOption: true, describe: "dialogue JSONL" })
        .option("model", { type: "string", demandOption: true, describe: "encoder name (or hash:<dim>)" })
        .option("pooling", { choices: ["cls", "mean"] as const, demandOption: true })
        .option("out", { type: "string", demandOption: true, describe: "output TSEG-EMB path" })
        .option("batch", { type: "number", default: 32 }),
    )
    .demandCommand(1)
    .strict()
    .parse();

  try {
    const result = await runExport({
      corpus: argv.corpus as string,
      model: argv.model as string,
      pooling: argv.pooling as "cls" | "mean",
      out: argv.out as string,
      batch: argv.batch as number,
    });
    console.log(`wrote ${result.records} records (dim ${result.dim}) to ${argv.out}`);
    return 0;
  } catch (err) {
    console.error(`tseg-export: error: ${(err as Error).message}`);
    return 1;
  }
}

main().then((code) => {
  process.exitCode = code;
});
