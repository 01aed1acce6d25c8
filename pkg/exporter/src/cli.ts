#!/usr/bin/env node
import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';
import { DEFAULT_LAYER, runExport } from './export';
import { CsvError } from './manifest';

// exit codes match the engine: 0 ok, 1 usage, 2 bad data
async function main(): Promise<number> {
  const argv = await yargs(hideBin(process.argv))
    .usage('fmap-export --images DIR --csv FILE --out DIR [options]')
    .option('images', { type: 'string', demandOption: true, describe: 'image directory' })
    .option('csv', { type: 'string', demandOption: true, describe: 'csv of filename,lat,lon,domain,split' })
    .option('out', { type: 'string', demandOption: true, describe: 'output dataset directory' })
    .option('layer', { type: 'string', default: DEFAULT_LAYER, describe: 'backbone tap layer' })
    .option('size', { type: 'number', default: 512, describe: 'resize/center-crop target' })
    .option('seed', { type: 'number', default: 1234, describe: 'backbone weight seed' })
    .strict()
    .fail((msg, err) => {
      if (err) throw err;
      process.stderr.write(msg + '\n');
      process.exit(1);
    })
    .parse();

  if (!Number.isInteger(argv.size) || argv.size < 8) {
    process.stderr.write(`--size must be an integer >= 8, got ${argv.size}\n`);
    return 1;
  }

  try {
    const report = await runExport({
      imagesDir: argv.images,
      csvPath: argv.csv,
      outDir: argv.out,
      layer: argv.layer,
      size: argv.size,
      seed: argv.seed,
    });
    process.stderr.write(`wrote ${report.written} feature maps to ${argv.out}`
      + (report.skipped.length ? `, skipped ${report.skipped.length}` : '') + '\n');
    return 0;
  } catch (e) {
    if (e instanceof CsvError || (e instanceof Error && 'code' in e && e.code === 'ENOENT')) {
      process.stderr.write(`${e.message}\n`);
      return 2;
    }
    if (e instanceof Error && e.message.startsWith('unknown layer')) {
      process.stderr.write(`${e.message}\n`);
      return 1;
    }
    throw e;
  }
}

main().then(
  code => process.exit(code),
  e => {
    console.error(e);
    process.exit(2);
  },
);
