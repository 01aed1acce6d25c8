import * as fs from 'fs';
import * as path from 'path';
import { buildBackbone, DEFAULT_LAYER } from './backbone';
import { writeFmap } from './fmap';
import { DecodeError, prepareImage } from './image';
import { CsvError, idForFile, manifestLine, parseCsv } from './manifest';

export interface ExportJob {
  imagesDir: string;
  csvPath: string;
  outDir: string;
  layer: string;
  size: number;
  seed: number;
}

export interface ExportReport {
  written: number;
  skipped: { filename: string; reason: string }[];
  manifestPath: string;
}

export async function runExport(
  job: ExportJob,
  log: (msg: string) => void = msg => process.stderr.write(msg + '\n'),
): Promise<ExportReport> {
  const rows = parseCsv(fs.readFileSync(job.csvPath, 'utf-8'));
  if (rows.length === 0) {
    throw new CsvError(`${job.csvPath}: no data rows`);
  }

  // fail fast on bad input lists; only per-image decode trouble is skippable
  const seen = new Map<string, string>();
  for (const row of rows) {
    const file = path.join(job.imagesDir, row.filename);
    if (!fs.existsSync(file)) {
      throw new CsvError(`${row.filename}: listed in the csv but not found in ${job.imagesDir}`);
    }
    const id = idForFile(row.filename);
    const clash = seen.get(id);
    if (clash !== undefined && clash !== row.filename) {
      throw new CsvError(`id '${id}' is produced by both '${clash}' and '${row.filename}'`);
    }
    seen.set(id, row.filename);
  }

  fs.mkdirSync(path.join(job.outDir, 'fmaps'), { recursive: true });
  const backbone = buildBackbone(job.seed);
  backbone.channelsAt(job.layer); // validate before any heavy work

  const lines: string[] = [];
  const skipped: ExportReport['skipped'] = [];
  try {
    for (const row of rows) {
      const file = path.join(job.imagesDir, row.filename);
      let rgb: Float32Array;
      try {
        rgb = prepareImage(fs.readFileSync(file), row.filename, job.size);
      } catch (e) {
        if (e instanceof DecodeError) {
          skipped.push({ filename: row.filename, reason: e.message });
          log(`skip ${row.filename}: ${e.message}`);
          continue;
        }
        throw e;
      }
      const fm = await backbone.run(rgb, job.size, job.layer);
      const id = idForFile(row.filename);
      const rel = path.join('fmaps', `${id}.fmap`);
      writeFmap(path.join(job.outDir, rel), fm.h, fm.w, fm.d, fm.data);
      lines.push(manifestLine(row, id, rel));
      log(`${row.filename} -> ${rel} (${fm.h}x${fm.w}x${fm.d})`);
    }
  } finally {
    backbone.dispose();
  }

  const manifestPath = path.join(job.outDir, 'manifest.jsonl');
  fs.writeFileSync(manifestPath, lines.map(l => l + '\n').join(''));
  // the manifest is strict JSONL, so run parameters live in a sidecar
  fs.writeFileSync(
    path.join(job.outDir, 'export_meta.json'),
    JSON.stringify(
      {
        backbone: 'seeded-conv-stack',
        layer: job.layer,
        size: job.size,
        seed: job.seed,
        preprocessing: 'short side scaled to size, center crop, rgb in [0,1] mapped to [-1,1]',
        written: lines.length,
        skipped,
      },
      null,
      2,
    ) + '\n',
  );
  return { written: lines.length, skipped, manifestPath };
}

export { DEFAULT_LAYER };
