import Papa from 'papaparse';
import * as path from 'path';

export const DOMAINS = ['source', 'target'] as const;
export const SPLITS = ['train_gallery', 'train_query', 'test_gallery', 'test_query'] as const;

export interface CsvRow {
  filename: string;
  lat: number | null;
  lon: number | null;
  domain: (typeof DOMAINS)[number];
  split: (typeof SPLITS)[number];
}

export class CsvError extends Error {}

const REQUIRED = ['filename', 'lat', 'lon', 'domain', 'split'];

export function parseCsv(text: string): CsvRow[] {
  const parsed = Papa.parse<Record<string, string>>(text.trim(), {
    header: true,
    skipEmptyLines: true,
  });
  if (parsed.errors.length > 0) {
    const e = parsed.errors[0];
    throw new CsvError(`csv row ${(e.row ?? 0) + 1}: ${e.message}`);
  }
  const fields = parsed.meta.fields ?? [];
  for (const col of REQUIRED) {
    if (!fields.includes(col)) {
      throw new CsvError(`csv is missing the '${col}' column`);
    }
  }
  const rows: CsvRow[] = [];
  parsed.data.forEach((rec, i) => {
    const where = `csv row ${i + 2}`; // 1-based, after the header
    const filename = (rec.filename ?? '').trim();
    if (!filename) {
      throw new CsvError(`${where}: empty filename`);
    }
    const lat = parseCoord(rec.lat, -90, 90, `${where}: lat`);
    const lon = parseCoord(rec.lon, -180, 180, `${where}: lon`);
    if ((lat === null) !== (lon === null)) {
      throw new CsvError(`${where}: lat and lon must be both present or both empty`);
    }
    const domain = (rec.domain ?? '').trim() as CsvRow['domain'];
    if (!DOMAINS.includes(domain)) {
      throw new CsvError(`${where}: domain must be one of ${DOMAINS.join(', ')}`);
    }
    const split = (rec.split ?? '').trim() as CsvRow['split'];
    if (!SPLITS.includes(split)) {
      throw new CsvError(`${where}: split must be one of ${SPLITS.join(', ')}`);
    }
    rows.push({ filename, lat, lon, domain, split });
  });
  return rows;
}

function parseCoord(raw: string | undefined, lo: number, hi: number, where: string): number | null {
  const s = (raw ?? '').trim();
  if (s === '') return null;
  const v = Number(s);
  if (!Number.isFinite(v) || v < lo || v > hi) {
    throw new CsvError(`${where}: '${s}' is not in [${lo}, ${hi}]`);
  }
  return v;
}

// Record ids come from the image filename stem; the engine requires them
// unique, so collisions are an input error rather than something to paper over.
export function idForFile(filename: string): string {
  const stem = path.basename(filename).replace(/\.[^.]*$/, '');
  const id = stem.replace(/[^A-Za-z0-9_-]/g, '_');
  if (!id) {
    throw new CsvError(`cannot derive an id from '${filename}'`);
  }
  return id;
}

export function manifestLine(row: CsvRow, id: string, fmapPath: string): string {
  return JSON.stringify({
    id,
    lat: row.lat,
    lon: row.lon,
    domain: row.domain,
    split: row.split,
    fmap_path: fmapPath,
  });
}
