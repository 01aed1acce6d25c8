import * as fs from 'fs';
import * as os from 'os';
import * as path from 'path';
import * as zlib from 'zlib';
import { afterAll, describe, expect, it } from 'vitest';
import { runExport } from '../src/export';
import { readFmap } from '../src/fmap';
import { parseCsv, idForFile } from '../src/manifest';

const tmp = fs.mkdtempSync(path.join(os.tmpdir(), 'export-'));
afterAll(() => fs.rmSync(tmp, { recursive: true, force: true }));

// little gradient PPMs are enough to drive the pipeline
function writePpm(file: string, w: number, h: number, offset: number): void {
  const body = Buffer.alloc(w * h * 3);
  for (let i = 0; i < body.length; i++) body[i] = (i * 7 + offset) % 256;
  fs.writeFileSync(file, Buffer.concat([Buffer.from(`P6 ${w} ${h} 255\n`, 'ascii'), body]));
}

function setup(name: string, rows: string[], images: { [f: string]: (p: string) => void }) {
  const dir = path.join(tmp, name);
  fs.mkdirSync(path.join(dir, 'imgs'), { recursive: true });
  for (const [file, make] of Object.entries(images)) {
    make(path.join(dir, 'imgs', file));
  }
  fs.writeFileSync(path.join(dir, 'list.csv'),
    ['filename,lat,lon,domain,split', ...rows].join('\n') + '\n');
  return dir;
}

const quiet = () => {};

describe('csv parsing', () => {
  it('accepts empty geo and rejects half-empty geo', () => {
    const rows = parseCsv('filename,lat,lon,domain,split\na.png,,,target,train_gallery\n');
    expect(rows[0].lat).toBeNull();
    expect(rows[0].lon).toBeNull();
    expect(() => parseCsv('filename,lat,lon,domain,split\na.png,52.0,,target,train_gallery\n'))
      .toThrow(/both present or both empty/);
  });

  it('rejects unknown enums, bad ranges and missing columns', () => {
    expect(() => parseCsv('filename,lat,lon,domain,split\na.png,52,4,indoors,test_query\n'))
      .toThrow(/domain must be one of/);
    expect(() => parseCsv('filename,lat,lon,domain,split\na.png,52,4,source,val\n'))
      .toThrow(/split must be one of/);
    expect(() => parseCsv('filename,lat,lon,domain,split\na.png,91,4,source,test_query\n'))
      .toThrow(/not in \[-90, 90\]/);
    expect(() => parseCsv('filename,lat,domain,split\na.png,52,source,test_query\n'))
      .toThrow(/missing the 'lon' column/);
  });

  it('derives filesystem-safe ids', () => {
    expect(idForFile('shots/IMG 1999 (old).png')).toBe('IMG_1999__old_');
    expect(idForFile('plain.ppm')).toBe('plain');
  });
});

describe('export job', () => {
  it('writes one fmap and one manifest line per image', async () => {
    const dir = setup('basic', [
      'a.ppm,52.37,4.89,source,test_gallery',
      'b.ppm,52.3701,4.8901,source,test_query',
      'c.ppm,,,target,train_gallery',
    ], {
      'a.ppm': p => writePpm(p, 40, 30, 0),
      'b.ppm': p => writePpm(p, 30, 40, 50),
      'c.ppm': p => writePpm(p, 32, 32, 100),
    });
    const report = await runExport({
      imagesDir: path.join(dir, 'imgs'),
      csvPath: path.join(dir, 'list.csv'),
      outDir: path.join(dir, 'out'),
      layer: 'conv4',
      size: 32,
      seed: 1234,
    }, quiet);
    expect(report.written).toBe(3);
    expect(report.skipped).toEqual([]);

    const lines = fs.readFileSync(report.manifestPath, 'utf-8').trim().split('\n');
    expect(lines.length).toBe(3);
    const recs = lines.map(l => JSON.parse(l));
    expect(recs.map(r => r.id)).toEqual(['a', 'b', 'c']);
    expect(recs[2].lat).toBeNull();
    for (const rec of recs) {
      const fm = readFmap(path.join(dir, 'out', rec.fmap_path));
      expect([fm.h, fm.w, fm.d]).toEqual([4, 4, 64]);
      fm.data.forEach(v => expect(Number.isFinite(v)).toBe(true));
    }
    const meta = JSON.parse(fs.readFileSync(path.join(dir, 'out', 'export_meta.json'), 'utf-8'));
    expect(meta.layer).toBe('conv4');
    expect(meta.written).toBe(3);
  });

  it('skips undecodable images and reports them', async () => {
    const dir = setup('skip', [
      'ok.ppm,52.37,4.89,source,test_gallery',
      'bad.png,52.38,4.90,source,test_gallery',
    ], {
      'ok.ppm': p => writePpm(p, 32, 32, 0),
      'bad.png': p => fs.writeFileSync(p, Buffer.concat([
        Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]),
        zlib.deflateSync(Buffer.from('nope')),
      ])),
    });
    const logged: string[] = [];
    const report = await runExport({
      imagesDir: path.join(dir, 'imgs'),
      csvPath: path.join(dir, 'list.csv'),
      outDir: path.join(dir, 'out'),
      layer: 'conv4',
      size: 32,
      seed: 1234,
    }, msg => logged.push(msg));
    expect(report.written).toBe(1);
    expect(report.skipped.length).toBe(1);
    expect(report.skipped[0].filename).toBe('bad.png');
    expect(logged.some(l => l.startsWith('skip bad.png'))).toBe(true);
    const lines = fs.readFileSync(report.manifestPath, 'utf-8').trim().split('\n');
    expect(lines.length).toBe(1);
  });

  it('fails fast on missing files and id collisions', async () => {
    const dir = setup('missing', ['ghost.ppm,52.37,4.89,source,test_gallery'], {});
    await expect(runExport({
      imagesDir: path.join(dir, 'imgs'),
      csvPath: path.join(dir, 'list.csv'),
      outDir: path.join(dir, 'out'),
      layer: 'conv4',
      size: 32,
      seed: 1234,
    }, quiet)).rejects.toThrow(/not found/);

    const dir2 = setup('clash', [
      'a.ppm,52.37,4.89,source,test_gallery',
      'a.png,52.38,4.90,source,test_gallery',
    ], {
      'a.ppm': p => writePpm(p, 32, 32, 0),
      'a.png': p => writePpm(p, 32, 32, 9), // content is irrelevant, the stem clashes
    });
    await expect(runExport({
      imagesDir: path.join(dir2, 'imgs'),
      csvPath: path.join(dir2, 'list.csv'),
      outDir: path.join(dir2, 'out'),
      layer: 'conv4',
      size: 32,
      seed: 1234,
    }, quiet)).rejects.toThrow(/id 'a' is produced by both/);
  });

  it('is byte-identical across runs with one seed', async () => {
    const dir = setup('det', ['a.ppm,52.37,4.89,source,test_gallery'], {
      'a.ppm': p => writePpm(p, 48, 36, 3),
    });
    const job = (out: string) => ({
      imagesDir: path.join(dir, 'imgs'),
      csvPath: path.join(dir, 'list.csv'),
      outDir: path.join(dir, out),
      layer: 'conv3' as string,
      size: 32,
      seed: 77,
    });
    await runExport(job('out1'), quiet);
    await runExport(job('out2'), quiet);
    const a = fs.readFileSync(path.join(dir, 'out1', 'fmaps', 'a.fmap'));
    const b = fs.readFileSync(path.join(dir, 'out2', 'fmaps', 'a.fmap'));
    expect(a.equals(b)).toBe(true);
  });
});
