import * as fs from 'fs';
import * as os from 'os';
import * as path from 'path';
import { afterAll, describe, expect, it } from 'vitest';
import { encodeFmap, readFmap, writeFmap } from '../src/fmap';

const tmp = fs.mkdtempSync(path.join(os.tmpdir(), 'fmap-'));
afterAll(() => fs.rmSync(tmp, { recursive: true, force: true }));

describe('fmap format', () => {
  it('writes the exact header layout', () => {
    const buf = encodeFmap(2, 3, 4, new Float32Array(24));
    expect(buf.subarray(0, 6).toString('latin1')).toBe('FMAP1\0');
    expect(buf.readUInt32LE(6)).toBe(2);
    expect(buf.readUInt32LE(10)).toBe(3);
    expect(buf.readUInt32LE(14)).toBe(4);
    expect(buf.length).toBe(18 + 4 * 24);
  });

  it('round-trips values exactly', () => {
    const data = new Float32Array(2 * 2 * 3);
    for (let i = 0; i < data.length; i++) data[i] = (i - 5) * 0.3125; // exact in f32
    const file = path.join(tmp, 'rt.fmap');
    writeFmap(file, 2, 2, 3, data);
    const back = readFmap(file);
    expect([back.h, back.w, back.d]).toEqual([2, 2, 3]);
    expect(Array.from(back.data)).toEqual(Array.from(data));
  });

  it('rejects length mismatches and non-finite values', () => {
    expect(() => encodeFmap(2, 2, 2, new Float32Array(7))).toThrow(/does not match/);
    const bad = new Float32Array(8);
    bad[3] = Infinity;
    expect(() => encodeFmap(2, 2, 2, bad)).toThrow(/non-finite/);
  });

  it('rejects truncated files and wrong magic', () => {
    const file = path.join(tmp, 'bad.fmap');
    const good = encodeFmap(2, 2, 2, new Float32Array(8));
    fs.writeFileSync(file, good.subarray(0, good.length - 4));
    expect(() => readFmap(file)).toThrow(/payload/);
    fs.writeFileSync(file, Buffer.from('NOTFMAP' + '\0'.repeat(40)));
    expect(() => readFmap(file)).toThrow(/not an FMAP1/);
  });
});
