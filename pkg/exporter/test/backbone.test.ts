import { describe, expect, it } from 'vitest';
import { buildBackbone, DEFAULT_LAYER, mulberry32 } from '../src/backbone';

function constantImage(size: number, value: number): Float32Array {
  return new Float32Array(size * size * 3).fill(value);
}

function texturedImage(size: number, seed: number): Float32Array {
  const rand = mulberry32(seed);
  const out = new Float32Array(size * size * 3);
  for (let i = 0; i < out.length; i++) out[i] = rand();
  return out;
}

function maxSpatialStd(fm: { h: number; w: number; d: number; data: Float32Array }): number {
  let worst = 0;
  const n = fm.h * fm.w;
  for (let c = 0; c < fm.d; c++) {
    let sum = 0;
    let sum2 = 0;
    for (let i = 0; i < n; i++) {
      const v = fm.data[i * fm.d + c];
      sum += v;
      sum2 += v * v;
    }
    const mean = sum / n;
    worst = Math.max(worst, Math.sqrt(Math.max(sum2 / n - mean * mean, 0)));
  }
  return worst;
}

describe('seeded backbone', () => {
  it('is deterministic across builds', async () => {
    const a = buildBackbone(99);
    const b = buildBackbone(99);
    const img = texturedImage(64, 5);
    const fa = await a.run(img, 64, DEFAULT_LAYER);
    const fb = await b.run(img, 64, DEFAULT_LAYER);
    expect(Array.from(fa.data)).toEqual(Array.from(fb.data));
    a.dispose();
    b.dispose();
  });

  it('different seeds give different features', async () => {
    const a = buildBackbone(1);
    const b = buildBackbone(2);
    const img = texturedImage(64, 5);
    const fa = await a.run(img, 64, DEFAULT_LAYER);
    const fb = await b.run(img, 64, DEFAULT_LAYER);
    let diff = 0;
    fa.data.forEach((v, i) => (diff = Math.max(diff, Math.abs(v - fb.data[i]))));
    expect(diff).toBeGreaterThan(0.01);
    a.dispose();
    b.dispose();
  });

  it('produces the documented shapes at each tap', async () => {
    const bb = buildBackbone(1234);
    const img = texturedImage(64, 5);
    const expected: { [k: string]: [number, number, number] } = {
      conv1: [16, 16, 16],
      conv2: [8, 8, 32],
      conv3: [8, 8, 48],
      conv4: [8, 8, 64],
      conv5: [8, 8, 64],
    };
    for (const layer of bb.layers) {
      const fm = await bb.run(img, 64, layer);
      expect([fm.h, fm.w, fm.d]).toEqual(expected[layer]);
      expect(fm.d).toBe(bb.channelsAt(layer));
      fm.data.forEach(v => expect(v).toBeGreaterThanOrEqual(0)); // relu output
    }
    expect(() => bb.channelsAt('conv9')).toThrow(/unknown layer/);
    bb.dispose();
  });

  it('keeps a constant image spatially near-uniform', async () => {
    // threshold pinned from a one-time measurement on this backbone: a
    // constant 128-gray frame measured 3.0e-3, textured frames ~1.2
    const bb = buildBackbone(1234);
    const flat = await bb.run(constantImage(64, 128 / 255), 64, DEFAULT_LAYER);
    expect(maxSpatialStd(flat)).toBeLessThan(0.01);
    const busy = await bb.run(texturedImage(64, 7), 64, DEFAULT_LAYER);
    expect(maxSpatialStd(busy)).toBeGreaterThan(0.5);
    bb.dispose();
  });
});
