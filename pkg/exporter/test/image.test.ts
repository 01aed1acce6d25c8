import { describe, expect, it } from 'vitest';
import {
  centerCrop,
  decodeImage,
  DecodeError,
  prepareImage,
  resizeBilinear,
  toRgbFloat,
} from '../src/image';

// PNG fixtures were written by an unrelated encoder (PIL) and frozen here
// together with their pixel values.
const RGB_B64 =
  'iVBORw0KGgoAAAANSUhEUgAAAAQAAAACCAIAAADwyuo0AAAAFElEQVR4nGNk5hGVhgGWnJwcOAcAJ3cDVOSfovMAAAAASUVORK5CYII=';
const RGB_PIX = [3, 12, 21, 30, 39, 48, 57, 66, 75, 84, 93, 102,
  111, 120, 129, 138, 147, 156, 165, 174, 183, 192, 201, 210];
const GRAY_B64 =
  'iVBORw0KGgoAAAANSUhEUgAAAAMAAAADCAAAAABzQ+pjAAAAD0lEQVR4nGNklJFhCYFgAAc3AVvMVvOHAAAAAElFTkSuQmCC';
const GRAY_PIX = [1, 29, 57, 85, 113, 141, 169, 197, 225];
const RGBA_B64 =
  'iVBORw0KGgoAAAANSUhEUgAAAAIAAAACCAYAAABytg0kAAAAGklEQVR4nGP8xSX3n22fTSMjv80WBke5DScAO8kGe9mDjE0AAAAASUVORK5CYII=';
const RGBA_PIX = [250, 10, 30, 255, 0, 200, 90, 128, 15, 60, 180, 0, 80, 90, 100, 200];

function png(b64: string): Buffer {
  return Buffer.from(b64, 'base64');
}

describe('png decode', () => {
  it('decodes 8-bit rgb exactly', () => {
    const img = decodeImage(png(RGB_B64), 'rgb.png');
    expect([img.width, img.height, img.channels]).toEqual([4, 2, 3]);
    expect(Array.from(img.data)).toEqual(RGB_PIX);
  });

  it('decodes 8-bit gray exactly', () => {
    const img = decodeImage(png(GRAY_B64), 'gray.png');
    expect([img.width, img.height, img.channels]).toEqual([3, 3, 1]);
    expect(Array.from(img.data)).toEqual(GRAY_PIX);
  });

  it('decodes rgba exactly', () => {
    const img = decodeImage(png(RGBA_B64), 'rgba.png');
    expect([img.width, img.height, img.channels]).toEqual([2, 2, 4]);
    expect(Array.from(img.data)).toEqual(RGBA_PIX);
  });

  it('reports corrupt streams as DecodeError', () => {
    const broken = png(RGB_B64);
    broken[40] ^= 0xff; // scramble inside the IDAT payload
    expect(() => decodeImage(broken, 'x.png')).toThrow(DecodeError);
    expect(() => decodeImage(Buffer.from('garbage'), 'y.bin')).toThrow(/unsupported image format/);
  });
});

describe('pnm decode', () => {
  it('reads binary P6 with a comment in the header', () => {
    const header = Buffer.from('P6\n# shot on a potato\n2 2\n255\n', 'ascii');
    const pixels = Buffer.from([255, 0, 0, 0, 255, 0, 0, 0, 255, 9, 8, 7]);
    const img = decodeImage(Buffer.concat([header, pixels]), 'a.ppm');
    expect([img.width, img.height, img.channels]).toEqual([2, 2, 3]);
    expect(Array.from(img.data)).toEqual(Array.from(pixels));
  });

  it('reads binary P5 gray', () => {
    const buf = Buffer.concat([Buffer.from('P5 3 1 255\n', 'ascii'), Buffer.from([7, 128, 250])]);
    const img = decodeImage(buf, 'b.pgm');
    expect([img.width, img.height, img.channels]).toEqual([3, 1, 1]);
    expect(Array.from(img.data)).toEqual([7, 128, 250]);
  });

  it('rejects truncated payloads', () => {
    const buf = Buffer.concat([Buffer.from('P5 4 4 255\n', 'ascii'), Buffer.from([1, 2, 3])]);
    expect(() => decodeImage(buf, 'c.pgm')).toThrow(/truncated/);
  });
});

describe('float pipeline', () => {
  it('replicates gray and drops alpha', () => {
    const gray = toRgbFloat({ width: 2, height: 1, channels: 1, data: new Uint8Array([0, 255]) });
    expect(Array.from(gray.data)).toEqual([0, 0, 0, 1, 1, 1]);
    const rgba = toRgbFloat({ width: 1, height: 1, channels: 4, data: new Uint8Array([255, 0, 51, 9]) });
    expect(Array.from(rgba.data.map(v => Math.round(v * 255)))).toEqual([255, 0, 51]);
  });

  it('matches the bilinear oracle', () => {
    // expected values computed with an independent float implementation of
    // the same pixel-center convention and frozen
    const src = {
      width: 3,
      height: 2,
      data: new Float32Array([0.0, 0.1, 0.9, 0.5, 0.2, 0.8, 1.0, 0.3, 0.7,
        0.2, 0.4, 0.6, 0.7, 0.5, 0.5, 0.9, 0.6, 0.4]),
    };
    const expected = [0.0, 0.1, 0.9, 0.125, 0.125, 0.875, 0.375, 0.175, 0.825,
      0.625, 0.225, 0.775, 0.875, 0.275, 0.725, 1.0, 0.3, 0.7,
      0.05, 0.175, 0.825, 0.175, 0.2, 0.8, 0.425, 0.25, 0.75,
      0.65625, 0.3, 0.7, 0.86875, 0.35, 0.65, 0.975, 0.375, 0.625,
      0.15, 0.325, 0.675, 0.275, 0.35, 0.65, 0.525, 0.4, 0.6,
      0.71875, 0.45, 0.55, 0.85625, 0.5, 0.5, 0.925, 0.525, 0.475,
      0.2, 0.4, 0.6, 0.325, 0.425, 0.575, 0.575, 0.475, 0.525,
      0.75, 0.525, 0.475, 0.85, 0.575, 0.425, 0.9, 0.6, 0.4];
    const out = resizeBilinear(src, 6, 4);
    expect(out.width).toBe(6);
    expect(out.height).toBe(4);
    out.data.forEach((v, i) => expect(Math.abs(v - expected[i])).toBeLessThan(1e-6));
  });

  it('center-crops with floor offsets', () => {
    const src = {
      width: 4,
      height: 3,
      data: new Float32Array(Array.from({ length: 36 }, (_, i) => i)),
    };
    const out = centerCrop(src, 2);
    // x0 = 1, y0 = 0
    expect(Array.from(out.data)).toEqual([3, 4, 5, 6, 7, 8, 15, 16, 17, 18, 19, 20]);
    expect(() => centerCrop(out, 5)).toThrow(/cannot center-crop/);
  });

  it('prepares any aspect ratio to size x size x 3', () => {
    const header = Buffer.from('P5 10 4 255\n', 'ascii');
    const body = Buffer.from(Array.from({ length: 40 }, (_, i) => (i * 6) % 256));
    const out = prepareImage(Buffer.concat([header, body]), 'wide.pgm', 4);
    expect(out.length).toBe(4 * 4 * 3);
    out.forEach(v => {
      expect(v).toBeGreaterThanOrEqual(0);
      expect(v).toBeLessThanOrEqual(1);
    });
  });
});
