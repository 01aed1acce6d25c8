import * as fs from 'fs';

// FMAP1: 6-byte magic "FMAP1\0", then H, W, D as uint32 little-endian,
// then H*W*D float32 little-endian, row-major (h, then w, then channel).
export const FMAP_MAGIC = Buffer.from('FMAP1\0', 'latin1');
const HEADER_BYTES = 6 + 3 * 4;

export function encodeFmap(h: number, w: number, d: number, data: Float32Array): Buffer {
  if (data.length !== h * w * d) {
    throw new Error(`payload length ${data.length} does not match ${h}x${w}x${d}`);
  }
  for (let i = 0; i < data.length; i++) {
    if (!Number.isFinite(data[i])) {
      throw new Error(`non-finite value at flat index ${i}`);
    }
  }
  const buf = Buffer.alloc(HEADER_BYTES + 4 * data.length);
  FMAP_MAGIC.copy(buf, 0);
  buf.writeUInt32LE(h, 6);
  buf.writeUInt32LE(w, 10);
  buf.writeUInt32LE(d, 14);
  for (let i = 0; i < data.length; i++) {
    buf.writeFloatLE(data[i], HEADER_BYTES + 4 * i);
  }
  return buf;
}

export function writeFmap(path: string, h: number, w: number, d: number, data: Float32Array): void {
  fs.writeFileSync(path, encodeFmap(h, w, d, data));
}

export function readFmap(path: string): { h: number; w: number; d: number; data: Float32Array } {
  const buf = fs.readFileSync(path);
  if (buf.length < HEADER_BYTES || !buf.subarray(0, 6).equals(FMAP_MAGIC)) {
    throw new Error(`${path}: not an FMAP1 file`);
  }
  const h = buf.readUInt32LE(6);
  const w = buf.readUInt32LE(10);
  const d = buf.readUInt32LE(14);
  const n = h * w * d;
  if (buf.length !== HEADER_BYTES + 4 * n) {
    throw new Error(`${path}: payload is ${buf.length - HEADER_BYTES} bytes, expected ${4 * n}`);
  }
  const data = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    data[i] = buf.readFloatLE(HEADER_BYTES + 4 * i);
  }
  return { h, w, d, data };
}
