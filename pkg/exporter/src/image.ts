import * as zlib from 'zlib';

// Decoded 8-bit image, channels interleaved. channels is 1 (gray), 2
// (gray+alpha), 3 (rgb) or 4 (rgba).
export interface RawImage {
  width: number;
  height: number;
  channels: number;
  data: Uint8Array;
}

export class DecodeError extends Error {}

const PNG_SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

export function decodeImage(buf: Buffer, name: string): RawImage {
  if (buf.length >= 8 && buf.subarray(0, 8).equals(PNG_SIGNATURE)) {
    return decodePng(buf, name);
  }
  if (buf.length >= 2 && buf[0] === 0x50 && (buf[1] === 0x35 || buf[1] === 0x36)) {
    return decodePnm(buf, name);
  }
  throw new DecodeError(`${name}: unsupported image format (PNG, P5 and P6 PNM are supported)`);
}

// -- PNM (binary P5 gray / P6 rgb) --------------------------------------------

function decodePnm(buf: Buffer, name: string): RawImage {
  const channels = buf[1] === 0x36 ? 3 : 1;
  // header is ASCII tokens (magic, width, height, maxval) with # comments
  let pos = 2;
  const tokens: number[] = [];
  while (tokens.length < 3 && pos < buf.length) {
    const c = buf[pos];
    if (c === 0x23) { // '#'
      while (pos < buf.length && buf[pos] !== 0x0a) pos++;
      pos++;
    } else if (c === 0x20 || c === 0x09 || c === 0x0a || c === 0x0d) {
      pos++;
    } else {
      let start = pos;
      while (pos < buf.length && !/\s/.test(String.fromCharCode(buf[pos]))) pos++;
      tokens.push(parseInt(buf.subarray(start, pos).toString('ascii'), 10));
    }
  }
  const [width, height, maxval] = tokens;
  if (!width || !height || maxval !== 255) {
    throw new DecodeError(`${name}: bad PNM header (need maxval 255)`);
  }
  pos++; // single whitespace after maxval
  const n = width * height * channels;
  if (buf.length - pos < n) {
    throw new DecodeError(`${name}: PNM payload truncated`);
  }
  return { width, height, channels, data: new Uint8Array(buf.subarray(pos, pos + n)) };
}

// -- PNG (8-bit gray/rgb with optional alpha, non-interlaced) ------------------

function decodePng(buf: Buffer, name: string): RawImage {
  let pos = 8;
  let width = 0;
  let height = 0;
  let channels = 0;
  const idat: Buffer[] = [];
  while (pos + 8 <= buf.length) {
    const len = buf.readUInt32BE(pos);
    const type = buf.subarray(pos + 4, pos + 8).toString('ascii');
    const body = buf.subarray(pos + 8, pos + 8 + len);
    if (type === 'IHDR') {
      width = body.readUInt32BE(0);
      height = body.readUInt32BE(4);
      const bitDepth = body[8];
      const colorType = body[9];
      const interlace = body[12];
      if (bitDepth !== 8) {
        throw new DecodeError(`${name}: only 8-bit PNG is supported (got depth ${bitDepth})`);
      }
      if (interlace !== 0) {
        throw new DecodeError(`${name}: interlaced PNG is not supported`);
      }
      const byType: { [k: number]: number } = { 0: 1, 2: 3, 4: 2, 6: 4 };
      if (!(colorType in byType)) {
        throw new DecodeError(`${name}: unsupported PNG color type ${colorType}`);
      }
      channels = byType[colorType];
    } else if (type === 'IDAT') {
      idat.push(body);
    } else if (type === 'IEND') {
      break;
    }
    pos += 8 + len + 4; // chunk + crc
  }
  if (!width || !height || !channels || idat.length === 0) {
    throw new DecodeError(`${name}: malformed PNG`);
  }
  let raw: Buffer;
  try {
    raw = zlib.inflateSync(Buffer.concat(idat));
  } catch {
    throw new DecodeError(`${name}: PNG deflate stream is corrupt`);
  }
  const stride = width * channels;
  if (raw.length !== height * (stride + 1)) {
    throw new DecodeError(`${name}: PNG scanline data has wrong length`);
  }
  const out = new Uint8Array(height * stride);
  let prev = new Uint8Array(stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const line = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const cur = out.subarray(y * stride, (y + 1) * stride);
    unfilterLine(filter, line, cur, prev, channels, name);
    prev = cur;
  }
  return { width, height, channels, data: out };
}

function unfilterLine(
  filter: number,
  line: Uint8Array,
  cur: Uint8Array,
  prev: Uint8Array,
  bpp: number,
  name: string,
): void {
  const n = line.length;
  for (let i = 0; i < n; i++) {
    const x = line[i];
    const a = i >= bpp ? cur[i - bpp] : 0;
    const b = prev[i];
    const c = i >= bpp ? prev[i - bpp] : 0;
    let v: number;
    switch (filter) {
      case 0: v = x; break;
      case 1: v = x + a; break;
      case 2: v = x + b; break;
      case 3: v = x + ((a + b) >> 1); break;
      case 4: v = x + paeth(a, b, c); break;
      default:
        throw new DecodeError(`${name}: unknown PNG filter ${filter}`);
    }
    cur[i] = v & 0xff;
  }
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

// -- float pipeline ------------------------------------------------------------

// RGB floats in [0, 1], row-major. Gray replicates across channels; alpha is
// dropped (the backbone has no use for it).
export function toRgbFloat(img: RawImage): { width: number; height: number; data: Float32Array } {
  const { width, height, channels, data } = img;
  const out = new Float32Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    const base = i * channels;
    const r = data[base];
    const g = channels >= 3 ? data[base + 1] : r;
    const b = channels >= 3 ? data[base + 2] : r;
    out[i * 3] = r / 255;
    out[i * 3 + 1] = g / 255;
    out[i * 3 + 2] = b / 255;
  }
  return { width, height, data: out };
}

export function resizeBilinear(
  src: { width: number; height: number; data: Float32Array },
  outWidth: number,
  outHeight: number,
): { width: number; height: number; data: Float32Array } {
  const out = new Float32Array(outWidth * outHeight * 3);
  const sx = src.width / outWidth;
  const sy = src.height / outHeight;
  for (let y = 0; y < outHeight; y++) {
    // pixel centers, clamped to the source grid
    const fy = Math.min(Math.max((y + 0.5) * sy - 0.5, 0), src.height - 1);
    const y0 = Math.floor(fy);
    const y1 = Math.min(y0 + 1, src.height - 1);
    const wy = fy - y0;
    for (let x = 0; x < outWidth; x++) {
      const fx = Math.min(Math.max((x + 0.5) * sx - 0.5, 0), src.width - 1);
      const x0 = Math.floor(fx);
      const x1 = Math.min(x0 + 1, src.width - 1);
      const wx = fx - x0;
      for (let ch = 0; ch < 3; ch++) {
        const p00 = src.data[(y0 * src.width + x0) * 3 + ch];
        const p01 = src.data[(y0 * src.width + x1) * 3 + ch];
        const p10 = src.data[(y1 * src.width + x0) * 3 + ch];
        const p11 = src.data[(y1 * src.width + x1) * 3 + ch];
        const top = p00 + (p01 - p00) * wx;
        const bot = p10 + (p11 - p10) * wx;
        out[(y * outWidth + x) * 3 + ch] = top + (bot - top) * wy;
      }
    }
  }
  return { width: outWidth, height: outHeight, data: out };
}

export function centerCrop(
  src: { width: number; height: number; data: Float32Array },
  size: number,
): { width: number; height: number; data: Float32Array } {
  if (src.width < size || src.height < size) {
    throw new Error(`cannot center-crop ${src.width}x${src.height} to ${size}`);
  }
  const x0 = Math.floor((src.width - size) / 2);
  const y0 = Math.floor((src.height - size) / 2);
  const out = new Float32Array(size * size * 3);
  for (let y = 0; y < size; y++) {
    const srcOff = ((y + y0) * src.width + x0) * 3;
    out.set(src.data.subarray(srcOff, srcOff + size * 3), y * size * 3);
  }
  return { width: size, height: size, data: out };
}

// Decode, scale the short side to `size`, center-crop to size x size.
export function prepareImage(buf: Buffer, name: string, size: number): Float32Array {
  const rgb = toRgbFloat(decodeImage(buf, name));
  const scale = size / Math.min(rgb.width, rgb.height);
  const outW = Math.max(size, Math.round(rgb.width * scale));
  const outH = Math.max(size, Math.round(rgb.height * scale));
  return centerCrop(resizeBilinear(rgb, outW, outH), size).data;
}
