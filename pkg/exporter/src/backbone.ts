import * as tf from '@tensorflow/tfjs';

// The backbone is a fixed convolutional stack whose weights are generated
// deterministically from a seed, so exports are reproducible without
// shipping a weights file. It stands in for a pretrained network cut at a
// mid-level layer; swap in real weights by implementing Backbone around a
// loaded tf model if you have one.

export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

// Box-Muller, one value per call
function gaussian(rand: () => number): () => number {
  let spare: number | null = null;
  return () => {
    if (spare !== null) {
      const v = spare;
      spare = null;
      return v;
    }
    let u = 0;
    let v = 0;
    while (u === 0) u = rand();
    v = rand();
    const r = Math.sqrt(-2 * Math.log(u));
    spare = r * Math.sin(2 * Math.PI * v);
    return r * Math.cos(2 * Math.PI * v);
  };
}

interface ConvSpec {
  name: string;
  kernel: number;
  stride: number;
  outChannels: number;
  pool: boolean;
}

// conv4 is the default tap; conv5 exists so --layer has somewhere else to go
const STACK: ConvSpec[] = [
  { name: 'conv1', kernel: 7, stride: 2, outChannels: 16, pool: true },
  { name: 'conv2', kernel: 5, stride: 1, outChannels: 32, pool: true },
  { name: 'conv3', kernel: 3, stride: 1, outChannels: 48, pool: false },
  { name: 'conv4', kernel: 3, stride: 1, outChannels: 64, pool: false },
  { name: 'conv5', kernel: 3, stride: 1, outChannels: 64, pool: false },
];

export const DEFAULT_LAYER = 'conv4';

export interface Backbone {
  layers: string[];
  channelsAt(layer: string): number;
  run(rgb: Float32Array, size: number, layer: string): Promise<{ h: number; w: number; d: number; data: Float32Array }>;
  dispose(): void;
}

export function buildBackbone(seed: number): Backbone {
  const gauss = gaussian(mulberry32(seed));
  const kernels: tf.Tensor4D[] = [];
  const biases: tf.Tensor1D[] = [];
  let inChannels = 3;
  for (const spec of STACK) {
    const n = spec.kernel * spec.kernel * inChannels * spec.outChannels;
    const values = new Float32Array(n);
    const scale = Math.sqrt(2 / (spec.kernel * spec.kernel * inChannels)); // He init
    for (let i = 0; i < n; i++) {
      values[i] = gauss() * scale;
    }
    kernels.push(tf.tensor4d(values, [spec.kernel, spec.kernel, inChannels, spec.outChannels]));
    biases.push(tf.zeros([spec.outChannels]));
    inChannels = spec.outChannels;
  }

  const layers = STACK.map(s => s.name);

  return {
    layers,

    channelsAt(layer: string): number {
      const spec = STACK.find(s => s.name === layer);
      if (!spec) {
        throw new Error(`unknown layer '${layer}' (have: ${layers.join(', ')})`);
      }
      return spec.outChannels;
    },

    async run(rgb: Float32Array, size: number, layer: string) {
      const stop = layers.indexOf(layer);
      if (stop < 0) {
        throw new Error(`unknown layer '${layer}' (have: ${layers.join(', ')})`);
      }
      const out = tf.tidy(() => {
        // backbone preprocessing: [0,1] -> [-1,1]
        let x = tf.tensor3d(rgb, [size, size, 3]).mul(2).sub(1) as tf.Tensor3D;
        for (let i = 0; i <= stop; i++) {
          x = tf.relu(tf.conv2d(x, kernels[i], STACK[i].stride, 'same').add(biases[i])) as tf.Tensor3D;
          if (STACK[i].pool && i <= stop) {
            x = tf.maxPool(x, 2, 2, 'same');
          }
        }
        return x;
      });
      const [h, w, d] = out.shape;
      const data = (await out.data()) as Float32Array;
      out.dispose();
      return { h, w, d, data };
    },

    dispose() {
      kernels.forEach(k => k.dispose());
      biases.forEach(b => b.dispose());
    },
  };
}
