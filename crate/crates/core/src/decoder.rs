//! Per-attribute perceptrons decoding anchor features into neural-Gaussian
//! attributes, with hand-written backward passes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::FEATURE_DIM;
use crate::math::{sigmoid, softplus};

/// `f_field ‖ f_supp ‖ δ ‖ d̂`.
pub const DECODER_INPUT: usize = 2 * FEATURE_DIM + 4;

/// Two-layer perceptron with a rectified-linear hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// `hidden × input`, row-major.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// `output × hidden`, row-major.
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(m: &Mlp) -> Self {
        MlpGrads {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut uniform = |fan_in: usize, n: usize| -> Vec<f32> {
            let bound = 1.0 / (fan_in as f32).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        Mlp {
            input,
            hidden,
            output,
            w1: uniform(input, hidden * input),
            b1: uniform(input, hidden),
            w2: uniform(hidden, output * hidden),
            b2: uniform(hidden, output),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    pub fn forward(&self, x: &[f64]) -> MlpCache {
        debug_assert_eq!(x.len(), self.input);
        let mut pre = vec![0.0; self.hidden];
        for (h, p) in pre.iter_mut().enumerate() {
            let row = &self.w1[h * self.input..(h + 1) * self.input];
            *p = self.b1[h] as f64 + row.iter().zip(x).map(|(w, v)| *w as f64 * v).sum::<f64>();
        }
        let mut out = vec![0.0; self.output];
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            *y = self.b2[o] as f64 + row.iter().zip(&pre).map(|(w, p)| *w as f64 * p.max(0.0)).sum::<f64>();
        }
        MlpCache {
            input: x.to_vec(),
            pre,
            out,
        }
    }

    /// Accumulates parameter gradients and returns dL/dinput.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        let mut d_hidden = vec![0.0; self.hidden];
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b2[o] += g;
            for h in 0..self.hidden {
                grads.w2[o * self.hidden + h] += g * cache.pre[h].max(0.0);
                d_hidden[h] += g * self.w2[o * self.hidden + h] as f64;
            }
        }
        let mut d_input = vec![0.0; self.input];
        for h in 0..self.hidden {
            if cache.pre[h] <= 0.0 || d_hidden[h] == 0.0 {
                continue;
            }
            let g = d_hidden[h];
            grads.b1[h] += g;
            for i in 0..self.input {
                grads.w1[h * self.input + i] += g * cache.input[i];
                d_input[i] += g * self.w1[h * self.input + i] as f64;
            }
        }
        d_input
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Decoded attributes of one neural Gaussian, before anchor scaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedGaussian {
    pub opacity: f64,
    pub color: [f64; 3],
    /// Unit quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    /// `softplus(raw)`; the anchor's scale multiplies this componentwise.
    pub scale_factor: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct DecodeCache {
    pub alpha: MlpCache,
    pub color: MlpCache,
    pub rotation: MlpCache,
    pub scale: MlpCache,
}

/// Upstream gradients w.r.t. the decoded attributes of each Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecodedGrad {
    pub opacity: f64,
    pub color: [f64; 3],
    pub rotation: [f64; 4],
    pub scale_factor: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSet {
    pub k: usize,
    pub alpha: Mlp,
    pub color: Mlp,
    pub rotation: Mlp,
    pub scale: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGrads {
    pub alpha: MlpGrads,
    pub color: MlpGrads,
    pub rotation: MlpGrads,
    pub scale: MlpGrads,
}

impl DecoderGrads {
    pub fn zeros_like(d: &DecoderSet) -> Self {
        DecoderGrads {
            alpha: MlpGrads::zeros_like(&d.alpha),
            color: MlpGrads::zeros_like(&d.color),
            rotation: MlpGrads::zeros_like(&d.rotation),
            scale: MlpGrads::zeros_like(&d.scale),
        }
    }

    pub fn add(&mut self, other: &DecoderGrads) {
        self.alpha.add(&other.alpha);
        self.color.add(&other.color);
        self.rotation.add(&other.rotation);
        self.scale.add(&other.scale);
    }
}

/// Assembles the decoder input vector.
pub fn decoder_input(f_field: &[f64; FEATURE_DIM], f_supp: &[f64; FEATURE_DIM], distance: f64, dir: [f64; 3]) -> [f64; DECODER_INPUT] {
    let mut x = [0.0; DECODER_INPUT];
    x[..FEATURE_DIM].copy_from_slice(f_field);
    x[FEATURE_DIM..2 * FEATURE_DIM].copy_from_slice(f_supp);
    x[2 * FEATURE_DIM] = distance;
    x[2 * FEATURE_DIM + 1..].copy_from_slice(&dir);
    x
}

impl DecoderSet {
    pub fn new(k: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let alpha = Mlp::new(DECODER_INPUT, hidden, k, rng);
        let color = Mlp::new(DECODER_INPUT, hidden, 3 * k, rng);
        let mut rotation = Mlp::new(DECODER_INPUT, hidden, 4 * k, rng);
        // bias the rotation head toward the identity quaternion
        for i in 0..k {
            rotation.b2[4 * i] += 1.0;
        }
        let scale = Mlp::new(DECODER_INPUT, hidden, 3 * k, rng);
        DecoderSet {
            k,
            alpha,
            color,
            rotation,
            scale,
        }
    }

    pub fn zeros(k: usize, hidden: usize) -> Self {
        DecoderSet {
            k,
            alpha: Mlp::zeros(DECODER_INPUT, hidden, k),
            color: Mlp::zeros(DECODER_INPUT, hidden, 3 * k),
            rotation: Mlp::zeros(DECODER_INPUT, hidden, 4 * k),
            scale: Mlp::zeros(DECODER_INPUT, hidden, 3 * k),
        }
    }

    pub fn heads(&self) -> [&Mlp; 4] {
        [&self.alpha, &self.color, &self.rotation, &self.scale]
    }

    pub fn heads_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.alpha, &mut self.color, &mut self.rotation, &mut self.scale]
    }

    pub fn decode(&self, input: &[f64; DECODER_INPUT]) -> Result<(Vec<DecodedGaussian>, DecodeCache)> {
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDecoderInput);
        }
        let cache = DecodeCache {
            alpha: self.alpha.forward(input),
            color: self.color.forward(input),
            rotation: self.rotation.forward(input),
            scale: self.scale.forward(input),
        };
        let out = (0..self.k)
            .map(|i| {
                let c = &cache.color.out[3 * i..3 * i + 3];
                let s = &cache.scale.out[3 * i..3 * i + 3];
                DecodedGaussian {
                    opacity: sigmoid(cache.alpha.out[i]),
                    color: [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])],
                    rotation: normalize_quat(&cache.rotation.out[4 * i..4 * i + 4]),
                    scale_factor: [softplus(s[0]), softplus(s[1]), softplus(s[2])],
                }
            })
            .collect();
        Ok((out, cache))
    }

    /// Backpropagates attribute gradients into `grads`; returns dL/dinput.
    pub fn backward(&self, cache: &DecodeCache, upstream: &[DecodedGrad], grads: &mut DecoderGrads) -> [f64; DECODER_INPUT] {
        let k = self.k;
        let mut d_alpha = vec![0.0; k];
        let mut d_color = vec![0.0; 3 * k];
        let mut d_rot = vec![0.0; 4 * k];
        let mut d_scale = vec![0.0; 3 * k];
        for (i, g) in upstream.iter().enumerate() {
            let a = sigmoid(cache.alpha.out[i]);
            d_alpha[i] = g.opacity * a * (1.0 - a);
            for j in 0..3 {
                let c = sigmoid(cache.color.out[3 * i + j]);
                d_color[3 * i + j] = g.color[j] * c * (1.0 - c);
                d_scale[3 * i + j] = g.scale_factor[j] * sigmoid(cache.scale.out[3 * i + j]);
            }
            let dr = normalize_quat_backward(&cache.rotation.out[4 * i..4 * i + 4], &g.rotation);
            d_rot[4 * i..4 * i + 4].copy_from_slice(&dr);
        }
        let mut d_input = [0.0; DECODER_INPUT];
        for (mlp, cache, d, g) in [
            (&self.alpha, &cache.alpha, &d_alpha, &mut grads.alpha),
            (&self.color, &cache.color, &d_color, &mut grads.color),
            (&self.rotation, &cache.rotation, &d_rot, &mut grads.rotation),
            (&self.scale, &cache.scale, &d_scale, &mut grads.scale),
        ] {
            let di = mlp.backward(cache, d, g);
            for (a, b) in d_input.iter_mut().zip(&di) {
                *a += b;
            }
        }
        d_input
    }
}

const QUAT_EPS: f64 = 1e-12;

/// Normalizes a raw quaternion; a zero vector falls back to the identity.
pub fn normalize_quat(raw: &[f64]) -> [f64; 4] {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < QUAT_EPS {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n]
    }
}

fn normalize_quat_backward(raw: &[f64], d_q: &[f64; 4]) -> [f64; 4] {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < QUAT_EPS {
        return [0.0; 4];
    }
    let q: Vec<f64> = raw.iter().map(|v| v / n).collect();
    let dot: f64 = q.iter().zip(d_q).map(|(a, b)| a * b).sum();
    [
        (d_q[0] - q[0] * dot) / n,
        (d_q[1] - q[1] * dot) / n,
        (d_q[2] - q[2] * dot) / n,
        (d_q[3] - q[3] * dot) / n,
    ]
}
