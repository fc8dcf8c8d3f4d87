//! Dense float images with interleaved channels.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Round every value through `f32`, the on-disk precision.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Averages non-overlapping `factor`×`factor` blocks.
    pub fn box_downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Dimension(format!(
                "{}x{} is not divisible by factor {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::new(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(x * factor + dx, y * factor + dy, c);
                        }
                    }
                    out.set(x, y, c, acc * norm);
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Image::box_downsample`]: spreads each low-resolution gradient
    /// uniformly over its block.
    pub fn box_downsample_backward(grad_lr: &Image, factor: usize) -> Image {
        let mut out = Image::new(grad_lr.width * factor, grad_lr.height * factor, grad_lr.channels);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..out.height {
            for x in 0..out.width {
                for c in 0..out.channels {
                    out.set(x, y, c, grad_lr.get(x / factor, y / factor, c) * norm);
                }
            }
        }
        out
    }

    /// Nearest-neighbour replication.
    pub fn replicate_upsample(&self, factor: usize) -> Image {
        let mut out = Image::new(self.width * factor, self.height * factor, self.channels);
        for y in 0..out.height {
            for x in 0..out.width {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(x / factor, y / factor, c));
                }
            }
        }
        out
    }

    /// Keys bicubic (a = −0.5) upsampling with pixel-centre alignment and
    /// clamped borders. Output is clamped to the input range.
    pub fn bicubic_upsample(&self, factor: usize) -> Image {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = Image::new(w, h, self.channels);
        let f = factor as f64;
        let taps = |pos: f64| -> (isize, [f64; 4]) {
            let base = pos.floor();
            let t = pos - base;
            (base as isize, [cubic(1.0 + t), cubic(t), cubic(1.0 - t), cubic(2.0 - t)])
        };
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        for y in 0..h {
            let (by, wy) = taps((y as f64 + 0.5) / f - 0.5);
            for x in 0..w {
                let (bx, wx) = taps((x as f64 + 0.5) / f - 0.5);
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for (j, wyj) in wy.iter().enumerate() {
                        let sy = (by - 1 + j as isize).clamp(0, self.height as isize - 1) as usize;
                        for (i, wxi) in wx.iter().enumerate() {
                            let sx = (bx - 1 + i as isize).clamp(0, self.width as isize - 1) as usize;
                            acc += wyj * wxi * self.get(sx, sy, c);
                        }
                    }
                    out.set(x, y, c, acc.clamp(lo, hi));
                }
            }
        }
        out
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let mut out = Image::new(self.width, self.height, 1);
        for i in 0..self.pixels() {
            out.data[i] = self.data[i * self.channels + c];
        }
        out
    }
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}
