//! Multi-resolution hash-grid latent feature field over contracted space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Total width of the concatenated per-level features.
pub const FEATURE_DIM: usize = 16;

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size: usize,
    pub base_resolution: f32,
    pub per_level_scale: f32,
    /// Half-width of the uniform initialisation interval.
    pub init_range: f32,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            levels: 8,
            features_per_level: 2,
            table_size: 1 << 14,
            base_resolution: 16.0,
            per_level_scale: 1.45,
            init_range: 1e-4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels * self.features_per_level != FEATURE_DIM {
            return Err(Error::InvalidInput(format!(
                "levels x features_per_level must be {FEATURE_DIM}, got {}x{}",
                self.levels, self.features_per_level
            )));
        }
        if self.table_size == 0 || self.base_resolution < 1.0 || self.per_level_scale < 1.0 {
            return Err(Error::InvalidInput("degenerate feature field configuration".into()));
        }
        Ok(())
    }
}

/// Maps unbounded coordinates into the ball of radius 2.
pub fn contract(x: &Vec3) -> Vec3 {
    let n = x.norm();
    if n <= 1.0 {
        *x
    } else {
        (2.0 - 1.0 / n) * (x / n)
    }
}

/// Table slot and interpolation weight of one grid corner.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Corner {
    pub slot: usize,
    pub weight: f64,
}

/// Result of a field query, with what the backward pass needs.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub feature: [f64; FEATURE_DIM],
    /// `corners[level]` lists the 8 corners touched at that level.
    pub corners: Vec<[Corner; 8]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub config: FieldConfig,
    /// Level-major: `tables[(level * T + slot) * F + f]`.
    pub tables: Vec<f32>,
    pub frozen: bool,
}

impl FeatureField {
    pub fn new(config: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.levels * config.table_size * config.features_per_level;
        let r = config.init_range;
        let tables = (0..n).map(|_| rng.random_range(-r..=r)).collect();
        Ok(FeatureField {
            config,
            tables,
            frozen: false,
        })
    }

    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let n = config.levels * config.table_size * config.features_per_level;
        Ok(FeatureField {
            config,
            tables: vec![0.0; n],
            frozen: false,
        })
    }

    /// Grid resolution of `level` (0-based): `floor(N₁·b^level)`.
    pub fn resolution(&self, level: usize) -> usize {
        let c = &self.config;
        (c.base_resolution as f64 * (c.per_level_scale as f64).powi(level as i32)).floor() as usize
    }

    /// Coarse levels whose whole vertex grid fits in a table are indexed directly.
    pub fn is_direct(&self, level: usize) -> bool {
        let side = self.resolution(level) + 1;
        side.checked_pow(3).is_some_and(|n| n <= self.config.table_size)
    }

    /// Table slot of integer vertex `(i, j, k)` at `level`, relative to the level's table.
    pub fn slot(&self, level: usize, i: usize, j: usize, k: usize) -> usize {
        let t = self.config.table_size;
        if self.is_direct(level) {
            let side = self.resolution(level) + 1;
            i + side * (j + side * k)
        } else {
            let h = (i as u32).wrapping_mul(PRIMES[0])
                ^ (j as u32).wrapping_mul(PRIMES[1])
                ^ (k as u32).wrapping_mul(PRIMES[2]);
            h as usize % t
        }
    }

    /// Flat index into `tables` of feature `f` at a level-relative slot.
    #[inline]
    pub fn entry(&self, level: usize, slot: usize, f: usize) -> usize {
        (level * self.config.table_size + slot) * self.config.features_per_level + f
    }

    /// Position in `[0, 1]³` used for grid lookups.
    pub fn normalized(x: &Vec3) -> Vec3 {
        (contract(x) + Vec3::repeat(2.0)) / 4.0
    }

    pub fn query(&self, x: &Vec3) -> FieldSample {
        let u = Self::normalized(x);
        let fpl = self.config.features_per_level;
        let mut feature = [0.0; FEATURE_DIM];
        let mut corners = Vec::with_capacity(self.config.levels);
        for level in 0..self.config.levels {
            let n = self.resolution(level);
            let mut base = [0usize; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let pos = (u[a] * n as f64).clamp(0.0, n as f64);
                let cell = (pos.floor() as usize).min(n - 1);
                base[a] = cell;
                frac[a] = pos - cell as f64;
            }
            let mut level_corners = [Corner::default(); 8];
            for (c, corner) in level_corners.iter_mut().enumerate() {
                let bits = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                let mut w = 1.0;
                for a in 0..3 {
                    w *= if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                }
                let slot = self.slot(level, base[0] + bits[0], base[1] + bits[1], base[2] + bits[2]);
                *corner = Corner { slot, weight: w };
                for f in 0..fpl {
                    feature[level * fpl + f] += w * self.tables[self.entry(level, slot, f)] as f64;
                }
            }
            corners.push(level_corners);
        }
        FieldSample { feature, corners }
    }

    /// Adds `weight × upstream` into a dense gradient buffer shaped like `tables`.
    pub fn accumulate_backward(&self, sample: &FieldSample, upstream: &[f64; FEATURE_DIM], grad: &mut [f64]) {
        let fpl = self.config.features_per_level;
        for (level, corners) in sample.corners.iter().enumerate() {
            for corner in corners {
                for f in 0..fpl {
                    grad[self.entry(level, corner.slot, f)] += corner.weight * upstream[level * fpl + f];
                }
            }
        }
    }

    /// Sparse table gradient of `upstream · query(x)`, sorted by table index.
    /// Corners that hash to the same slot are merged.
    pub fn query_backward(&self, x: &Vec3, upstream: &[f64; FEATURE_DIM]) -> Vec<(usize, f64)> {
        let sample = self.query(x);
        let fpl = self.config.features_per_level;
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(8 * FEATURE_DIM);
        for (level, corners) in sample.corners.iter().enumerate() {
            for corner in corners {
                for f in 0..fpl {
                    out.push((self.entry(level, corner.slot, f), corner.weight * upstream[level * fpl + f]));
                }
            }
        }
        out.sort_by_key(|&(i, _)| i);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(out.len());
        for (i, g) in out {
            match merged.last_mut() {
                Some((j, acc)) if *j == i => *acc += g,
                _ => merged.push((i, g)),
            }
        }
        merged
    }

    /// FNV-1a over the bit patterns of every table entry.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.tables {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
