//! Anchors, neural Gaussians and the anchor → Gaussian expansion.

use std::collections::BTreeMap;

use nalgebra::Vector4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Z_NEAR};
use crate::decoder::{decoder_input, DecodeCache, DecoderSet};
use crate::error::{Error, Result};
use crate::field::FEATURE_DIM;
use crate::math::{quat_to_mat, Mat3, Vec3};

/// How an anchor came to exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Origin {
    Init = 0,
    Densified = 1,
    Refined = 2,
}

impl Origin {
    pub fn from_code(code: u32) -> Option<Origin> {
        match code {
            0 => Some(Origin::Init),
            1 => Some(Origin::Densified),
            2 => Some(Origin::Refined),
            _ => None,
        }
    }
}

/// A spatial primitive that spawns `k` neural Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub position: [f32; 3],
    pub level: u32,
    pub offset_scale: [f32; 3],
    pub offsets: Vec<[f32; 3]>,
    pub f_mu: [f32; FEATURE_DIM],
    /// Log standard deviation of the supplementary feature.
    pub f_sigma: [f32; FEATURE_DIM],
    /// Running mean of the largest spawned opacity since the last prune.
    pub opacity_accum: f32,
    pub accum_steps: u32,
    pub origin: Origin,
}

impl Anchor {
    pub fn position(&self) -> Vec3 {
        crate::math::vec3(self.position)
    }

    pub fn offset_scale(&self) -> Vec3 {
        crate::math::vec3(self.offset_scale)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.offset_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidInput("anchor offset scale must be positive".into()));
        }
        if self.f_sigma.iter().any(|s| !s.is_finite() || s.exp() <= 0.0) {
            return Err(Error::InvalidInput("anchor log-std must be finite".into()));
        }
        if self.offsets.len() != k {
            return Err(Error::InvalidInput(format!("anchor has {} offsets, expected {k}", self.offsets.len())));
        }
        Ok(())
    }

    /// Folds one observation of the anchor's largest opacity into the running mean.
    pub fn record_opacity(&mut self, max_opacity: f64) {
        self.accum_steps += 1;
        let n = self.accum_steps as f64;
        self.opacity_accum = (self.opacity_accum as f64 + (max_opacity - self.opacity_accum as f64) / n) as f32;
    }
}

/// A renderable Gaussian decoded from an anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuralGaussian {
    pub mean: Vec3,
    /// Unit quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub opacity: f64,
    pub color: [f64; 3],
    pub uncertainty: f64,
}

impl NeuralGaussian {
    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_mat(&Vector4::from(self.rotation))
    }

    pub fn covariance(&self) -> Mat3 {
        crate::math::covariance(&self.rotation_matrix(), &self.scale)
    }
}

/// Integer voxel coordinates of `x` at voxel size `eps` (floor convention).
pub fn voxel_key(x: &Vec3, eps: f64) -> [i64; 3] {
    [
        (x.x / eps).floor() as i64,
        (x.y / eps).floor() as i64,
        (x.z / eps).floor() as i64,
    ]
}

pub fn voxel_center(key: [i64; 3], eps: f64) -> Vec3 {
    Vec3::new(
        (key[0] as f64 + 0.5) * eps,
        (key[1] as f64 + 0.5) * eps,
        (key[2] as f64 + 0.5) * eps,
    )
}

/// Parameters for fresh anchors.
#[derive(Clone, Copy, Debug)]
pub struct AnchorInit {
    pub k: usize,
    /// Initial standard deviation of the supplementary feature.
    pub sigma_init: f64,
}

impl AnchorInit {
    /// A fresh anchor at the centre of voxel `key` with scale `eps`.
    pub fn anchor(&self, center: Vec3, eps: f64, level: u32, origin: Origin, rng: &mut impl Rng) -> Anchor {
        let offsets = (0..self.k)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.5f32..0.5)))
            .collect();
        Anchor {
            position: [center.x as f32, center.y as f32, center.z as f32],
            level,
            offset_scale: [eps as f32; 3],
            offsets,
            f_mu: [0.0; FEATURE_DIM],
            f_sigma: [self.sigma_init.ln() as f32; FEATURE_DIM],
            opacity_accum: 0.0,
            accum_steps: 0,
            origin,
        }
    }
}

/// One anchor per occupied voxel of size `voxel_size`, in key order.
pub fn init_anchors(points: &[Vec3], voxel_size: f64, init: &AnchorInit, rng: &mut impl Rng) -> Result<Vec<Anchor>> {
    if points.is_empty() {
        return Err(Error::NoInitPoints);
    }
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidInput("voxel size must be positive".into()));
    }
    let keys: BTreeMap<[i64; 3], ()> = points.iter().map(|p| (voxel_key(p, voxel_size), ())).collect();
    Ok(keys
        .into_keys()
        .map(|key| init.anchor(voxel_center(key, voxel_size), voxel_size, 0, Origin::Init, rng))
        .collect())
}

/// Removes anchors whose running-mean opacity fell below `threshold` and resets
/// the accumulators of the survivors. Anchors never observed since the last
/// prune are kept. Returns the keep mask.
pub fn prune_anchors(anchors: &mut Vec<Anchor>, opacity_threshold: f64) -> Vec<bool> {
    let keep: Vec<bool> = anchors
        .iter()
        .map(|a| a.accum_steps == 0 || a.opacity_accum as f64 >= opacity_threshold)
        .collect();
    let mut it = keep.iter();
    anchors.retain(|_| *it.next().unwrap());
    if anchors.is_empty() && !keep.is_empty() {
        log::warn!("pruning removed every anchor");
    }
    for a in anchors.iter_mut() {
        a.opacity_accum = 0.0;
        a.accum_steps = 0;
    }
    keep
}

/// What the backward pass needs from one anchor's expansion.
#[derive(Clone, Debug)]
pub struct SpawnCache {
    pub input: [f64; crate::decoder::DECODER_INPUT],
    pub decode: DecodeCache,
    pub scale_factors: Vec<[f64; 3]>,
    /// Camera sat on the anchor; the view direction fell back to +z.
    pub degenerate_view: bool,
}

/// Viewing distance and unit direction from the camera centre to `x`.
pub fn view_distance_direction(x: &Vec3, camera: &Camera) -> (f64, [f64; 3], bool) {
    let d = x - camera.center();
    let n = d.norm();
    if n == 0.0 {
        (0.0, [0.0, 0.0, 1.0], true)
    } else {
        (n, [d.x / n, d.y / n, d.z / n], false)
    }
}

/// True when the anchor lies in front of the camera.
pub fn anchor_visible(anchor: &Anchor, camera: &Camera) -> bool {
    camera.to_camera(&anchor.position()).z > Z_NEAR
}

/// Expands an anchor into `k` neural Gaussians for one view.
pub fn spawn_neural_gaussians(
    anchor: &Anchor,
    camera: &Camera,
    f_field: &[f64; FEATURE_DIM],
    f_supp: &[f64; FEATURE_DIM],
    decoders: &DecoderSet,
    distance_scale: f64,
) -> Result<(Vec<NeuralGaussian>, SpawnCache)> {
    let x = anchor.position();
    let s = anchor.offset_scale();
    let (dist, dir, degenerate_view) = view_distance_direction(&x, camera);
    let input = decoder_input(f_field, f_supp, dist * distance_scale, dir);
    let (decoded, decode) = decoders.decode(&input)?;
    let uncertainty = crate::losses::anchor_uncertainty(&anchor.f_sigma.map(|v| v as f64));
    let mut gaussians = Vec::with_capacity(decoders.k);
    let mut scale_factors = Vec::with_capacity(decoders.k);
    for (o, d) in anchor.offsets.iter().zip(&decoded) {
        let offset = crate::math::vec3(*o);
        gaussians.push(NeuralGaussian {
            mean: x + offset.component_mul(&s),
            rotation: d.rotation,
            scale: Vec3::from(d.scale_factor).component_mul(&s),
            opacity: d.opacity,
            color: d.color,
            uncertainty,
        });
        scale_factors.push(d.scale_factor);
    }
    Ok((
        gaussians,
        SpawnCache {
            input,
            decode,
            scale_factors,
            degenerate_view,
        },
    ))
}
