//! Synthetic scenes with known ground truth, rendered by the same rasterizer.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::SceneDataset;
use crate::math::Vec3;
use crate::raster::{rasterize, RenderConfig};
use crate::scene::NeuralGaussian;

/// How the HR pseudo-labels are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoMode {
    /// Exact copy of the HR ground truth.
    Oracle,
    /// Bicubic upsampling of the LR image.
    Bicubic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSceneSpec {
    pub n_gaussians: usize,
    /// Radius of the ball holding the Gaussian centres.
    pub extent: f64,
    pub palette: Vec<[f64; 3]>,
    pub n_train_views: usize,
    pub n_test_views: usize,
    pub lr_width: u32,
    pub lr_height: u32,
    pub upscale_factor: u32,
    pub seed: u64,
    pub pseudo: PseudoMode,
    /// Gaussian scales are drawn log-uniformly from this range (× extent).
    pub scale_range: [f64; 2],
    pub opacity_range: [f64; 2],
    /// Initialization points sampled per ground-truth Gaussian.
    pub points_per_gaussian: usize,
    /// Fraction of Gaussians that contribute no initialization points.
    pub drop_fraction: f64,
    pub camera_distance: f64,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        SynthSceneSpec {
            n_gaussians: 50,
            extent: 1.0,
            palette: vec![
                [0.90, 0.25, 0.20],
                [0.20, 0.70, 0.30],
                [0.20, 0.35, 0.90],
                [0.95, 0.85, 0.20],
                [0.80, 0.80, 0.85],
                [0.60, 0.30, 0.75],
            ],
            n_train_views: 8,
            n_test_views: 4,
            lr_width: 64,
            lr_height: 64,
            upscale_factor: 4,
            seed: 0,
            pseudo: PseudoMode::Oracle,
            scale_range: [0.04, 0.16],
            opacity_range: [0.6, 0.95],
            points_per_gaussian: 4,
            drop_fraction: 0.0,
            camera_distance: 3.5,
            focal_factor: 1.07,
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.lr_width == 0 || self.lr_height == 0 {
            return bad("resolution must be positive");
        }
        if !matches!(self.upscale_factor, 2 | 4) {
            return bad("upscale factor must be 2 or 4");
        }
        if self.n_gaussians == 0 || self.n_train_views == 0 || self.palette.is_empty() {
            return bad("need at least one Gaussian, one training view and one colour");
        }
        if !(self.extent > 0.0) || !(self.camera_distance > self.extent) || !(self.focal_factor > 0.0) {
            return bad("cameras must sit outside the scene");
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return bad("bad scale range");
        }
        if !(0.0..=1.0).contains(&self.opacity_range[0]) || !(self.opacity_range[0] <= self.opacity_range[1] && self.opacity_range[1] <= 1.0) {
            return bad("bad opacity range");
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return bad("drop_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A generated scene: the dataset plus the Gaussians it was rendered from.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub dataset: SceneDataset,
    pub gaussians: Vec<NeuralGaussian>,
}

/// Rounds to a multiple of 2⁻¹² so that box-downsampling by 2 or 4 is exact
/// in `f32`.
fn quantize_fine(img: &mut Image) {
    for v in &mut img.data {
        *v = (v.clamp(0.0, 1.0) * 4096.0).round() / 4096.0;
    }
}

fn random_rotation(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    q.map(|v| v / n)
}

pub fn synth_gaussians(spec: &SynthSceneSpec, rng: &mut impl Rng) -> Vec<NeuralGaussian> {
    let [smin, smax] = spec.scale_range;
    (0..spec.n_gaussians)
        .map(|_| {
            // uniform in the ball
            let mean = loop {
                let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if p.norm() <= 1.0 {
                    break p * spec.extent * 0.8;
                }
            };
            let scale = Vec3::from_fn(|_, _| (rng.random_range(smin.ln()..=smax.ln())).exp() * spec.extent);
            let base = spec.palette[rng.random_range(0..spec.palette.len())];
            let color = base.map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
            NeuralGaussian {
                mean,
                rotation: random_rotation(rng),
                scale,
                opacity: rng.random_range(spec.opacity_range[0]..=spec.opacity_range[1]),
                color,
                uncertainty: 0.0,
            }
        })
        .collect()
}

/// Cameras on a ring around the origin, alternating elevations; test views
/// sit between training views.
pub fn synth_cameras(spec: &SynthSceneSpec) -> Vec<Camera> {
    let n = spec.n_train_views + spec.n_test_views;
    let focal = spec.focal_factor * spec.lr_width as f64;
    (0..n)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / n as f64;
            let el: f64 = if i % 2 == 0 { 0.25 } else { -0.15 };
            let r = spec.camera_distance * spec.extent;
            let eye = Vec3::new(r * el.cos() * az.cos(), r * el.sin(), r * el.cos() * az.sin());
            Camera::look_at(i as u32, spec.lr_width, spec.lr_height, focal, eye, Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0))
        })
        .collect()
}

/// Splits camera ids so test views interleave with training views.
fn split(spec: &SynthSceneSpec) -> (Vec<u32>, Vec<u32>) {
    let n = spec.n_train_views + spec.n_test_views;
    let mut test = Vec::new();
    if spec.n_test_views > 0 {
        let stride = n as f64 / spec.n_test_views as f64;
        for j in 0..spec.n_test_views {
            test.push(((j as f64 + 0.5) * stride).floor() as u32);
        }
    }
    let train = (0..n as u32).filter(|i| !test.contains(i)).collect();
    (train, test)
}

pub fn synth(spec: &SynthSceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gaussians = synth_gaussians(spec, &mut rng);
    let cameras = synth_cameras(spec);
    let (train, test) = split(spec);
    let f = spec.upscale_factor;
    let rcfg = RenderConfig::default();

    let mut ds = SceneDataset {
        cameras: cameras.clone(),
        upscale_factor: f,
        train,
        test,
        ..Default::default()
    };
    for cam in &cameras {
        let hr_cam = cam.scaled(f);
        let out = rasterize(&gaussians, &hr_cam, &rcfg);
        let mut hr = out.color.clone();
        quantize_fine(&mut hr);
        let mut lr = hr.box_downsample(f as usize)?;
        lr.quantize_f32();
        let mut depth = out.metric_depth();
        depth.quantize_f32();
        let pseudo = match spec.pseudo {
            PseudoMode::Oracle => hr.clone(),
            PseudoMode::Bicubic => {
                let mut p = lr.bicubic_upsample(f as usize);
                p.quantize_f32();
                p
            }
        };
        ds.lr_images.insert(cam.id, lr);
        ds.hr_gt.insert(cam.id, hr);
        ds.hr_pseudo.insert(cam.id, pseudo);
        ds.hr_depth.insert(cam.id, depth);
    }

    let n_drop = (spec.drop_fraction * spec.n_gaussians as f64).round() as usize;
    for g in gaussians.iter().skip(n_drop) {
        let l = g.rotation_matrix() * Vec3::from_fn(|i, _| g.scale[i]).map(|v| v.max(0.0));
        for _ in 0..spec.points_per_gaussian {
            let z = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            let p = g.mean + l.component_mul(&z);
            ds.points.push(p.map(|v| v as f32 as f64));
        }
    }
    Ok(SynthScene { dataset: ds, gaussians })
}

/// Generates the scene and writes it under `root`.
pub fn synth_to_disk(spec: &SynthSceneSpec, root: &Path) -> Result<SynthScene> {
    let scene = synth(spec)?;
    scene.dataset.save(root)?;
    crate::io::atomic_write(&root.join("spec.json"), &serde_json::to_vec_pretty(spec)?)?;
    Ok(scene)
}
