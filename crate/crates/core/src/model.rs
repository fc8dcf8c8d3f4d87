//! The full scene model and its forward/backward chain: field → supplementary
//! feature → decoders → neural Gaussians → rasterizer.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::decoder::{DecodedGrad, DecoderGrads, DecoderSet};
use crate::error::{Error, Result};
use crate::field::{FeatureField, FieldConfig, FieldSample, FEATURE_DIM};
use crate::losses::{anchor_uncertainty, anchor_uncertainty_backward, sample_supp_feature, sample_supp_feature_backward, volume_reg_backward};
use crate::math::Vec3;
use crate::raster::{project_gaussian_backward, rasterize, rasterize_backward, ImageGrads, RenderConfig, RenderOutput};
use crate::scene::{anchor_visible, init_anchors, spawn_neural_gaussians, Anchor, AnchorInit, NeuralGaussian, SpawnCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Neural Gaussians per anchor.
    pub k: usize,
    pub hidden: usize,
    pub sigma_init: f64,
    /// Multiplier on the viewing distance fed to the decoders.
    pub distance_scale: f64,
    /// Voxel size used to place the initial anchors (level 0).
    pub base_voxel: f64,
    pub field: FieldConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 5,
            hidden: 32,
            sigma_init: 1e-4,
            distance_scale: 1.0,
            base_voxel: 0.125,
            field: FieldConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.hidden == 0 {
            return Err(Error::InvalidInput("k and hidden must be positive".into()));
        }
        if !(self.sigma_init > 0.0) || !(self.base_voxel > 0.0) || !self.distance_scale.is_finite() {
            return Err(Error::InvalidInput("sigma_init and base_voxel must be positive".into()));
        }
        self.field.validate()
    }

    pub fn anchor_init(&self) -> AnchorInit {
        AnchorInit {
            k: self.k,
            sigma_init: self.sigma_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub field: FeatureField,
    pub anchors: Vec<Anchor>,
    pub decoders: DecoderSet,
}

/// Per-anchor state of one rendered view.
#[derive(Clone, Debug)]
pub struct AnchorFrame {
    pub anchor: usize,
    /// Index of the anchor's first Gaussian in [`Frame::gaussians`].
    pub first: usize,
    pub field: FieldSample,
    pub noise: Option<[f64; FEATURE_DIM]>,
    pub cache: SpawnCache,
}

/// Everything the backward pass needs from one rendered view.
#[derive(Clone, Debug)]
pub struct Frame {
    pub camera: Camera,
    pub output: RenderOutput,
    pub gaussians: Vec<NeuralGaussian>,
    pub anchors: Vec<AnchorFrame>,
}

impl Frame {
    /// Largest decoded opacity per visible anchor, as `(anchor, max)`.
    pub fn max_opacities(&self, k: usize) -> Vec<(usize, f64)> {
        self.anchors
            .iter()
            .map(|a| {
                let m = self.gaussians[a.first..a.first + k].iter().map(|g| g.opacity).fold(0.0, f64::max);
                (a.anchor, m)
            })
            .collect()
    }

    /// Scales of all spawned Gaussians (for the volume term).
    pub fn scales(&self) -> Vec<Vec3> {
        self.gaussians.iter().map(|g| g.scale).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorGrad {
    pub offsets: Vec<[f64; 3]>,
    pub offset_scale: [f64; 3],
    pub f_mu: [f64; FEATURE_DIM],
    pub f_sigma: [f64; FEATURE_DIM],
}

/// Gradients w.r.t. every trainable parameter of a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub field: Vec<f64>,
    pub anchors: Vec<AnchorGrad>,
    pub decoders: DecoderGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        let k = model.config.k;
        ModelGrads {
            field: vec![0.0; model.field.tables.len()],
            anchors: (0..model.anchors.len())
                .map(|_| AnchorGrad {
                    offsets: vec![[0.0; 3]; k],
                    ..AnchorGrad::default()
                })
                .collect(),
            decoders: DecoderGrads::zeros_like(&model.decoders),
        }
    }

    pub fn is_finite(&self) -> bool {
        let dec = &self.decoders;
        self.field.iter().all(|v| v.is_finite())
            && self.anchors.iter().all(|a| {
                a.f_mu.iter().chain(&a.f_sigma).chain(&a.offset_scale).all(|v| v.is_finite())
                    && a.offsets.iter().flatten().all(|v| v.is_finite())
            })
            && [&dec.alpha, &dec.color, &dec.rotation, &dec.scale]
                .iter()
                .all(|g| g.w1.iter().chain(&g.b1).chain(&g.w2).chain(&g.b2).all(|v| v.is_finite()))
    }
}

impl Model {
    /// Random field and decoders with anchors voxelized from `points`.
    pub fn new(config: ModelConfig, points: &[Vec3], rng: &mut impl Rng) -> Result<Model> {
        config.validate()?;
        let anchors = init_anchors(points, config.base_voxel, &config.anchor_init(), rng)?;
        let field = FeatureField::new(config.field.clone(), rng)?;
        let decoders = DecoderSet::new(config.k, config.hidden, rng);
        Ok(Model {
            config,
            field,
            anchors,
            decoders,
        })
    }

    /// Uncertainty `u` of every anchor.
    pub fn uncertainties(&self) -> Vec<f64> {
        self.anchors.iter().map(|a| anchor_uncertainty(&a.f_sigma.map(|v| v as f64))).collect()
    }

    /// Renders one view. With `noise = None` the supplementary feature is
    /// `f_mu` (the deterministic / evaluation path); otherwise `noise[i]`
    /// drives anchor `i`'s reparameterised sample.
    pub fn render(&self, camera: &Camera, noise: Option<&[[f64; FEATURE_DIM]]>, cfg: &RenderConfig) -> Result<Frame> {
        if let Some(n) = noise {
            if n.len() != self.anchors.len() {
                return Err(Error::Dimension(format!("{} noise vectors for {} anchors", n.len(), self.anchors.len())));
            }
        }
        let visible: Vec<usize> = (0..self.anchors.len()).filter(|&i| anchor_visible(&self.anchors[i], camera)).collect();
        let spawned: Vec<Result<(Vec<NeuralGaussian>, AnchorFrame)>> = visible
            .par_iter()
            .map(|&i| {
                let a = &self.anchors[i];
                let field = self.field.query(&a.position());
                let mu = a.f_mu.map(|v| v as f64);
                let eps = noise.map(|n| n[i]);
                let supp = match &eps {
                    Some(e) => sample_supp_feature(&mu, &a.f_sigma.map(|v| v as f64), e),
                    None => mu,
                };
                let (gs, cache) =
                    spawn_neural_gaussians(a, camera, &field.feature, &supp, &self.decoders, self.config.distance_scale)?;
                Ok((
                    gs,
                    AnchorFrame {
                        anchor: i,
                        first: 0,
                        field,
                        noise: eps,
                        cache,
                    },
                ))
            })
            .collect();
        let mut gaussians = Vec::with_capacity(visible.len() * self.config.k);
        let mut anchors = Vec::with_capacity(visible.len());
        for s in spawned {
            let (gs, mut af) = s?;
            af.first = gaussians.len();
            gaussians.extend(gs);
            anchors.push(af);
        }
        let output = rasterize(&gaussians, camera, cfg);
        Ok(Frame {
            camera: camera.clone(),
            output,
            gaussians,
            anchors,
        })
    }

    /// Accumulates into `out` the gradient of a loss whose derivatives w.r.t.
    /// the rendered maps are `image_grads`, plus `volume_weight` times the
    /// volume term over this frame's Gaussians.
    pub fn backward(
        &self,
        frame: &Frame,
        image_grads: &ImageGrads<'_>,
        volume_weight: f64,
        cfg: &RenderConfig,
        out: &mut ModelGrads,
    ) -> Result<()> {
        let splat_grads = rasterize_backward(&frame.output, &frame.gaussians, image_grads, cfg)?;
        let k = self.config.k;
        for af in &frame.anchors {
            let anchor = &self.anchors[af.anchor];
            let s = anchor.offset_scale();
            let grad = &mut out.anchors[af.anchor];
            let mut d_u = 0.0;
            let mut upstream = Vec::with_capacity(k);
            for j in 0..k {
                let gi = af.first + j;
                let g = &frame.gaussians[gi];
                let sg = &splat_grads[gi];
                let geom = if frame.output.splats[gi].is_some() {
                    project_gaussian_backward(g, &frame.camera, &sg.mean2d, &sg.cov2d)
                } else {
                    Default::default()
                };
                let d_scale = geom.scale + volume_weight * volume_reg_backward(&g.scale);
                let sf = af.cache.scale_factors[j];
                let offset = anchor.offsets[j];
                for c in 0..3 {
                    grad.offset_scale[c] += d_scale[c] * sf[c] + geom.mean[c] * offset[c] as f64;
                    grad.offsets[j][c] += geom.mean[c] * s[c];
                }
                d_u += sg.uncertainty;
                upstream.push(DecodedGrad {
                    opacity: sg.opacity,
                    color: sg.color,
                    rotation: geom.rotation.into(),
                    scale_factor: [d_scale.x * s.x, d_scale.y * s.y, d_scale.z * s.z],
                });
            }
            let d_in = self.decoders.backward(&af.cache.decode, &upstream, &mut out.decoders);
            let d_field: [f64; FEATURE_DIM] = std::array::from_fn(|i| d_in[i]);
            let d_supp: [f64; FEATURE_DIM] = std::array::from_fn(|i| d_in[FEATURE_DIM + i]);
            if !self.field.frozen {
                self.field.accumulate_backward(&af.field, &d_field, &mut out.field);
            }
            let sigma = anchor.f_sigma.map(|v| v as f64);
            let (d_mu, d_sigma) = match &af.noise {
                Some(e) => sample_supp_feature_backward(&sigma, e, &d_supp),
                None => (d_supp, [0.0; FEATURE_DIM]),
            };
            let d_sigma_u = anchor_uncertainty_backward(&sigma, d_u);
            for i in 0..FEATURE_DIM {
                grad.f_mu[i] += d_mu[i];
                grad.f_sigma[i] += d_sigma[i] + d_sigma_u[i];
            }
        }
        Ok(())
    }
}
