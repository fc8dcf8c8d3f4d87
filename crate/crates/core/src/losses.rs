//! Variational supplementary features, anchor uncertainty, and the training
//! objective with its gradients.

use std::path::PathBuf;
use std::process::Command;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FEATURE_DIM;
use crate::image::Image;
use crate::math::{sigmoid, Vec3};

/// Draws `ε ~ N(0, I)` for one anchor.
pub fn draw_noise(rng: &mut impl Rng) -> [f64; FEATURE_DIM] {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

/// Reparameterised sample `f_mu + ε ⊙ exp(f_sigma)`.
pub fn sample_supp_feature(f_mu: &[f64; FEATURE_DIM], f_sigma: &[f64; FEATURE_DIM], noise: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
    std::array::from_fn(|i| f_mu[i] + noise[i] * f_sigma[i].exp())
}

/// Pulls a gradient on the sample back to `(f_mu, f_sigma)`.
pub fn sample_supp_feature_backward(
    f_sigma: &[f64; FEATURE_DIM],
    noise: &[f64; FEATURE_DIM],
    upstream: &[f64; FEATURE_DIM],
) -> ([f64; FEATURE_DIM], [f64; FEATURE_DIM]) {
    (*upstream, std::array::from_fn(|i| upstream[i] * noise[i] * f_sigma[i].exp()))
}

/// `‖exp(f_sigma)‖₂`.
pub fn anchor_uncertainty(f_sigma: &[f64; FEATURE_DIM]) -> f64 {
    f_sigma.iter().map(|s| (2.0 * s).exp()).sum::<f64>().sqrt()
}

/// d‖exp(σ)‖/dσᵢ = exp(2σᵢ)/u.
pub fn anchor_uncertainty_backward(f_sigma: &[f64; FEATURE_DIM], upstream: f64) -> [f64; FEATURE_DIM] {
    let u = anchor_uncertainty(f_sigma);
    if u == 0.0 {
        return [0.0; FEATURE_DIM];
    }
    std::array::from_fn(|i| upstream * (2.0 * f_sigma[i]).exp() / u)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ssim: f64,
    pub volume: f64,
    pub lr_fidelity: f64,
    /// Weight of the `mean(u²)` prior on anchor uncertainty; 0 disables it.
    pub uncertainty_prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ssim: 0.2,
            volume: 0.01,
            lr_fidelity: 0.5,
            uncertainty_prior: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ssim, self.volume, self.lr_fidelity, self.uncertainty_prior]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::InvalidInput("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Uncertainty-weighted L1 and its gradients.
#[derive(Clone, Debug)]
pub struct RecLoss {
    pub value: f64,
    /// `1 − sigmoid(U)` per pixel.
    pub weight: Image,
    pub grad_render: Image,
    /// Gradient w.r.t. the uncertainty map; `None` when detached.
    pub grad_uncertainty: Option<Image>,
}

/// Mean over pixels and channels of `(1 − sigmoid(U))·|render − pseudo|`.
pub fn rec_loss(render: &Image, pseudo: &Image, uncertainty: &Image, detach_uncertainty_weight: bool) -> Result<RecLoss> {
    render.check_same_shape(pseudo)?;
    if uncertainty.width != render.width || uncertainty.height != render.height || uncertainty.channels != 1 {
        return Err(Error::Dimension("uncertainty map does not match the render".into()));
    }
    let ch = render.channels;
    let n = (render.pixels() * ch) as f64;
    let mut weight = Image::new(render.width, render.height, 1);
    let mut grad_render = Image::new(render.width, render.height, ch);
    let mut grad_u = Image::new(render.width, render.height, 1);
    let mut value = 0.0;
    for p in 0..render.pixels() {
        let s = sigmoid(uncertainty.data[p]);
        let w = 1.0 - s;
        weight.data[p] = w;
        let mut abs_sum = 0.0;
        for c in 0..ch {
            let e = render.data[p * ch + c] - pseudo.data[p * ch + c];
            abs_sum += e.abs();
            grad_render.data[p * ch + c] = w * sign(e) / n;
        }
        value += w * abs_sum;
        grad_u.data[p] = -s * (1.0 - s) * abs_sum / n;
    }
    Ok(RecLoss {
        value: value / n,
        weight,
        grad_render,
        grad_uncertainty: (!detach_uncertainty_weight).then_some(grad_u),
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Plain mean absolute error with its gradient.
pub fn l1_loss(render: &Image, target: &Image) -> Result<(f64, Image)> {
    render.check_same_shape(target)?;
    let ch = render.channels;
    let n = render.data.len() as f64;
    let mut grad = Image::new(render.width, render.height, ch);
    let mut value = 0.0;
    // per-pixel partial sums, in the same order as `rec_loss`
    for p in 0..render.pixels() {
        let mut abs_sum = 0.0;
        for c in 0..ch {
            let e = render.data[p * ch + c] - target.data[p * ch + c];
            abs_sum += e.abs();
            grad.data[p * ch + c] = sign(e) / n;
        }
        value += abs_sum;
    }
    Ok((value / n, grad))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable zero-padded "same" filtering of one plane. The kernel is
/// symmetric, so this operator is its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = x as isize + i as isize - half;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * plane[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = y as isize + i as isize - half;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5) averaged over channels, with
/// the gradient w.r.t. `a` when requested.
pub fn ssim_with_grad(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.check_same_shape(b)?;
    // the window is zero-padded, so images smaller than it are still fine
    if a.width == 0 || a.height == 0 {
        return Err(Error::Dimension("SSIM of an empty image".into()));
    }
    let (w, h, ch) = (a.width, a.height, a.channels);
    let n = w * h;
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, ch));
    for c in 0..ch {
        let pa: Vec<f64> = (0..n).map(|p| a.data[p * ch + c]).collect();
        let pb: Vec<f64> = (0..n).map(|p| b.data[p * ch + c]).collect();
        let mu_a = blur(&pa, w, h, &k);
        let mu_b = blur(&pb, w, h, &k);
        let aa = blur(&pa.iter().map(|v| v * v).collect::<Vec<_>>(), w, h, &k);
        let bb = blur(&pb.iter().map(|v| v * v).collect::<Vec<_>>(), w, h, &k);
        let ab = blur(&pa.iter().zip(&pb).map(|(x, y)| x * y).collect::<Vec<_>>(), w, h, &k);
        let mut d_mu = vec![0.0; n];
        let mut d_aa = vec![0.0; n];
        let mut d_ab = vec![0.0; n];
        let mut sum = 0.0;
        for p in 0..n {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let va = aa[p] - ma * ma;
            let vb = bb[p] - mb * mb;
            let cov = ab[p] - ma * mb;
            let n1 = 2.0 * ma * mb + SSIM_C1;
            let n2 = 2.0 * cov + SSIM_C2;
            let d1 = ma * ma + mb * mb + SSIM_C1;
            let d2 = va + vb + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            sum += s;
            if want_grad {
                d_mu[p] = s * (2.0 * mb / n1 - 2.0 * mb / n2 - 2.0 * ma / d1 + 2.0 * ma / d2);
                d_aa[p] = -s / d2;
                d_ab[p] = 2.0 * s / n2;
            }
        }
        total += sum / n as f64;
        if let Some(g) = grad.as_mut() {
            let g_mu = blur(&d_mu, w, h, &k);
            let g_aa = blur(&d_aa, w, h, &k);
            let g_ab = blur(&d_ab, w, h, &k);
            let norm = 1.0 / (n * ch) as f64;
            for p in 0..n {
                g.data[p * ch + c] = norm * (g_mu[p] + 2.0 * pa[p] * g_aa[p] + pb[p] * g_ab[p]);
            }
        }
    }
    Ok((total / ch as f64, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_with_grad(a, b, false)?.0)
}

/// Σ over Gaussians of the product of their scales.
pub fn volume_reg(scales: &[Vec3]) -> f64 {
    scales.iter().map(|s| s.x * s.y * s.z).sum()
}

/// ∂/∂sⱼ = ∏_{m≠j} s_m.
pub fn volume_reg_backward(scale: &Vec3) -> Vec3 {
    Vec3::new(scale.y * scale.z, scale.x * scale.z, scale.x * scale.y)
}

/// A distance between two images used as the perceptual stand-in.
pub trait PerceptualDistance {
    /// Distance and, when the metric is differentiable, its gradient w.r.t. `pred`.
    fn distance(&self, pred: &Image, reference: &Image) -> Result<(f64, Option<Image>)>;
}

/// `L1 + 0.5·(1 − SSIM)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProxyDistance;

impl PerceptualDistance for ProxyDistance {
    fn distance(&self, pred: &Image, reference: &Image) -> Result<(f64, Option<Image>)> {
        let (l1, mut g) = l1_loss(pred, reference)?;
        let (s, gs) = ssim_with_grad(pred, reference, true)?;
        for (a, b) in g.data.iter_mut().zip(&gs.unwrap().data) {
            *a -= 0.5 * b;
        }
        Ok((l1 + 0.5 * (1.0 - s), Some(g)))
    }
}

/// Spawns `program <pred> <ref>` and parses the first float on its stdout.
/// Gives no gradient.
#[derive(Clone, Debug)]
pub struct ExternalDistance {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl PerceptualDistance for ExternalDistance {
    fn distance(&self, pred: &Image, reference: &Image) -> Result<(f64, Option<Image>)> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let pa = dir.path().join("pred.png");
        let pb = dir.path().join("ref.png");
        crate::io::write_png(&pa, pred)?;
        crate::io::write_png(&pb, reference)?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&pa)
            .arg(&pb)
            .output()
            .map_err(|e| Error::External(format!("{}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::External(format!("{} exited with {}", self.program.display(), out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let value = text
            .split_whitespace()
            .find_map(|t| t.trim_matches(|c: char| !c.is_ascii_digit() && c != '.' && c != '-' && c != 'e').parse::<f64>().ok())
            .ok_or_else(|| Error::External(format!("no number in output of {}", self.program.display())))?;
        Ok((value, None))
    }
}

/// Box-downsamples the high-resolution render by `factor` and measures the
/// perceptual distance to the low-resolution ground truth. The returned
/// gradient is w.r.t. `hr_render`.
pub fn lr_fidelity_loss(
    hr_render: &Image,
    lr_gt: &Image,
    factor: usize,
    metric: &dyn PerceptualDistance,
) -> Result<(f64, Option<Image>)> {
    if hr_render.width != lr_gt.width * factor || hr_render.height != lr_gt.height * factor {
        return Err(Error::Dimension(format!(
            "{}x{} render is not {factor}x the {}x{} target",
            hr_render.width, hr_render.height, lr_gt.width, lr_gt.height
        )));
    }
    let down = hr_render.box_downsample(factor)?;
    let (value, grad) = metric.distance(&down, lr_gt)?;
    Ok((value, grad.map(|g| Image::box_downsample_backward(&g, factor))))
}

/// Scalar parts of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub rec: f64,
    pub ssim: f64,
    pub volume: f64,
    pub lr_fidelity: f64,
    /// `mean(u²)` over anchors.
    pub uncertainty_prior: f64,
}

/// `L_rec + λ_SSIM(1 − SSIM) + λ_vol·L_vol + λ_fid·L_fid + λ_u·mean(u²)`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    parts.rec
        + weights.ssim * (1.0 - parts.ssim)
        + weights.volume * parts.volume
        + weights.lr_fidelity * parts.lr_fidelity
        + weights.uncertainty_prior * parts.uncertainty_prior
}
