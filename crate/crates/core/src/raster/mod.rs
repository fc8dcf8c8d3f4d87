//! Tile-based CPU splatting of neural Gaussians: colour, softmax-scaled depth,
//! uncertainty and transmittance, with the matching backward pass.

mod project;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::Result;
use crate::image::Image;
use crate::scene::NeuralGaussian;

pub use project::{project_gaussian, project_gaussian_backward, GaussianGeomGrad, Splat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Softmax depth temperature.
    pub beta: f64,
    pub alpha_min: f64,
    pub t_min: f64,
    pub alpha_max: f64,
    pub background: [f64; 3],
    /// Depth reported for pixels without contributors (before the log).
    pub z_far: f64,
    /// Report `log` of the softmax-weighted depth; otherwise the metric value.
    pub depth_log_space: bool,
    /// Screen-space covariance dilation in pixels².
    pub dilation: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_size: 16,
            beta: 3.0,
            alpha_min: 1.0 / 255.0,
            t_min: 1e-4,
            alpha_max: 0.99,
            background: [0.0; 3],
            z_far: 100.0,
            depth_log_space: true,
            dilation: 0.3,
        }
    }
}

/// One composited Gaussian at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contributor {
    pub gaussian: u32,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
}

#[derive(Clone, Debug, Default)]
struct TileAux {
    /// Per pixel of the tile (row-major in the tile): range into `contributors`.
    ranges: Vec<(u32, u32)>,
    contributors: Vec<Contributor>,
}

/// Pre-inverted splat used in the inner loop.
#[derive(Clone, Copy, Debug)]
struct Prepared {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    bbox: [i64; 4],
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Image,
    /// Softmax-scaled depth, log-space unless `depth_log_space` is off.
    pub depth: Image,
    pub uncertainty: Image,
    pub final_t: Image,
    pub splats: Vec<Option<Splat>>,
    /// Splats dropped because the dilated covariance was not positive definite.
    pub culled: usize,
    depth_log_space: bool,
    tile_size: usize,
    tiles_x: usize,
    tiles: Vec<TileAux>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// The depth map in metric units.
    pub fn metric_depth(&self) -> Image {
        let mut d = self.depth.clone();
        if self.depth_log_space {
            for v in &mut d.data {
                *v = v.exp();
            }
        }
        d
    }

    /// Contributors of pixel `(x, y)`, front to back.
    pub fn contributors(&self, x: usize, y: usize) -> &[Contributor] {
        let ts = self.tile_size;
        let tile = &self.tiles[(y / ts) * self.tiles_x + x / ts];
        let (s, n) = tile.ranges[(y % ts) * ts + x % ts];
        &tile.contributors[s as usize..(s + n) as usize]
    }
}

/// Gradient w.r.t. the rasterizer inputs of one Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub color: [f64; 3],
    pub opacity: f64,
    pub uncertainty: f64,
    pub mean2d: Vector2<f64>,
    /// Gradient w.r.t. the entries of the dilated 2D covariance.
    pub cov2d: Matrix2<f64>,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
        self.opacity += o.opacity;
        self.uncertainty += o.uncertainty;
        self.mean2d += o.mean2d;
        self.cov2d += o.cov2d;
    }
}

fn prepare(splat: &Splat, opacity: f64, cfg: &RenderConfig) -> Option<Prepared> {
    let cov = splat.cov2d;
    let det = cov.determinant();
    if !(det > 0.0) || !(cov[(0, 0)] > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda = mid + (mid * mid - det).max(0.0).sqrt();
    // beyond this radius α̂·G < alpha_min
    let reach = 2.0 * (opacity / cfg.alpha_min).ln();
    if !(reach > 0.0) {
        return Some(Prepared {
            mean: splat.mean2d,
            conic,
            opacity,
            bbox: [0, -1, 0, -1],
        });
    }
    let r = (reach * lambda).sqrt();
    let m = splat.mean2d;
    Some(Prepared {
        mean: m,
        conic,
        opacity,
        bbox: [
            (m.x - r - 0.5).ceil() as i64,
            (m.x + r - 0.5).floor() as i64,
            (m.y - r - 0.5).ceil() as i64,
            (m.y + r - 0.5).floor() as i64,
        ],
    })
}

/// Evaluates `α̂·exp(−½ΔᵀΣ⁻¹Δ)` at pixel centre `(px, py)`; returns `(power, G)`.
#[inline]
fn falloff(p: &Prepared, px: f64, py: f64) -> (f64, f64, f64, f64) {
    let dx = px - p.mean.x;
    let dy = py - p.mean.y;
    let c = &p.conic;
    let power = -0.5 * (c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy);
    (dx, dy, power, power.exp())
}

struct Binned {
    prepared: Vec<Option<Prepared>>,
    tile_lists: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
}

fn bin(splats: &[Option<Splat>], gaussians: &[NeuralGaussian], width: usize, height: usize, cfg: &RenderConfig) -> (Binned, usize) {
    let ts = cfg.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut culled = 0;
    let prepared: Vec<Option<Prepared>> = splats
        .iter()
        .zip(gaussians)
        .map(|(s, g)| {
            s.as_ref().and_then(|s| {
                let p = prepare(s, g.opacity, cfg);
                if p.is_none() {
                    culled += 1;
                }
                p
            })
        })
        .collect();
    let mut order: Vec<u32> = (0..splats.len() as u32).filter(|&i| prepared[i as usize].is_some()).collect();
    order.sort_by(|&a, &b| {
        let da = splats[a as usize].unwrap().depth;
        let db = splats[b as usize].unwrap().depth;
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let b = prepared[i as usize].unwrap().bbox;
        let x0 = b[0].max(0);
        let x1 = b[1].min(width as i64 - 1);
        let y0 = b[2].max(0);
        let y1 = b[3].min(height as i64 - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in (y0 as usize / ts)..=(y1 as usize / ts) {
            for tx in (x0 as usize / ts)..=(x1 as usize / ts) {
                tile_lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    (
        Binned {
            prepared,
            tile_lists,
            tiles_x,
            tiles_y,
        },
        culled,
    )
}

struct TileForward {
    aux: TileAux,
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    uncertainty: Vec<f64>,
    final_t: Vec<f64>,
}

/// Renders projected Gaussians front to back.
pub fn rasterize(gaussians: &[NeuralGaussian], cam: &Camera, cfg: &RenderConfig) -> RenderOutput {
    let splats: Vec<Option<Splat>> = gaussians.iter().map(|g| project_gaussian(g, cam, cfg.dilation)).collect();
    rasterize_splats(gaussians, splats, cam.width as usize, cam.height as usize, cfg)
}

/// Rasterizes already-projected splats; `splats[i]` belongs to `gaussians[i]`.
pub fn rasterize_splats(
    gaussians: &[NeuralGaussian],
    splats: Vec<Option<Splat>>,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> RenderOutput {
    let ts = cfg.tile_size.max(1);
    let (binned, culled) = bin(&splats, gaussians, width, height, cfg);
    let tiles: Vec<TileForward> = (0..binned.tiles_x * binned.tiles_y)
        .into_par_iter()
        .map(|t| render_tile(t, &binned, gaussians, &splats, width, height, ts, cfg))
        .collect();

    let mut color = Image::new(width, height, 3);
    let mut depth = Image::new(width, height, 1);
    let mut uncertainty = Image::new(width, height, 1);
    let mut final_t = Image::new(width, height, 1);
    let mut aux = Vec::with_capacity(tiles.len());
    for (t, tile) in tiles.into_iter().enumerate() {
        let (tx, ty) = (t % binned.tiles_x, t / binned.tiles_x);
        for ly in 0..ts {
            for lx in 0..ts {
                let (x, y) = (tx * ts + lx, ty * ts + ly);
                if x >= width || y >= height {
                    continue;
                }
                let l = ly * ts + lx;
                for c in 0..3 {
                    color.set(x, y, c, tile.color[l][c]);
                }
                depth.data[y * width + x] = tile.depth[l];
                uncertainty.data[y * width + x] = tile.uncertainty[l];
                final_t.data[y * width + x] = tile.final_t[l];
            }
        }
        aux.push(tile.aux);
    }
    RenderOutput {
        color,
        depth,
        uncertainty,
        final_t,
        splats,
        culled,
        depth_log_space: cfg.depth_log_space,
        tile_size: ts,
        tiles_x: binned.tiles_x,
        tiles: aux,
    }
}

#[allow(clippy::too_many_arguments)]
fn render_tile(
    t: usize,
    binned: &Binned,
    gaussians: &[NeuralGaussian],
    splats: &[Option<Splat>],
    width: usize,
    height: usize,
    ts: usize,
    cfg: &RenderConfig,
) -> TileForward {
    let (tx, ty) = (t % binned.tiles_x, t / binned.tiles_x);
    let n = ts * ts;
    let mut out = TileForward {
        aux: TileAux {
            ranges: vec![(0, 0); n],
            contributors: Vec::new(),
        },
        color: vec![[0.0; 3]; n],
        depth: vec![0.0; n],
        uncertainty: vec![0.0; n],
        final_t: vec![1.0; n],
    };
    let list = &binned.tile_lists[t];
    for ly in 0..ts {
        for lx in 0..ts {
            let (x, y) = (tx * ts + lx, ty * ts + ly);
            let l = ly * ts + lx;
            if x >= width || y >= height {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let start = out.aux.contributors.len();
            let mut tr = 1.0;
            let mut rgb = [0.0; 3];
            let mut unc = 0.0;
            let mut contribs_w = 0usize;
            for &gi in list {
                let p = binned.prepared[gi as usize].as_ref().unwrap();
                let (_, _, power, g) = falloff(p, px, py);
                if power > 0.0 {
                    continue;
                }
                let alpha = (p.opacity * g).min(cfg.alpha_max);
                if alpha < cfg.alpha_min {
                    continue;
                }
                let next_t = tr * (1.0 - alpha);
                if next_t < cfg.t_min {
                    break;
                }
                let w = alpha * tr;
                let gs = &gaussians[gi as usize];
                for c in 0..3 {
                    rgb[c] += gs.color[c] * w;
                }
                unc += gs.uncertainty * w;
                out.aux.contributors.push(Contributor {
                    gaussian: gi,
                    alpha,
                    transmittance: tr,
                });
                contribs_w += 1;
                tr = next_t;
            }
            for c in 0..3 {
                rgb[c] += tr * cfg.background[c];
            }
            let cs = &out.aux.contributors[start..];
            let d = softmax_depth(cs, splats, cfg.beta);
            out.depth[l] = match d {
                Some(d) if cfg.depth_log_space => d.ln(),
                Some(d) => d,
                None if cfg.depth_log_space => cfg.z_far.ln(),
                None => cfg.z_far,
            };
            out.color[l] = rgb;
            out.uncertainty[l] = unc;
            out.final_t[l] = tr;
            out.aux.ranges[l] = (start as u32, contribs_w as u32);
        }
    }
    out
}

/// `Σ wᵢe^{βwᵢ}dᵢ / Σ wᵢe^{βwᵢ}` over a pixel's contributors.
fn softmax_depth(cs: &[Contributor], splats: &[Option<Splat>], beta: f64) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in cs {
        let w = c.alpha * c.transmittance;
        let s = w * (beta * w).exp();
        num += s * splats[c.gaussian as usize].unwrap().depth;
        den += s;
    }
    (den > 0.0).then(|| num / den)
}

/// Upstream gradients on the rendered maps.
pub struct ImageGrads<'a> {
    pub color: &'a Image,
    pub uncertainty: Option<&'a Image>,
}

/// Backward pass of [`rasterize`] w.r.t. each Gaussian's colour, opacity,
/// uncertainty and screen-space footprint.
pub fn rasterize_backward(
    out: &RenderOutput,
    gaussians: &[NeuralGaussian],
    grads: &ImageGrads<'_>,
    cfg: &RenderConfig,
) -> Result<Vec<SplatGrad>> {
    grads.color.check_same_shape(&out.color)?;
    if let Some(u) = grads.uncertainty {
        u.check_same_shape(&out.uncertainty)?;
    }
    let ts = out.tile_size;
    let (width, height) = (out.width(), out.height());
    let per_tile: Vec<Vec<(u32, SplatGrad)>> = out
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, tile)| {
            let (tx, ty) = (t % out.tiles_x, t / out.tiles_x);
            let mut local: Vec<(u32, SplatGrad)> = Vec::new();
            let mut slot: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
            for ly in 0..ts {
                for lx in 0..ts {
                    let (x, y) = (tx * ts + lx, ty * ts + ly);
                    if x >= width || y >= height {
                        continue;
                    }
                    let (s, n) = tile.ranges[ly * ts + lx];
                    let cs = &tile.contributors[s as usize..(s + n) as usize];
                    let g_rgb = [grads.color.get(x, y, 0), grads.color.get(x, y, 1), grads.color.get(x, y, 2)];
                    let g_u = grads.uncertainty.map_or(0.0, |u| u.data[y * width + x]);
                    if g_rgb == [0.0; 3] && g_u == 0.0 {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    // colour / uncertainty of everything behind, renormalised
                    let mut behind_rgb = cfg.background;
                    let mut behind_u = 0.0;
                    for c in cs.iter().rev() {
                        let gs = &gaussians[c.gaussian as usize];
                        let w = c.alpha * c.transmittance;
                        let mut sg = SplatGrad::default();
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            sg.color[ch] = g_rgb[ch] * w;
                            d_alpha += g_rgb[ch] * c.transmittance * (gs.color[ch] - behind_rgb[ch]);
                        }
                        sg.uncertainty = g_u * w;
                        d_alpha += g_u * c.transmittance * (gs.uncertainty - behind_u);

                        let splat = out.splats[c.gaussian as usize].unwrap();
                        let prep = prepare(&splat, gs.opacity, cfg).unwrap();
                        let (dx, dy, _, g) = falloff(&prep, px, py);
                        if gs.opacity * g < cfg.alpha_max {
                            sg.opacity = d_alpha * g;
                            let d_power = d_alpha * gs.opacity * g;
                            let cn = &prep.conic;
                            // Δ = pixel − mean
                            sg.mean2d = Vector2::new(
                                d_power * (cn[(0, 0)] * dx + cn[(0, 1)] * dy),
                                d_power * (cn[(0, 1)] * dx + cn[(1, 1)] * dy),
                            );
                            let d_conic = Matrix2::new(
                                -0.5 * d_power * dx * dx,
                                -0.5 * d_power * dx * dy,
                                -0.5 * d_power * dx * dy,
                                -0.5 * d_power * dy * dy,
                            );
                            sg.cov2d = -(cn * d_conic * cn);
                        }

                        for ch in 0..3 {
                            behind_rgb[ch] = c.alpha * gs.color[ch] + (1.0 - c.alpha) * behind_rgb[ch];
                        }
                        behind_u = c.alpha * gs.uncertainty + (1.0 - c.alpha) * behind_u;

                        let idx = *slot.entry(c.gaussian).or_insert_with(|| {
                            local.push((c.gaussian, SplatGrad::default()));
                            local.len() - 1
                        });
                        local[idx].1.add(&sg);
                    }
                }
            }
            local
        })
        .collect();
    let mut result = vec![SplatGrad::default(); gaussians.len()];
    for tile in per_tile {
        for (i, g) in tile {
            result[i as usize].add(&g);
        }
    }
    Ok(result)
}

/// Per-pixel mean absolute error over the colour channels.
pub fn render_error_map(render: &Image, pseudo: &Image) -> Result<Image> {
    render.check_same_shape(pseudo)?;
    let mut out = Image::new(render.width, render.height, 1);
    let ch = render.channels;
    for p in 0..render.pixels() {
        let mut acc = 0.0;
        for c in 0..ch {
            acc += (render.data[p * ch + c] - pseudo.data[p * ch + c]).abs();
        }
        out.data[p] = acc / ch as f64;
    }
    Ok(out)
}
