//! Error-gated depth backprojection, multi-view voxel voting, and
//! uncertainty-guided anchor refinement.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::Result;
use crate::image::Image;
use crate::math::Vec3;
use crate::scene::{voxel_center, voxel_key, Anchor, AnchorInit, Origin};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Voxel size of level 0; level `l` uses `base_voxel / 4^l`.
    pub base_voxel: f64,
    pub levels: usize,
    /// Vote threshold at level 0; level `l` needs `theta0 · 4^l`.
    pub theta0: f64,
    pub min_views: usize,
    /// Pixels whose mean absolute error exceeds this become candidates.
    pub tau_err: f64,
    pub max_candidates_per_view: usize,
    /// Depths at or beyond this are treated as missing.
    pub max_depth: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            base_voxel: 0.125,
            levels: 3,
            theta0: 3.0,
            min_views: 2,
            tau_err: 0.08,
            max_candidates_per_view: 50_000,
            max_depth: 50.0,
        }
    }
}

impl DensifyConfig {
    pub fn voxel_size(&self, level: usize) -> f64 {
        voxel_size(self.base_voxel, level)
    }

    pub fn threshold(&self, level: usize) -> f64 {
        self.theta0 * 4f64.powi(level as i32)
    }
}

/// `ε^{(l)} = ε⁰ / 4^l`.
pub fn voxel_size(base: f64, level: usize) -> f64 {
    base / 4f64.powi(level as i32)
}

/// A backprojected under-reconstructed pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePoint {
    pub x: [f64; 3],
    pub view: u32,
    pub pixel: (u32, u32),
    pub err: f64,
}

impl CandidatePoint {
    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x[0], self.x[1], self.x[2])
    }
}

/// World point of pixel `(x, y)`'s centre at metric depth `d`.
pub fn backproject_pixel(cam: &Camera, x: usize, y: usize, d: f64) -> Option<Vec3> {
    cam.backproject(x as f64 + 0.5, y as f64 + 0.5, d)
}

/// One candidate per pixel with `err > tau_err` and a valid depth, capped to
/// the highest-error pixels. Output is in scanline order.
pub fn collect_candidates(errmap: &Image, depth: &Image, cam: &Camera, cfg: &DensifyConfig) -> Result<Vec<CandidatePoint>> {
    errmap.check_same_shape(depth)?;
    if errmap.width != cam.width as usize || errmap.height != cam.height as usize {
        return Err(crate::error::Error::Dimension(format!(
            "{}x{} maps for a {}x{} camera",
            errmap.width, errmap.height, cam.width, cam.height
        )));
    }
    let mut out = Vec::new();
    for y in 0..errmap.height {
        for x in 0..errmap.width {
            let err = errmap.get(x, y, 0);
            if !(err > cfg.tau_err) {
                continue;
            }
            let d = depth.get(x, y, 0);
            if !(d < cfg.max_depth) {
                continue;
            }
            if let Some(p) = backproject_pixel(cam, x, y, d) {
                out.push(CandidatePoint {
                    x: [p.x, p.y, p.z],
                    view: cam.id,
                    pixel: (x as u32, y as u32),
                    err,
                });
            }
        }
    }
    if out.len() > cfg.max_candidates_per_view {
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|&a, &b| out[b].err.total_cmp(&out[a].err).then(a.cmp(&b)));
        order.truncate(cfg.max_candidates_per_view);
        order.sort_unstable();
        out = order.into_iter().map(|i| out[i]).collect();
    }
    Ok(out)
}

type Key = [i64; 3];

/// Per-voxel vote tallies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VoxelVotes {
    pub count: usize,
    pub views: BTreeSet<u32>,
}

/// Multi-resolution vote grid; level `l` has voxel size `base_voxel / 4^l`.
#[derive(Clone, Debug)]
pub struct VoteGrid {
    pub base_voxel: f64,
    pub levels: Vec<BTreeMap<Key, VoxelVotes>>,
}

impl VoteGrid {
    pub fn new(base_voxel: f64, levels: usize) -> Self {
        VoteGrid {
            base_voxel,
            levels: vec![BTreeMap::new(); levels],
        }
    }

    pub fn voxel_size(&self, level: usize) -> f64 {
        voxel_size(self.base_voxel, level)
    }

    pub fn vote(&mut self, c: &CandidatePoint) {
        let p = c.position();
        for l in 0..self.levels.len() {
            let key = voxel_key(&p, self.voxel_size(l));
            let v = self.levels[l].entry(key).or_default();
            v.count += 1;
            v.views.insert(c.view);
        }
    }

    pub fn from_candidates(candidates: &[CandidatePoint], base_voxel: f64, levels: usize) -> Self {
        let mut sorted = candidates.to_vec();
        sorted.sort_by(|a, b| (a.view, a.pixel.1, a.pixel.0).cmp(&(b.view, b.pixel.1, b.pixel.0)));
        let mut grid = VoteGrid::new(base_voxel, levels);
        for c in &sorted {
            grid.vote(c);
        }
        grid
    }
}

/// Voxels (key, level) that pass every growth gate, finest level first.
pub fn grown_voxels(grid: &VoteGrid, cfg: &DensifyConfig, existing: &[Anchor]) -> Vec<(Key, usize)> {
    let levels = grid.levels.len();
    let occupied: Vec<HashSet<Key>> = (0..levels)
        .map(|l| {
            let eps = grid.voxel_size(l);
            existing.iter().map(|a| voxel_key(&a.position(), eps)).collect()
        })
        .collect();
    let mut suppressed: Vec<HashSet<Key>> = vec![HashSet::new(); levels];
    let mut grown = Vec::new();
    for l in (0..levels).rev() {
        for (key, votes) in &grid.levels[l] {
            if (votes.count as f64) < cfg.threshold(l)
                || votes.views.len() < cfg.min_views
                || occupied[l].contains(key)
                || suppressed[l].contains(key)
            {
                continue;
            }
            grown.push((*key, l));
            let center = voxel_center(*key, grid.voxel_size(l));
            for (coarse, set) in suppressed.iter_mut().enumerate().take(l) {
                set.insert(voxel_key(&center, grid.voxel_size(coarse)));
            }
        }
    }
    grown
}

/// Grows one anchor at the centre of every voxel that gathered enough votes
/// from enough distinct views and holds no anchor yet. New anchors copy the
/// supplementary feature mean of their nearest existing anchor.
pub fn vote_and_grow(
    candidates: &[CandidatePoint],
    cfg: &DensifyConfig,
    existing: &[Anchor],
    init: &AnchorInit,
    rng: &mut impl Rng,
) -> Vec<Anchor> {
    let grid = VoteGrid::from_candidates(candidates, cfg.base_voxel, cfg.levels);
    grown_voxels(&grid, cfg, existing)
        .into_iter()
        .map(|(key, l)| {
            let eps = cfg.voxel_size(l);
            let center = voxel_center(key, eps);
            let mut a = init.anchor(center, eps, l as u32, Origin::Densified, rng);
            if let Some(n) = nearest(existing, &center) {
                a.f_mu = existing[n].f_mu;
            }
            a
        })
        .collect()
}

fn nearest(anchors: &[Anchor], p: &Vec3) -> Option<usize> {
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| (i, (a.position() - p).norm_squared()))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// Two sample points placed symmetrically about `center` at distance in
/// `[child_eps, eps / 2)`.
pub fn sample_opposite_pair(center: &Vec3, eps: f64, rng: &mut impl Rng) -> (Vec3, Vec3) {
    let child = eps / 4.0;
    let dir = loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            break v / n;
        }
    };
    let r = rng.random_range(child..eps / 2.0);
    (center + dir * r, center - dir * r)
}

/// Splits every anchor with uncertainty above `u_threshold` into up to two
/// children on the next-finer lattice. Parents are kept; only the new anchors
/// are returned.
pub fn refine_uncertain_anchors(
    anchors: &[Anchor],
    uncertainties: &[f64],
    u_threshold: f64,
    base_voxel: f64,
    init: &AnchorInit,
    rng: &mut impl Rng,
) -> Vec<Anchor> {
    // a child is blocked only by an anchor of its own level in its voxel
    let mut occupied: HashSet<(Key, u32)> = anchors
        .iter()
        .map(|a| (voxel_key(&a.position(), voxel_size(base_voxel, a.level as usize)), a.level))
        .collect();
    let mut out = Vec::new();
    for (a, &u) in anchors.iter().zip(uncertainties) {
        if !(u > u_threshold) {
            continue;
        }
        let eps = voxel_size(base_voxel, a.level as usize);
        let child_eps = eps / 4.0;
        let center = voxel_center(voxel_key(&a.position(), eps), eps);
        let (p, q) = sample_opposite_pair(&center, eps, rng);
        for s in [p, q] {
            let key = voxel_key(&s, child_eps);
            if !occupied.insert((key, a.level + 1)) {
                continue;
            }
            let mut child = init.anchor(voxel_center(key, child_eps), child_eps, a.level + 1, Origin::Refined, rng);
            child.f_mu = a.f_mu;
            out.push(child);
        }
    }
    out
}

/// Joint-bilateral depth upsampling guided by a high-resolution image.
/// `sigma_spatial` is in low-resolution pixels; `sigma_range` in colour units.
pub fn upsample_depth_guided(lr_depth: &Image, hr_image: &Image, factor: usize, sigma_spatial: f64, sigma_range: f64) -> Result<Image> {
    if hr_image.width != lr_depth.width * factor || hr_image.height != lr_depth.height * factor || lr_depth.channels != 1 {
        return Err(crate::error::Error::Dimension(format!(
            "guide {}x{} is not {factor}x the {}x{} depth map",
            hr_image.width, hr_image.height, lr_depth.width, lr_depth.height
        )));
    }
    let guide_lr = hr_image.box_downsample(factor)?;
    let (w, h) = (hr_image.width, hr_image.height);
    let (lw, lh) = (lr_depth.width as isize, lr_depth.height as isize);
    let ch = hr_image.channels;
    let f = factor as f64;
    let radius = if sigma_spatial > 0.0 { (3.0 * sigma_spatial).ceil() as isize + 1 } else { 1 };
    let mut out = Image::new(w, h, 1);
    for y in 0..h {
        let cy = (y as f64 + 0.5) / f - 0.5;
        for x in 0..w {
            let cx = (x as f64 + 0.5) / f - 0.5;
            let (nx, ny) = (cx.round() as isize, cy.round() as isize);
            let nearest = lr_depth.get(nx.clamp(0, lw - 1) as usize, ny.clamp(0, lh - 1) as usize, 0);
            let mut num = 0.0;
            let mut den = 0.0;
            for qy in (ny - radius).max(0)..=(ny + radius).min(lh - 1) {
                for qx in (nx - radius).max(0)..=(nx + radius).min(lw - 1) {
                    let d2 = (qx as f64 - cx).powi(2) + (qy as f64 - cy).powi(2);
                    let ws = if sigma_spatial > 0.0 {
                        (-d2 / (2.0 * sigma_spatial * sigma_spatial)).exp()
                    } else if d2 == 0.0 {
                        1.0
                    } else {
                        0.0
                    };
                    if ws == 0.0 {
                        continue;
                    }
                    let mut c2 = 0.0;
                    for c in 0..ch {
                        c2 += (hr_image.get(x, y, c) - guide_lr.get(qx as usize, qy as usize, c)).powi(2);
                    }
                    let wr = if sigma_range.is_finite() {
                        (-c2 / (2.0 * sigma_range * sigma_range)).exp()
                    } else {
                        1.0
                    };
                    let wgt = ws * wr;
                    num += wgt * lr_depth.get(qx as usize, qy as usize, 0);
                    den += wgt;
                }
            }
            out.data[y * w + x] = if den > 0.0 && num.is_finite() { num / den } else { nearest };
        }
    }
    Ok(out)
}
