use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use splatsr::densify::{grown_voxels, vote_and_grow, CandidatePoint, DensifyConfig, VoteGrid};
use splatsr::math::Vec3;
use splatsr::scene::{Anchor, AnchorInit, Origin};

use crate::{check, Outcome};

type Voxel = ([i64; 3], usize);

fn key(p: &[f64; 3], eps: f64) -> [i64; 3] {
    [(p[0] / eps).floor() as i64, (p[1] / eps).floor() as i64, (p[2] / eps).floor() as i64]
}

/// Sort-and-scan grouping of every candidate at every level, then the vote,
/// view and occupancy gates, then finest-first suppression of any coarser
/// voxel that contains the centre of a grown finer one.
fn oracle(cands: &[CandidatePoint], cfg: &DensifyConfig, existing: &[Anchor]) -> BTreeSet<Voxel> {
    let mut passing: Vec<Vec<[i64; 3]>> = vec![Vec::new(); cfg.levels];
    for (l, out) in passing.iter_mut().enumerate() {
        let eps = cfg.base_voxel / 4f64.powi(l as i32);
        let mut tagged: Vec<([i64; 3], u32)> = cands.iter().map(|c| (key(&c.x, eps), c.view)).collect();
        tagged.sort();
        let occupied: BTreeSet<[i64; 3]> = existing.iter().map(|a| key(&a.position().into(), eps)).collect();
        let need = cfg.theta0 * 4f64.powi(l as i32);
        let mut i = 0;
        while i < tagged.len() {
            let mut j = i;
            let mut views = 0;
            while j < tagged.len() && tagged[j].0 == tagged[i].0 {
                if j == i || tagged[j].1 != tagged[j - 1].1 {
                    views += 1;
                }
                j += 1;
            }
            if (j - i) as f64 >= need && views >= cfg.min_views && !occupied.contains(&tagged[i].0) {
                out.push(tagged[i].0);
            }
            i = j;
        }
    }
    let mut grown = BTreeSet::new();
    let mut centres: Vec<[f64; 3]> = Vec::new();
    for l in (0..cfg.levels).rev() {
        let eps = cfg.base_voxel / 4f64.powi(l as i32);
        let mut here = Vec::new();
        for k in &passing[l] {
            if centres.iter().any(|c| key(c, eps) == *k) {
                continue;
            }
            grown.insert((*k, l));
            here.push([(k[0] as f64 + 0.5) * eps, (k[1] as f64 + 0.5) * eps, (k[2] as f64 + 0.5) * eps]);
        }
        centres.extend(here);
    }
    grown
}

/// Clusters of varying tightness seen from a varying number of views, so
/// that every gate and every level is exercised.
fn cloud(rng: &mut impl Rng) -> Vec<CandidatePoint> {
    let mut out = Vec::with_capacity(10_000);
    while out.len() < 10_000 {
        let centre = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let sigma = [0.002, 0.01, 0.05, 0.2][rng.random_range(0..4)];
        let n_views = rng.random_range(1..=4u32);
        let first_view = rng.random_range(0..8u32);
        let n = rng.random_range(20..400).min(10_000 - out.len());
        for i in 0..n {
            let d = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * sigma;
            let p = centre + d;
            out.push(CandidatePoint {
                x: [p.x, p.y, p.z],
                view: first_view + rng.random_range(0..n_views),
                pixel: ((i % 64) as u32, (i / 64) as u32),
                err: rng.random_range(0.1..1.0),
            });
        }
    }
    out
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DensifyConfig::default();
    let init = AnchorInit { k: 2, sigma_init: 1e-4 };
    let mut per_level = vec![0usize; cfg.levels];
    let mut blocked_views = 0usize;
    for _ in 0..10 {
        let cands = cloud(&mut rng);
        let existing: Vec<Anchor> = (0..60)
            .map(|_| {
                let c = &cands[rng.random_range(0..cands.len())];
                init.anchor(c.position(), cfg.base_voxel, 0, Origin::Init, &mut rng)
            })
            .collect();
        let want = oracle(&cands, &cfg, &existing);

        let grid = VoteGrid::from_candidates(&cands, cfg.base_voxel, cfg.levels);
        let got: BTreeSet<Voxel> = grown_voxels(&grid, &cfg, &existing).into_iter().collect();
        check(got == want, || {
            format!(
                "grown voxels differ: {} extra, {} missing",
                got.difference(&want).count(),
                want.difference(&got).count()
            )
        })?;

        let anchors = vote_and_grow(&cands, &cfg, &existing, &init, &mut rng);
        let grown: BTreeSet<Voxel> = anchors
            .iter()
            .map(|a| {
                let l = a.level as usize;
                (key(&a.position().into(), cfg.voxel_size(l)), l)
            })
            .collect();
        check(anchors.len() == want.len() && grown == want, || {
            format!("vote_and_grow made {} anchors, oracle {}", anchors.len(), want.len())
        })?;

        for (_, l) in &want {
            per_level[*l] += 1;
        }
        // voxels that would pass on votes alone but are held back by the view gate
        let single_view = DensifyConfig { min_views: 1, ..cfg };
        blocked_views += oracle(&cands, &single_view, &existing).difference(&want).count();
    }
    check(per_level.iter().all(|&n| n > 0), || format!("some level never grew: {per_level:?}"))?;
    check(blocked_views > 0, || "the multi-view gate never rejected a voxel".into())?;
    Ok(format!("10 clouds × 10⁴ points set-identical; grown per level {per_level:?}; {blocked_views} voxels held back by the view gate"))
}
