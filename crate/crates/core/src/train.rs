//! Coarse-to-fine training: an LR-supervised coarse stage, then a fine stage
//! driven by HR pseudo-labels with voting densification and uncertainty
//! refinement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::densify::{collect_candidates, refine_uncertain_anchors, vote_and_grow, CandidatePoint, DensifyConfig};
use crate::error::{Error, Result};
use crate::field::FEATURE_DIM;
use crate::image::Image;
use crate::io::{Checkpoint, OptimizerState, SceneDataset, Stage};
use crate::losses::{
    draw_noise, l1_loss, lr_fidelity_loss, rec_loss, ssim_with_grad, total_loss, volume_reg, ExternalDistance, LossParts,
    LossWeights, PerceptualDistance, ProxyDistance,
};
use crate::metrics::psnr;
use crate::model::{Frame, Model, ModelConfig, ModelGrads};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::raster::{render_error_map, ImageGrads, RenderConfig};
use crate::scene::{prune_anchors, Anchor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub field: f64,
    pub f_mu: f64,
    pub f_sigma: f64,
    pub offsets: f64,
    pub offsets_final: f64,
    /// Applied in log space.
    pub offset_scale: f64,
    pub decoder: f64,
    pub decoder_final: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            field: 0.01,
            f_mu: 0.01,
            f_sigma: 0.01,
            offsets: 0.01,
            offsets_final: 1e-4,
            offset_scale: 0.01,
            decoder: 0.004,
            decoder_final: 2e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub coarse_iters: usize,
    /// Length of the densification phase of the fine stage.
    pub fine_iters: usize,
    pub growth_interval: usize,
    pub refine_phase_iters: usize,
    pub views_per_iter: usize,
    pub growth: bool,
    pub refine: bool,
    pub prune: bool,
    pub prune_threshold: f64,
    pub prune_window: usize,
    /// Fixed refinement threshold; `None` uses the 90th percentile.
    pub u_threshold: Option<f64>,
    /// Weight the reconstruction term by `1 − sigmoid(U)`.
    pub uncertainty_weighting: bool,
    pub detach_uncertainty_weight: bool,
    /// Use bicubic upsampling of the LR image when a pseudo-label is missing.
    pub pseudo_fallback: bool,
    /// Evaluate held-out PSNR every this many iterations (0: only at the end).
    pub eval_interval: usize,
    pub snapshot_interval: usize,
    /// External perceptual metric command (`program args…`); the built-in
    /// proxy is used when empty.
    pub perceptual_command: Vec<String>,
    pub loss: LossWeights,
    pub densify: DensifyConfig,
    pub render: RenderConfig,
    pub adam: AdamConfig,
    pub lr: LearningRates,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            coarse_iters: 3000,
            fine_iters: 1500,
            growth_interval: 100,
            refine_phase_iters: 1000,
            views_per_iter: 1,
            growth: true,
            refine: true,
            prune: true,
            prune_threshold: 0.005,
            prune_window: 100,
            u_threshold: None,
            uncertainty_weighting: true,
            detach_uncertainty_weight: true,
            pseudo_fallback: true,
            eval_interval: 0,
            snapshot_interval: 100,
            perceptual_command: Vec::new(),
            loss: LossWeights::default(),
            densify: DensifyConfig::default(),
            render: RenderConfig::default(),
            adam: AdamConfig::default(),
            lr: LearningRates::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.coarse_iters == 0 || self.fine_iters == 0 || self.refine_phase_iters == 0 {
            return bad("iteration counts must be positive");
        }
        if self.growth_interval == 0 || self.prune_window == 0 || self.snapshot_interval == 0 {
            return bad("intervals must be positive");
        }
        if self.views_per_iter == 0 {
            return bad("views_per_iter must be positive");
        }
        if !(self.densify.tau_err > 0.0 && self.densify.tau_err < 1.0) {
            return bad("tau_err must lie in (0, 1)");
        }
        self.loss.validate()?;
        self.model.validate()
    }

    fn metric(&self) -> Box<dyn PerceptualDistance> {
        match self.perceptual_command.split_first() {
            Some((program, args)) => Box::new(ExternalDistance {
                program: program.into(),
                args: args.to_vec(),
            }),
            None => Box::new(ProxyDistance),
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub l_rec: f64,
    pub ssim: f64,
    pub l_vol: f64,
    pub l_fid: f64,
    pub anchors: usize,
    pub psnr_eval: Option<f64>,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,loss,l_rec,ssim,l_vol,l_fid,anchors,psnr_eval\n");
    for r in rows {
        let p = r.psnr_eval.map(|v| format!("{v}")).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{},{},{},{}\n", r.iter, r.loss, r.l_rec, r.ssim, r.l_vol, r.l_fid, r.anchors, p));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TrainEvent {
    Growth { iter: usize, added: usize },
    Refine { iter: usize, added: usize },
    Prune { iter: usize, removed: usize },
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub events: Vec<TrainEvent>,
}

/// Mean PSNR / SSIM over a set of views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub views: usize,
}

/// Renders `ids` with the mean supplementary feature and compares against
/// `targets` (HR when `hr`, else LR cameras).
pub fn evaluate(model: &Model, ds: &SceneDataset, ids: &[u32], targets: &BTreeMap<u32, Image>, hr: bool, cfg: &RenderConfig) -> Result<EvalReport> {
    let mut ps = 0.0;
    let mut ss = 0.0;
    let mut n = 0;
    for id in ids {
        let Some(target) = targets.get(id) else { continue };
        let cam = if hr { ds.hr_camera(*id)? } else { ds.camera(*id)?.clone() };
        let frame = model.render(&cam, None, cfg)?;
        let mut img = frame.output.color;
        img.clamp01();
        ps += psnr(&img, target)?;
        ss += crate::losses::ssim(&img, target)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("no views with targets to evaluate".into()));
    }
    Ok(EvalReport {
        psnr: ps / n as f64,
        ssim: ss / n as f64,
        views: n,
    })
}

/// Distinct RNG streams so that, e.g., toggling densification does not
/// perturb view order or noise.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Cycles through the training views in reshuffled epochs.
struct ViewSampler {
    ids: Vec<u32>,
    queue: Vec<u32>,
    rng: ChaCha8Rng,
}

impl ViewSampler {
    fn new(ids: &[u32], rng: ChaCha8Rng) -> Self {
        ViewSampler {
            ids: ids.to_vec(),
            queue: Vec::new(),
            rng,
        }
    }

    fn take(&mut self, n: usize) -> Vec<u32> {
        let n = n.min(self.ids.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.queue.is_empty() {
                self.queue = self.ids.clone();
                self.queue.shuffle(&mut self.rng);
            }
            let v = self.queue.pop().unwrap();
            if !out.contains(&v) {
                out.push(v);
            }
        }
        out
    }
}

const GROUP_FIELD: &str = "field";
const GROUP_MU: &str = "f_mu";
const GROUP_SIGMA: &str = "f_sigma";
const GROUP_OFFSETS: &str = "offsets";
const GROUP_SCALE: &str = "offset_scale";
const GROUP_DECODER: &str = "decoder";

fn row_strides(k: usize) -> [(&'static str, usize); 4] {
    [(GROUP_MU, FEATURE_DIM), (GROUP_SIGMA, FEATURE_DIM), (GROUP_OFFSETS, 3 * k), (GROUP_SCALE, 3)]
}

fn group<'a>(opt: &'a mut OptimizerState, name: &str, len: usize) -> &'a mut AdamState {
    let g = opt.groups.entry(name.to_string()).or_insert_with(|| AdamState::new(len));
    if g.m.len() != len {
        *g = AdamState::new(len);
    }
    g
}

fn prune_rows(opt: &mut OptimizerState, keep: &[bool], k: usize) {
    for (name, stride) in row_strides(k) {
        if let Some(g) = opt.groups.get_mut(name) {
            if g.m.len() == keep.len() * stride {
                g.retain_rows(keep, stride);
            }
        }
    }
}

fn extend_rows(opt: &mut OptimizerState, rows: usize, k: usize) {
    for (name, stride) in row_strides(k) {
        if let Some(g) = opt.groups.get_mut(name) {
            g.extend_rows(rows, stride);
        }
    }
}

struct StepRates {
    field: f64,
    f_mu: f64,
    f_sigma: Option<f64>,
    offsets: f64,
    offset_scale: f64,
    decoder: f64,
}

fn step_rates(lr: &LearningRates, it: usize, total: usize, train_sigma: bool) -> StepRates {
    StepRates {
        field: lr.field,
        f_mu: lr.f_mu,
        f_sigma: train_sigma.then_some(lr.f_sigma),
        offsets: LrSchedule::decay(lr.offsets, lr.offsets_final, total).at(it),
        offset_scale: lr.offset_scale,
        decoder: LrSchedule::decay(lr.decoder, lr.decoder_final, total).at(it),
    }
}

fn flat_decoder(model: &Model) -> Vec<f32> {
    let mut v = Vec::new();
    for m in model.decoders.heads() {
        v.extend_from_slice(&m.w1);
        v.extend_from_slice(&m.b1);
        v.extend_from_slice(&m.w2);
        v.extend_from_slice(&m.b2);
    }
    v
}

fn unflat_decoder(model: &mut Model, v: &[f32]) {
    let mut pos = 0;
    for m in model.decoders.heads_mut() {
        for buf in [&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2] {
            let n = buf.len();
            buf.copy_from_slice(&v[pos..pos + n]);
            pos += n;
        }
    }
}

fn flat_decoder_grads(g: &ModelGrads) -> Vec<f64> {
    let d = &g.decoders;
    let mut v = Vec::new();
    for m in [&d.alpha, &d.color, &d.rotation, &d.scale] {
        v.extend_from_slice(&m.w1);
        v.extend_from_slice(&m.b1);
        v.extend_from_slice(&m.w2);
        v.extend_from_slice(&m.b2);
    }
    v
}

/// Applies one Adam step to every trainable group.
fn apply_step(model: &mut Model, grads: &ModelGrads, opt: &mut OptimizerState, rates: &StepRates, adam: &AdamConfig) {
    if !model.field.frozen {
        let n = model.field.tables.len();
        group(opt, GROUP_FIELD, n).step_f32(&mut model.field.tables, &grads.field, rates.field, adam);
    }
    let n = model.anchors.len();
    let k = model.config.k;

    let mut mu: Vec<f32> = model.anchors.iter().flat_map(|a| a.f_mu).collect();
    let g: Vec<f64> = grads.anchors.iter().flat_map(|a| a.f_mu).collect();
    group(opt, GROUP_MU, n * FEATURE_DIM).step_f32(&mut mu, &g, rates.f_mu, adam);
    for (a, c) in model.anchors.iter_mut().zip(mu.chunks_exact(FEATURE_DIM)) {
        a.f_mu.copy_from_slice(c);
    }

    if let Some(lr) = rates.f_sigma {
        let mut sg: Vec<f32> = model.anchors.iter().flat_map(|a| a.f_sigma).collect();
        let g: Vec<f64> = grads.anchors.iter().flat_map(|a| a.f_sigma).collect();
        group(opt, GROUP_SIGMA, n * FEATURE_DIM).step_f32(&mut sg, &g, lr, adam);
        for (a, c) in model.anchors.iter_mut().zip(sg.chunks_exact(FEATURE_DIM)) {
            a.f_sigma.copy_from_slice(c);
        }
    }

    let mut off: Vec<f32> = model.anchors.iter().flat_map(|a| a.offsets.iter().flatten().copied()).collect();
    let g: Vec<f64> = grads.anchors.iter().flat_map(|a| a.offsets.iter().flatten().copied()).collect();
    group(opt, GROUP_OFFSETS, n * 3 * k).step_f32(&mut off, &g, rates.offsets, adam);
    for (a, c) in model.anchors.iter_mut().zip(off.chunks_exact(3 * k)) {
        for (o, v) in a.offsets.iter_mut().zip(c.chunks_exact(3)) {
            *o = [v[0], v[1], v[2]];
        }
    }

    // log-space update of the anchor scale
    let s: Vec<f32> = model.anchors.iter().flat_map(|a| a.offset_scale).collect();
    let g: Vec<f64> = grads
        .anchors
        .iter()
        .zip(&model.anchors)
        .flat_map(|(ga, a)| (0..3).map(move |c| ga.offset_scale[c] * a.offset_scale[c] as f64))
        .collect();
    let mut new_s = s.clone();
    group(opt, GROUP_SCALE, n * 3).update(&g, rates.offset_scale, adam, |i, d| {
        new_s[i] = (s[i] as f64 * d.exp()) as f32;
    });
    for (a, c) in model.anchors.iter_mut().zip(new_s.chunks_exact(3)) {
        a.offset_scale.copy_from_slice(c);
    }

    let mut w = flat_decoder(model);
    let g = flat_decoder_grads(grads);
    group(opt, GROUP_DECODER, w.len()).step_f32(&mut w, &g, rates.decoder, adam);
    unflat_decoder(model, &w);
}

fn record_opacities(model: &mut Model, frame: &crate::model::Frame) {
    for (i, m) in frame.max_opacities(model.config.k) {
        model.anchors[i].record_opacity(m);
    }
}

fn prune(model: &mut Model, opt: &mut OptimizerState, cfg: &TrainConfig, iter: usize, events: &mut Vec<TrainEvent>) {
    let before = model.anchors.len();
    let keep = prune_anchors(&mut model.anchors, cfg.prune_threshold);
    let removed = before - model.anchors.len();
    if removed > 0 {
        prune_rows(opt, &keep, model.config.k);
        events.push(TrainEvent::Prune { iter, removed });
    }
}

fn append_anchors(model: &mut Model, opt: &mut OptimizerState, new: Vec<Anchor>) -> usize {
    let n = new.len();
    if n > 0 {
        model.anchors.extend(new);
        extend_rows(opt, n, model.config.k);
    }
    n
}

fn non_finite(parts: &LossParts, loss: f64) -> bool {
    !(loss.is_finite() && parts.rec.is_finite() && parts.ssim.is_finite() && parts.lr_fidelity.is_finite())
}

fn diverged(iteration: usize, reason: &str, last_good: &Checkpoint) -> Error {
    Error::Diverged {
        iteration,
        reason: reason.to_string(),
        last_good: Box::new(last_good.clone()),
    }
}

/// Loss terms of one rendered view with the gradients w.r.t. its colour and
/// uncertainty maps. The volume gradient is applied by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ViewLoss {
    pub parts: LossParts,
    pub grad_color: Image,
    pub grad_uncertainty: Option<Image>,
}

impl ViewLoss {
    fn scale(&mut self, s: f64) {
        let p = &mut self.parts;
        p.rec *= s;
        p.ssim *= s;
        p.volume *= s;
        p.lr_fidelity *= s;
        for v in &mut self.grad_color.data {
            *v *= s;
        }
        if let Some(u) = &mut self.grad_uncertainty {
            for v in &mut u.data {
                *v *= s;
            }
        }
    }
}

trait AddParts {
    fn add(&mut self, o: &LossParts);
}

impl AddParts for LossParts {
    fn add(&mut self, o: &LossParts) {
        self.rec += o.rec;
        self.ssim += o.ssim;
        self.volume += o.volume;
        self.lr_fidelity += o.lr_fidelity;
        self.uncertainty_prior += o.uncertainty_prior;
    }
}

/// Coarse objective for one view: `L1 + λ_SSIM(1 − SSIM) + λ_vol·L_vol`
/// against the LR image.
pub fn coarse_view_loss(frame: &Frame, lr_gt: &Image, cfg: &TrainConfig) -> Result<ViewLoss> {
    let out = &frame.output;
    let (l1, mut g) = l1_loss(&out.color, lr_gt)?;
    let (s, gs) = ssim_with_grad(&out.color, lr_gt, true)?;
    for (a, b) in g.data.iter_mut().zip(&gs.unwrap().data) {
        *a -= cfg.loss.ssim * b;
    }
    Ok(ViewLoss {
        parts: LossParts {
            rec: l1,
            ssim: s,
            volume: volume_reg(&frame.scales()),
            ..LossParts::default()
        },
        grad_color: g,
        grad_uncertainty: None,
    })
}

/// Fine objective for one view against its pseudo-label and LR image,
/// without the uncertainty prior (see [`uncertainty_prior`]).
pub fn fine_view_loss(
    frame: &Frame,
    pseudo: &Image,
    lr_gt: &Image,
    factor: usize,
    cfg: &TrainConfig,
    metric: &dyn PerceptualDistance,
) -> Result<ViewLoss> {
    let render = &frame.output.color;
    let (rec, mut g, g_u) = if cfg.uncertainty_weighting {
        let r = rec_loss(render, pseudo, &frame.output.uncertainty, cfg.detach_uncertainty_weight)?;
        (r.value, r.grad_render, r.grad_uncertainty)
    } else {
        let (v, g) = l1_loss(render, pseudo)?;
        (v, g, None)
    };
    let (s, gs) = ssim_with_grad(render, pseudo, true)?;
    let gs = gs.unwrap();
    let (fid, gf) = lr_fidelity_loss(render, lr_gt, factor, metric)?;
    for (i, a) in g.data.iter_mut().enumerate() {
        *a -= cfg.loss.ssim * gs.data[i];
        if let Some(gf) = &gf {
            *a += cfg.loss.lr_fidelity * gf.data[i];
        }
    }
    Ok(ViewLoss {
        parts: LossParts {
            rec,
            ssim: s,
            lr_fidelity: fid,
            volume: volume_reg(&frame.scales()),
            ..LossParts::default()
        },
        grad_color: g,
        grad_uncertainty: g_u,
    })
}

/// `mean(u²)` over anchors, with `u² = Σ exp(2σ)`; adds `weight ×` its
/// gradient into `grads` when given.
pub fn uncertainty_prior(model: &Model, weight: f64, grads: Option<&mut ModelGrads>) -> f64 {
    let n = model.anchors.len().max(1) as f64;
    let total: f64 = model.anchors.iter().flat_map(|a| a.f_sigma).map(|s| (2.0 * s as f64).exp()).sum();
    if let Some(g) = grads {
        for (a, ga) in model.anchors.iter().zip(g.anchors.iter_mut()) {
            for (s, d) in a.f_sigma.iter().zip(ga.f_sigma.iter_mut()) {
                *d += weight * 2.0 * (2.0 * *s as f64).exp() / n;
            }
        }
    }
    total / n
}

/// Fits field, anchors and decoders to the LR views.
pub fn train_coarse(ds: &SceneDataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::InvalidInput("no training views".into()));
    }
    for id in &ds.train {
        if !ds.lr_images.contains_key(id) {
            return Err(Error::InvalidInput(format!("missing low-resolution image for view {id}")));
        }
    }
    let mut init_rng = stream(cfg.seed, 0);
    let model = Model::new(cfg.model.clone(), &ds.points, &mut init_rng)?;
    train_coarse_from(model, ds, cfg)
}

/// Coarse stage starting from an explicit initial model.
pub fn train_coarse_from(mut model: Model, ds: &SceneDataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let mut views = ViewSampler::new(&ds.train, stream(cfg.seed, 1));
    let mut opt = OptimizerState::default();
    let mut log = Vec::new();
    let mut events = Vec::new();
    let total = cfg.coarse_iters;
    let snapshot = |model: &Model, opt: &OptimizerState, it: usize| Checkpoint {
        stage: Stage::Coarse,
        iteration: it,
        model: model.clone(),
        optimizer: opt.clone(),
    };
    let mut last_good = snapshot(&model, &opt, 0);

    for it in 1..=total {
        let ids = views.take(cfg.views_per_iter);
        let nv = ids.len() as f64;
        let mut grads = ModelGrads::zeros_like(&model);
        let mut parts = LossParts::default();
        let mut frames = Vec::with_capacity(ids.len());
        for id in &ids {
            let cam = ds.camera(*id)?;
            let frame = model.render(cam, None, &cfg.render)?;
            let mut vl = coarse_view_loss(&frame, &ds.lr_images[id], cfg)?;
            vl.scale(1.0 / nv);
            parts.add(&vl.parts);
            model.backward(
                &frame,
                &ImageGrads {
                    color: &vl.grad_color,
                    uncertainty: None,
                },
                cfg.loss.volume / nv,
                &cfg.render,
                &mut grads,
            )?;
            frames.push(frame);
        }
        let loss = total_loss(
            &parts,
            &LossWeights {
                lr_fidelity: 0.0,
                uncertainty_prior: 0.0,
                ..cfg.loss
            },
        );
        if non_finite(&parts, loss) {
            return Err(diverged(it, "non-finite loss", &last_good));
        }
        if !grads.is_finite() {
            return Err(diverged(it, "non-finite gradient", &last_good));
        }
        for f in &frames {
            record_opacities(&mut model, f);
        }
        apply_step(&mut model, &grads, &mut opt, &step_rates(&cfg.lr, it, total, false), &cfg.adam);

        if cfg.prune && it % cfg.prune_window == 0 {
            prune(&mut model, &mut opt, cfg, it, &mut events);
        }
        let mut psnr_eval = None;
        if (cfg.eval_interval > 0 && it % cfg.eval_interval == 0) || it == total {
            if !ds.test.is_empty() {
                psnr_eval = evaluate(&model, ds, &ds.test, &ds.lr_images, false, &cfg.render).ok().map(|r| r.psnr);
            }
        }
        log.push(LogRow {
            iter: it,
            loss,
            l_rec: parts.rec,
            ssim: parts.ssim,
            l_vol: parts.volume,
            l_fid: 0.0,
            anchors: model.anchors.len(),
            psnr_eval,
        });
        if it % cfg.snapshot_interval == 0 {
            last_good = snapshot(&model, &opt, it);
        }
    }
    Ok(TrainResult {
        checkpoint: snapshot(&model, &opt, total),
        log,
        events,
    })
}

/// 90th percentile (nearest-rank) of `values`.
pub fn percentile90(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::INFINITY;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((0.9 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// HR pseudo-labels for the training views, falling back to bicubic
/// upsampling of the LR images when allowed.
pub fn pseudo_labels(ds: &SceneDataset, fallback: bool) -> Result<BTreeMap<u32, Image>> {
    let f = ds.upscale_factor as usize;
    let mut out = BTreeMap::new();
    for id in &ds.train {
        let img = match ds.hr_pseudo.get(id) {
            Some(p) => p.clone(),
            None if fallback => ds
                .lr_images
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("missing low-resolution image for view {id}")))?
                .bicubic_upsample(f),
            None => return Err(Error::MissingPseudoLabels(*id)),
        };
        out.insert(*id, img);
    }
    Ok(out)
}

/// Fine stage: freezes the field and trains the rest against HR
/// pseudo-labels. Runs `fine_iters` iterations with growth every
/// `growth_interval`, then `refine_phase_iters` more with one refinement
/// round at the start.
pub fn train_fine(coarse: &Model, ds: &SceneDataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::InvalidInput("no training views".into()));
    }
    let pseudo = pseudo_labels(ds, cfg.pseudo_fallback)?;
    let factor = ds.upscale_factor as usize;
    let hr_cams: BTreeMap<u32, Camera> = ds.train.iter().map(|id| Ok((*id, ds.hr_camera(*id)?))).collect::<Result<_>>()?;
    for id in &ds.train {
        if !ds.lr_images.contains_key(id) {
            return Err(Error::InvalidInput(format!("missing low-resolution image for view {id}")));
        }
    }
    let metric = cfg.metric();

    let mut model = coarse.clone();
    model.field.frozen = true;
    let sigma0 = model.config.sigma_init.ln() as f32;
    for a in &mut model.anchors {
        a.f_sigma = [sigma0; FEATURE_DIM];
    }
    let init = model.config.anchor_init();

    let mut views = ViewSampler::new(&ds.train, stream(cfg.seed, 2));
    let mut noise_rng = stream(cfg.seed, 3);
    let mut grow_rng = stream(cfg.seed, 4);
    let mut refine_rng = stream(cfg.seed, 5);
    let mut opt = OptimizerState::default();
    let mut log = Vec::new();
    let mut events = Vec::new();
    let mut window: BTreeMap<u32, Vec<CandidatePoint>> = BTreeMap::new();
    let total = cfg.fine_iters + cfg.refine_phase_iters;
    let snapshot = |model: &Model, opt: &OptimizerState, it: usize| Checkpoint {
        stage: Stage::Fine,
        iteration: it,
        model: model.clone(),
        optimizer: opt.clone(),
    };
    let mut last_good = snapshot(&model, &opt, 0);

    for it in 1..=total {
        if it == cfg.fine_iters + 1 && cfg.refine {
            let u = model.uncertainties();
            let thr = cfg.u_threshold.unwrap_or_else(|| percentile90(&u));
            let children = refine_uncertain_anchors(&model.anchors, &u, thr, cfg.densify.base_voxel, &init, &mut refine_rng);
            let added = append_anchors(&mut model, &mut opt, children);
            events.push(TrainEvent::Refine { iter: it, added });
        }

        let ids = views.take(cfg.views_per_iter);
        let nv = ids.len() as f64;
        let noise: Vec<[f64; FEATURE_DIM]> = (0..model.anchors.len()).map(|_| draw_noise(&mut noise_rng)).collect();
        let mut grads = ModelGrads::zeros_like(&model);
        let mut parts = LossParts::default();
        let mut frames = Vec::with_capacity(ids.len());
        let collecting = cfg.growth && it <= cfg.fine_iters;
        for id in &ids {
            let cam = &hr_cams[id];
            let frame = model.render(cam, Some(&noise), &cfg.render)?;
            let mut vl = fine_view_loss(&frame, &pseudo[id], &ds.lr_images[id], factor, cfg, metric.as_ref())?;
            vl.scale(1.0 / nv);
            parts.add(&vl.parts);
            model.backward(
                &frame,
                &ImageGrads {
                    color: &vl.grad_color,
                    uncertainty: vl.grad_uncertainty.as_ref(),
                },
                cfg.loss.volume / nv,
                &cfg.render,
                &mut grads,
            )?;

            if collecting {
                let err = render_error_map(&frame.output.color, &pseudo[id])?;
                let depth = match ds.hr_depth.get(id) {
                    Some(d) => d.clone(),
                    None => frame.output.metric_depth(),
                };
                window.insert(*id, collect_candidates(&err, &depth, cam, &cfg.densify)?);
            }
            frames.push(frame);
        }
        parts.uncertainty_prior = uncertainty_prior(&model, cfg.loss.uncertainty_prior, Some(&mut grads));

        let loss = total_loss(&parts, &cfg.loss);
        if non_finite(&parts, loss) {
            return Err(diverged(it, "non-finite loss", &last_good));
        }
        if !grads.is_finite() {
            return Err(diverged(it, "non-finite gradient", &last_good));
        }
        for f in &frames {
            record_opacities(&mut model, f);
        }
        apply_step(&mut model, &grads, &mut opt, &step_rates(&cfg.lr, it, total, true), &cfg.adam);

        if it <= cfg.fine_iters {
            if it % cfg.growth_interval == 0 {
                if cfg.growth {
                    let cands: Vec<CandidatePoint> = std::mem::take(&mut window).into_values().flatten().collect();
                    let grown = vote_and_grow(&cands, &cfg.densify, &model.anchors, &init, &mut grow_rng);
                    let added = append_anchors(&mut model, &mut opt, grown);
                    events.push(TrainEvent::Growth { iter: it, added });
                }
                if cfg.prune {
                    prune(&mut model, &mut opt, cfg, it, &mut events);
                }
            }
        } else if cfg.prune && (it - cfg.fine_iters) % cfg.prune_window == 0 {
            prune(&mut model, &mut opt, cfg, it, &mut events);
        }

        let mut psnr_eval = None;
        if (cfg.eval_interval > 0 && it % cfg.eval_interval == 0) || it == total {
            if !ds.test.is_empty() && !ds.hr_gt.is_empty() {
                psnr_eval = evaluate(&model, ds, &ds.test, &ds.hr_gt, true, &cfg.render).ok().map(|r| r.psnr);
            }
        }
        log.push(LogRow {
            iter: it,
            loss,
            l_rec: parts.rec,
            ssim: parts.ssim,
            l_vol: parts.volume,
            l_fid: parts.lr_fidelity,
            anchors: model.anchors.len(),
            psnr_eval,
        });
        if it % cfg.snapshot_interval == 0 {
            last_good = snapshot(&model, &opt, it);
        }
    }
    Ok(TrainResult {
        checkpoint: snapshot(&model, &opt, total),
        log,
        events,
    })
}
