use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use splatsr::decoder::{decoder_input, DecodedGrad, DecoderGrads, DecoderSet, Mlp, MlpGrads, DECODER_INPUT};
use splatsr::field::{FeatureField, FieldConfig, FEATURE_DIM};
use splatsr::image::Image;
use splatsr::losses::{
    anchor_uncertainty, anchor_uncertainty_backward, draw_noise, lr_fidelity_loss, rec_loss, sample_supp_feature,
    sample_supp_feature_backward, ssim_with_grad, total_loss, volume_reg, volume_reg_backward, LossWeights, ProxyDistance,
};
use splatsr::math::Vec3;
use splatsr::model::{Model, ModelConfig, ModelGrads};
use splatsr::raster::{project_gaussian, project_gaussian_backward, rasterize_backward, rasterize_splats, ImageGrads, RenderConfig, Splat};
use splatsr::train::{coarse_view_loss, fine_view_loss, uncertainty_prior, TrainConfig};
use splatsr::{Camera, NeuralGaussian};

use crate::common::{random_camera, random_gaussians, rel_err, unit_quat};
use crate::{check, Outcome};

const H: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-2;
const MODULE_TOL: f64 = 1e-3;

/// Central difference of `f` in one `f32` slot of `obj`, using the step that
/// is actually representable.
fn central_diff_in<T>(obj: &mut T, slot: impl Fn(&mut T) -> &mut f32, f: impl Fn(&T) -> f64) -> f64 {
    let orig = *slot(obj);
    let plus = (orig as f64 + H) as f32;
    let minus = (orig as f64 - H) as f32;
    *slot(obj) = plus;
    let fp = f(obj);
    *slot(obj) = minus;
    let fm = f(obj);
    *slot(obj) = orig;
    (fp - fm) / (plus as f64 - minus as f64)
}

/// One scalar parameter of a [`Model`].
#[derive(Clone, Copy, Debug)]
enum Param {
    Table(usize),
    Mu(usize, usize),
    Sigma(usize, usize),
    Offset(usize, usize, usize),
    OffsetScale(usize, usize),
    /// (head, tensor, index) with tensor 0..4 = w1, b1, w2, b2.
    Decoder(usize, usize, usize),
}

fn mlp_tensor(m: &mut Mlp, t: usize) -> &mut Vec<f32> {
    match t {
        0 => &mut m.w1,
        1 => &mut m.b1,
        2 => &mut m.w2,
        _ => &mut m.b2,
    }
}

fn mlp_grad(g: &MlpGrads, t: usize) -> &Vec<f64> {
    match t {
        0 => &g.w1,
        1 => &g.b1,
        2 => &g.w2,
        _ => &g.b2,
    }
}

fn head_grads(g: &DecoderGrads, h: usize) -> &MlpGrads {
    [&g.alpha, &g.color, &g.rotation, &g.scale][h]
}

fn param_mut(m: &mut Model, p: Param) -> &mut f32 {
    match p {
        Param::Table(i) => &mut m.field.tables[i],
        Param::Mu(a, i) => &mut m.anchors[a].f_mu[i],
        Param::Sigma(a, i) => &mut m.anchors[a].f_sigma[i],
        Param::Offset(a, j, c) => &mut m.anchors[a].offsets[j][c],
        Param::OffsetScale(a, c) => &mut m.anchors[a].offset_scale[c],
        Param::Decoder(h, t, i) => &mut mlp_tensor(m.decoders.heads_mut()[h], t)[i],
    }
}

fn grad_of(g: &ModelGrads, p: Param) -> f64 {
    match p {
        Param::Table(i) => g.field[i],
        Param::Mu(a, i) => g.anchors[a].f_mu[i],
        Param::Sigma(a, i) => g.anchors[a].f_sigma[i],
        Param::Offset(a, j, c) => g.anchors[a].offsets[j][c],
        Param::OffsetScale(a, c) => g.anchors[a].offset_scale[c],
        Param::Decoder(h, t, i) => mlp_grad(head_grads(&g.decoders, h), t)[i],
    }
}

struct GradScene {
    model: Model,
    camera: Camera,
    noise: Vec<[f64; FEATURE_DIM]>,
    pseudo: Image,
    lr: Image,
    cfg: TrainConfig,
}

fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> Image {
    Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Four anchors, two Gaussians each, filling a 16×16 view with wide,
/// semi-transparent splats so no pixel sits near the α cut-off.
fn grad_scene() -> GradScene {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = ModelConfig {
        k: 2,
        field: FieldConfig {
            init_range: 0.5,
            ..FieldConfig::default()
        },
        ..ModelConfig::default()
    };
    let points = [
        Vec3::new(0.2, 0.2, 0.0),
        Vec3::new(-0.2, 0.2, 0.1),
        Vec3::new(0.2, -0.2, -0.1),
        Vec3::new(-0.2, -0.2, 0.0),
    ];
    let mut model = Model::new(config, &points, &mut rng).unwrap();
    assert_eq!(model.anchors.len(), 4);
    for a in &mut model.anchors {
        a.offset_scale = std::array::from_fn(|_| rng.random_range(0.6..0.9));
        for o in &mut a.offsets {
            *o = std::array::from_fn(|_| rng.random_range(-0.4..0.4));
        }
        a.f_mu = std::array::from_fn(|_| rng.sample::<f32, _>(StandardNormal) * 0.5);
        a.f_sigma = std::array::from_fn(|_| rng.random_range(0.05f32..0.5).ln());
    }
    let camera = Camera::look_at(0, 16, 16, 16.0, Vec3::new(0.3, -0.2, 2.5), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0));
    let noise = (0..4).map(|_| draw_noise(&mut rng)).collect();
    let mut cfg = TrainConfig::default();
    cfg.loss.uncertainty_prior = 0.1;
    // let the weight map carry gradient so the uncertainty path is checked too
    cfg.detach_uncertainty_weight = false;
    GradScene {
        model,
        camera,
        noise,
        pseudo: random_image(16, 16, &mut rng),
        lr: random_image(8, 8, &mut rng),
        cfg,
    }
}

/// The fine-stage objective of the trainer for one view with fixed noise and
/// the field left trainable; accumulates its gradient when `grads` is given.
fn fine_objective(s: &GradScene, model: &Model, grads: Option<&mut ModelGrads>) -> f64 {
    let frame = model.render(&s.camera, Some(&s.noise), &s.cfg.render).unwrap();
    let vl = fine_view_loss(&frame, &s.pseudo, &s.lr, 2, &s.cfg, &ProxyDistance).unwrap();
    let mut parts = vl.parts;
    let w = s.cfg.loss.uncertainty_prior;
    parts.uncertainty_prior = match grads {
        Some(g) => {
            let ig = ImageGrads {
                color: &vl.grad_color,
                uncertainty: vl.grad_uncertainty.as_ref(),
            };
            model.backward(&frame, &ig, s.cfg.loss.volume, &s.cfg.render, g).unwrap();
            uncertainty_prior(model, w, Some(g))
        }
        None => uncertainty_prior(model, w, None),
    };
    total_loss(&parts, &s.cfg.loss)
}

/// The coarse-stage objective against a 16×16 target.
fn coarse_objective(s: &GradScene, model: &Model, grads: Option<&mut ModelGrads>) -> f64 {
    let frame = model.render(&s.camera, None, &s.cfg.render).unwrap();
    let vl = coarse_view_loss(&frame, &s.pseudo, &s.cfg).unwrap();
    if let Some(g) = grads {
        let ig = ImageGrads {
            color: &vl.grad_color,
            uncertainty: None,
        };
        model.backward(&frame, &ig, s.cfg.loss.volume, &s.cfg.render, g).unwrap();
    }
    let w = LossWeights {
        lr_fidelity: 0.0,
        uncertainty_prior: 0.0,
        ..s.cfg.loss
    };
    total_loss(&vl.parts, &w)
}

fn groups(model: &Model, grads: &ModelGrads, rng: &mut impl Rng, with_sigma: bool) -> Vec<(&'static str, Vec<Param>)> {
    let mut tables: Vec<Param> = grads.field.iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(i, _)| Param::Table(i)).collect();
    // a few untouched entries must come out as zero on both sides
    for _ in 0..16 {
        tables.push(Param::Table(rng.random_range(0..model.field.tables.len())));
    }
    let n = model.anchors.len();
    let k = model.config.k;
    let mu = (0..n).flat_map(|a| (0..FEATURE_DIM).map(move |i| Param::Mu(a, i))).collect();
    let sigma = (0..n).flat_map(|a| (0..FEATURE_DIM).map(move |i| Param::Sigma(a, i))).collect();
    let offsets = (0..n)
        .flat_map(|a| (0..k).flat_map(move |j| (0..3).map(move |c| Param::Offset(a, j, c))))
        .collect();
    let oscale = (0..n).flat_map(|a| (0..3).map(move |c| Param::OffsetScale(a, c))).collect();
    let mut dec = Vec::new();
    for (h, m) in model.decoders.heads().iter().enumerate() {
        for (t, len) in [m.w1.len(), m.b1.len(), m.w2.len(), m.b2.len()].into_iter().enumerate() {
            dec.extend((0..len).map(|i| Param::Decoder(h, t, i)));
        }
    }
    let mut out = vec![("tables", tables), ("f_mu", mu)];
    if with_sigma {
        out.push(("f_sigma", sigma));
    }
    out.extend([("offsets", offsets), ("offset_scale", oscale), ("decoders", dec)]);
    out
}

/// Relative error of each parameter group between the analytic gradient and
/// central differences of `objective`.
fn check_end_to_end(
    label: &str,
    s: &GradScene,
    objective: fn(&GradScene, &Model, Option<&mut ModelGrads>) -> f64,
    with_sigma: bool,
) -> Result<String, String> {
    let mut grads = ModelGrads::zeros_like(&s.model);
    objective(s, &s.model, Some(&mut grads));
    check(grads.is_finite(), || format!("{label}: non-finite gradient"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut model = s.model.clone();
    let mut report = Vec::new();
    for (name, params) in groups(&s.model, &grads, &mut rng, with_sigma) {
        let mut ana = Vec::with_capacity(params.len());
        let mut num = Vec::with_capacity(params.len());
        for p in params {
            ana.push(grad_of(&grads, p));
            num.push(central_diff_in(&mut model, |m| param_mut(m, p), |m| objective(s, m, None)));
        }
        let e = rel_err(&ana, &num, 1e-12);
        let norm = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        check(norm > 0.0, || format!("{label}/{name}: gradient is identically zero"))?;
        check(e <= END_TO_END_TOL, || format!("{label}/{name}: relative error {e:.2e} over {} params", ana.len()))?;
        report.push(format!("{name} {e:.1e}"));
    }
    Ok(format!("{label}[{}]", report.join(", ")))
}

fn module_field(rng: &mut impl Rng) -> f64 {
    let mut field = FeatureField::new(FieldConfig::default(), rng).unwrap();
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for _ in 0..5 {
        let x = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let up: [f64; FEATURE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
        for (i, g) in field.query_backward(&x, &up) {
            ana.push(g);
            num.push(central_diff_in(
                &mut field,
                |f| &mut f.tables[i],
                |f| f.query(&x).feature.iter().zip(&up).map(|(a, b)| a * b).sum(),
            ));
        }
    }
    rel_err(&ana, &num, 1e-12)
}

fn decoded_objective(dec: &DecoderSet, input: &[f64; DECODER_INPUT], up: &[DecodedGrad]) -> f64 {
    let (gs, _) = dec.decode(input).unwrap();
    gs.iter()
        .zip(up)
        .map(|(g, u)| {
            g.opacity * u.opacity
                + (0..3).map(|c| g.color[c] * u.color[c] + g.scale_factor[c] * u.scale_factor[c]).sum::<f64>()
                + (0..4).map(|c| g.rotation[c] * u.rotation[c]).sum::<f64>()
        })
        .sum()
}

fn module_decoder(rng: &mut impl Rng) -> f64 {
    let mut dec = DecoderSet::new(2, 32, rng);
    let ff: [f64; FEATURE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let fs: [f64; FEATURE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let mut input = decoder_input(&ff, &fs, 2.3, [0.6, 0.0, 0.8]);
    let up: Vec<DecodedGrad> = (0..2)
        .map(|_| DecodedGrad {
            opacity: rng.random_range(-1.0..1.0),
            color: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            rotation: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            scale_factor: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        })
        .collect();
    let (_, cache) = dec.decode(&input).unwrap();
    let mut g = DecoderGrads::zeros_like(&dec);
    let d_in = dec.backward(&cache, &up, &mut g);
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for h in 0..4 {
        for t in 0..4 {
            let len = mlp_tensor(dec.heads_mut()[h], t).len();
            for i in 0..len {
                ana.push(mlp_grad(head_grads(&g, h), t)[i]);
                num.push(central_diff_in(
                    &mut dec,
                    |d| &mut mlp_tensor(d.heads_mut()[h], t)[i],
                    |d| decoded_objective(d, &input, &up),
                ));
            }
        }
    }
    for i in 0..DECODER_INPUT {
        ana.push(d_in[i]);
        let orig = input[i];
        input[i] = orig + H;
        let fp = decoded_objective(&dec, &input, &up);
        input[i] = orig - H;
        let fm = decoded_objective(&dec, &input, &up);
        input[i] = orig;
        num.push((fp - fm) / (2.0 * H));
    }
    rel_err(&ana, &num, 1e-12)
}

fn module_features(rng: &mut impl Rng) -> f64 {
    let mut mu: [f64; FEATURE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let mut sigma: [f64; FEATURE_DIM] = std::array::from_fn(|_| rng.random_range(-3.0..0.0));
    let eps = draw_noise(rng);
    let up: [f64; FEATURE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let rho = 0.7;
    let f = |mu: &[f64; FEATURE_DIM], sigma: &[f64; FEATURE_DIM]| {
        sample_supp_feature(mu, sigma, &eps).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>() + rho * anchor_uncertainty(sigma)
    };
    let (d_mu, d_sigma) = sample_supp_feature_backward(&sigma, &eps, &up);
    let d_u = anchor_uncertainty_backward(&sigma, rho);
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for i in 0..FEATURE_DIM {
        ana.push(d_mu[i]);
        let o = mu[i];
        mu[i] = o + H;
        let fp = f(&mu, &sigma);
        mu[i] = o - H;
        let fm = f(&mu, &sigma);
        mu[i] = o;
        num.push((fp - fm) / (2.0 * H));

        ana.push(d_sigma[i] + d_u[i]);
        let o = sigma[i];
        sigma[i] = o + H;
        let fp = f(&mu, &sigma);
        sigma[i] = o - H;
        let fm = f(&mu, &sigma);
        sigma[i] = o;
        num.push((fp - fm) / (2.0 * H));
    }
    rel_err(&ana, &num, 1e-12)
}

fn module_projection(rng: &mut impl Rng) -> f64 {
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for _ in 0..20 {
        let cam = random_camera(0, 32, 32, rng);
        let mut g = random_gaussians(1, 0.5, rng)[0];
        g.rotation = unit_quat(rng);
        let a = nalgebra::Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let b = nalgebra::Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let f = |g: &NeuralGaussian| {
            let s = project_gaussian(g, &cam, 0.3).unwrap();
            a.dot(&s.mean2d) + b.component_mul(&s.cov2d).sum()
        };
        let geom = project_gaussian_backward(&g, &cam, &a, &b);
        let fd = |edit: &dyn Fn(&mut NeuralGaussian, f64)| {
            let (mut p, mut m) = (g, g);
            edit(&mut p, H);
            edit(&mut m, -H);
            (f(&p) - f(&m)) / (2.0 * H)
        };
        for c in 0..3 {
            num.push(fd(&|g, d| g.mean[c] += d));
            ana.push(geom.mean[c]);
            num.push(fd(&|g, d| g.scale[c] += d));
            ana.push(geom.scale[c]);
        }
        for c in 0..4 {
            num.push(fd(&|g, d| g.rotation[c] += d));
            ana.push(geom.rotation[c]);
        }
    }
    rel_err(&ana, &num, 1e-12)
}

fn module_rasterizer(rng: &mut impl Rng) -> f64 {
    let (w, h) = (20usize, 16usize);
    let cam = random_camera(0, w as u32, h as u32, rng);
    let mut gs = random_gaussians(12, 0.6, rng);
    for g in &mut gs {
        g.opacity = g.opacity.min(0.9);
    }
    // the α cut-off and early termination are steps, not slopes; push them
    // out of reach so the differences see only the smooth part
    let cfg = RenderConfig {
        alpha_min: 1e-12,
        t_min: 1e-12,
        ..RenderConfig::default()
    };
    let splats: Vec<Option<Splat>> = gs.iter().map(|g| project_gaussian(g, &cam, cfg.dilation)).collect();
    let wc = Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let wu = Image::from_data(w, h, 1, (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let loss = |gs: &[NeuralGaussian], sp: &[Option<Splat>]| {
        let out = rasterize_splats(gs, sp.to_vec(), w, h, &cfg);
        out.color.data.iter().zip(&wc.data).map(|(a, b)| a * b).sum::<f64>()
            + out.uncertainty.data.iter().zip(&wu.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let out = rasterize_splats(&gs, splats.clone(), w, h, &cfg);
    let grads = rasterize_backward(
        &out,
        &gs,
        &ImageGrads {
            color: &wc,
            uncertainty: Some(&wu),
        },
        &cfg,
    )
    .unwrap();
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for i in 0..gs.len() {
        if splats[i].is_none() {
            continue;
        }
        let fd = |edit: &dyn Fn(&mut NeuralGaussian, &mut Splat, f64)| {
            let (mut gp, mut sp) = (gs.clone(), splats.clone());
            edit(&mut gp[i], sp[i].as_mut().unwrap(), H);
            let (mut gm, mut sm) = (gs.clone(), splats.clone());
            edit(&mut gm[i], sm[i].as_mut().unwrap(), -H);
            (loss(&gp, &sp) - loss(&gm, &sm)) / (2.0 * H)
        };
        num.push(fd(&|g, _, d| g.opacity += d));
        ana.push(grads[i].opacity);
        for c in 0..3 {
            num.push(fd(&|g, _, d| g.color[c] += d));
            ana.push(grads[i].color[c]);
        }
        num.push(fd(&|g, _, d| g.uncertainty += d));
        ana.push(grads[i].uncertainty);
        num.push(fd(&|_, s, d| s.mean2d.x += d));
        ana.push(grads[i].mean2d.x);
        num.push(fd(&|_, s, d| s.mean2d.y += d));
        ana.push(grads[i].mean2d.y);
        num.push(fd(&|_, s, d| s.cov2d[(0, 0)] += d));
        ana.push(grads[i].cov2d[(0, 0)]);
        num.push(fd(&|_, s, d| {
            s.cov2d[(0, 1)] += d;
            s.cov2d[(1, 0)] += d;
        }));
        ana.push(grads[i].cov2d[(0, 1)] + grads[i].cov2d[(1, 0)]);
        num.push(fd(&|_, s, d| s.cov2d[(1, 1)] += d));
        ana.push(grads[i].cov2d[(1, 1)]);
    }
    rel_err(&ana, &num, 1e-12)
}

/// Image-space losses: gradient w.r.t. every pixel of the render (and of U).
fn module_losses(rng: &mut impl Rng) -> f64 {
    let (w, h) = (12, 12);
    let mut r = random_image(w, h, rng);
    let p = random_image(w, h, rng);
    let lr = random_image(w / 2, h / 2, rng);
    let mut u = Image::from_data(w, h, 1, (0..w * h).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let f = |r: &Image, u: &Image| {
        rec_loss(r, &p, u, false).unwrap().value + 0.2 * (1.0 - ssim_with_grad(r, &p, false).unwrap().0)
            + 0.5 * lr_fidelity_loss(r, &lr, 2, &ProxyDistance).unwrap().0
    };
    let rl = rec_loss(&r, &p, &u, false).unwrap();
    let gs = ssim_with_grad(&r, &p, true).unwrap().1.unwrap();
    let gf = lr_fidelity_loss(&r, &lr, 2, &ProxyDistance).unwrap().1.unwrap();
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for i in 0..r.data.len() {
        ana.push(rl.grad_render.data[i] - 0.2 * gs.data[i] + 0.5 * gf.data[i]);
        let o = r.data[i];
        r.data[i] = o + H;
        let fp = f(&r, &u);
        r.data[i] = o - H;
        let fm = f(&r, &u);
        r.data[i] = o;
        num.push((fp - fm) / (2.0 * H));
    }
    let gu = rl.grad_uncertainty.unwrap();
    for i in 0..u.data.len() {
        ana.push(gu.data[i]);
        let o = u.data[i];
        u.data[i] = o + H;
        let fp = f(&r, &u);
        u.data[i] = o - H;
        let fm = f(&r, &u);
        u.data[i] = o;
        num.push((fp - fm) / (2.0 * H));
    }
    // volume term on a handful of scales
    for _ in 0..10 {
        let s = Vec3::new(rng.random_range(0.01..1.0), rng.random_range(0.01..1.0), rng.random_range(0.01..1.0));
        let g = volume_reg_backward(&s);
        for c in 0..3 {
            let (mut a, mut b) = (s, s);
            a[c] += H;
            b[c] -= H;
            num.push((volume_reg(&[a]) - volume_reg(&[b])) / (2.0 * H));
            ana.push(g[c]);
        }
    }
    rel_err(&ana, &num, 1e-12)
}

pub fn run() -> Outcome {
    let s = grad_scene();
    let frame = s.model.render(&s.camera, Some(&s.noise), &s.cfg.render).unwrap();
    let covered = (0..16 * 16).filter(|&p| frame.output.final_t.data[p] < 0.99).count();
    check(frame.gaussians.len() == 8 && covered == 256, || {
        format!("{} Gaussians covering {covered}/256 pixels", frame.gaussians.len())
    })?;

    let fine = check_end_to_end("fine", &s, fine_objective, true)?;
    let coarse = check_end_to_end("coarse", &s, coarse_objective, false)?;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut modules = Vec::new();
    for (name, e) in [
        ("field", module_field(&mut rng)),
        ("decoders", module_decoder(&mut rng)),
        ("features", module_features(&mut rng)),
        ("projection", module_projection(&mut rng)),
        ("rasterizer", module_rasterizer(&mut rng)),
        ("losses", module_losses(&mut rng)),
    ] {
        check(e <= MODULE_TOL, || format!("module {name}: relative error {e:.2e}"))?;
        modules.push(format!("{name} {e:.1e}"));
    }
    Ok(format!("{fine}; {coarse}; modules[{}]", modules.join(", ")))
}
