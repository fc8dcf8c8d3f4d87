#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use splatsr::math::Vec3;
use splatsr::{Camera, NeuralGaussian};

pub fn unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

pub fn gaussian(mean: Vec3, scale: f64, opacity: f64, color: [f64; 3]) -> NeuralGaussian {
    NeuralGaussian {
        mean,
        rotation: [1.0, 0.0, 0.0, 0.0],
        scale: Vec3::repeat(scale),
        opacity,
        color,
        uncertainty: 0.0,
    }
}

/// Random Gaussians inside a ball of radius `extent` around the origin.
pub fn random_gaussians(n: usize, extent: f64, rng: &mut impl Rng) -> Vec<NeuralGaussian> {
    (0..n)
        .map(|_| NeuralGaussian {
            mean: Vec3::new(
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
            ),
            rotation: unit_quat(rng),
            scale: Vec3::new(rng.random_range(0.02..0.3), rng.random_range(0.02..0.3), rng.random_range(0.02..0.3)),
            opacity: rng.random_range(0.05..1.0),
            color: [rng.random(), rng.random(), rng.random()],
            uncertainty: rng.random_range(0.0..2.0),
        })
        .collect()
}

/// A camera on a sphere of radius 3–5 looking roughly at the origin.
pub fn random_camera(id: u32, w: u32, h: u32, rng: &mut impl Rng) -> Camera {
    let dir = loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if v.norm() > 1e-3 {
            break v.normalize();
        }
    };
    let eye = dir * rng.random_range(3.0..5.0);
    let target = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let up = if dir.y.abs() > 0.95 { Vec3::x() } else { Vec3::y() };
    let mut cam = Camera::look_at(id, w, h, rng.random_range(0.8..1.5) * w as f64, eye, target, up);
    cam.cx += rng.random_range(-2.0..2.0);
    cam.cy += rng.random_range(-2.0..2.0);
    cam
}

/// Central difference `(f(p + h) − f(p − h)) / step` for an `f32` parameter,
/// using the step that is actually representable.
pub fn central_diff_f32(p: &mut f32, h: f64, mut f: impl FnMut() -> f64) -> f64 {
    let orig = *p;
    let plus = (orig as f64 + h) as f32;
    let minus = (orig as f64 - h) as f32;
    *p = plus;
    let fp = f();
    *p = minus;
    let fm = f();
    *p = orig;
    (fp - fm) / (plus as f64 - minus as f64)
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(floor)
}
