use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector4};

use crate::camera::{Camera, Z_NEAR};
use crate::math::{covariance_backward, quat_to_mat, quat_to_mat_backward, Mat3, Vec3};
use crate::scene::NeuralGaussian;

/// Screen-space footprint of a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    pub mean2d: Vector2<f64>,
    /// Dilated 2D covariance.
    pub cov2d: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
}

/// Local-affine projection of a Gaussian; `None` when behind `Z_NEAR`.
pub fn project_gaussian(g: &NeuralGaussian, cam: &Camera, dilation: f64) -> Option<Splat> {
    let w = cam.rotation();
    let t = w * g.mean + cam.translation();
    if t.z <= Z_NEAR {
        return None;
    }
    let j = projection_jacobian(cam, &t);
    let m = j * w;
    let cov = m * g.covariance() * m.transpose() + Matrix2::identity() * dilation;
    Some(Splat {
        mean2d: Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy),
        cov2d: cov,
        depth: t.z,
    })
}

fn projection_jacobian(cam: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

/// Gradients w.r.t. the 3D parameters of one Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGeomGrad {
    pub mean: Vec3,
    pub rotation: Vector4<f64>,
    pub scale: Vec3,
}

/// Backward of [`project_gaussian`]. `d_cov2d` is the gradient w.r.t. the
/// entries of the (symmetric) 2D covariance.
pub fn project_gaussian_backward(
    g: &NeuralGaussian,
    cam: &Camera,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
) -> GaussianGeomGrad {
    let w = cam.rotation();
    let t = w * g.mean + cam.translation();
    let j = projection_jacobian(cam, &t);
    let m = j * w;
    let q = Vector4::from(g.rotation);
    let rot = quat_to_mat(&q);
    let sigma = crate::math::covariance(&rot, &g.scale);
    let gs = 0.5 * (d_cov2d + d_cov2d.transpose());

    let d_sigma: Mat3 = m.transpose() * gs * m;
    let d_m = 2.0 * gs * m * sigma;
    let d_j = d_m * w.transpose();

    let (x, y, z) = (t.x, t.y, t.z);
    let iz2 = 1.0 / (z * z);
    let iz3 = iz2 / z;
    let mut d_t = j.transpose() * d_mean2d;
    d_t.x += d_j[(0, 2)] * (-cam.fx * iz2);
    d_t.y += d_j[(1, 2)] * (-cam.fy * iz2);
    d_t.z += d_j[(0, 0)] * (-cam.fx * iz2)
        + d_j[(0, 2)] * (2.0 * cam.fx * x * iz3)
        + d_j[(1, 1)] * (-cam.fy * iz2)
        + d_j[(1, 2)] * (2.0 * cam.fy * y * iz3);

    let (d_rot, d_scale) = covariance_backward(&rot, &g.scale, &d_sigma);
    GaussianGeomGrad {
        mean: w.transpose() * d_t,
        rotation: quat_to_mat_backward(&q, &d_rot),
        scale: d_scale,
    }
}
