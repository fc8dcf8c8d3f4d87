//! Small fixed-size helpers shared by the forward and backward passes.

use nalgebra::{Matrix3, Vector3, Vector4};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub fn vec3(v: [f32; 3]) -> Vec3 {
    Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Rotation matrix of a unit quaternion stored as (w, x, y, z).
pub fn quat_to_mat(q: &Vector4<f64>) -> Mat3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the (unnormalized) quaternion
/// components that produced it through [`quat_to_mat`].
pub fn quat_to_mat_backward(q: &Vector4<f64>, d_rot: &Mat3) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = d_rot;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Vector4::new(dw, dx, dy, dz)
}

/// Σ = R·diag(s)²·Rᵀ.
pub fn covariance(rot: &Mat3, scale: &Vec3) -> Mat3 {
    let m = rot * Mat3::from_diagonal(scale);
    m * m.transpose()
}

/// Backward of [`covariance`] for a symmetric upstream gradient.
/// Returns (dL/dR, dL/ds).
pub fn covariance_backward(rot: &Mat3, scale: &Vec3, d_cov: &Mat3) -> (Mat3, Vec3) {
    let m = rot * Mat3::from_diagonal(scale);
    let g = 0.5 * (d_cov + d_cov.transpose());
    let d_m = 2.0 * g * m;
    let d_rot = d_m * Mat3::from_diagonal(scale);
    let mut d_scale = Vec3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            d_scale[j] += d_m[(i, j)] * rot[(i, j)];
        }
    }
    (d_rot, d_scale)
}
