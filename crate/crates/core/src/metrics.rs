use crate::error::Result;
use crate::image::Image;

/// `10·log10(1/MSE)` for images in `[0, 1]`; `+∞` when they are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub use crate::losses::ssim;
