use ndarray::Array2;

use super::image::Image;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of pixel values.
pub const SSIM_RANGE: f64 = 1.0;

/// Pearson correlation; a constant input is degenerate.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("correlating {} with {} values", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::Shape(format!(
            "generated image is {:?}, reference {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    Ok(())
}

/// Pearson correlation of the flattened RGB pixels.
pub fn pixcorr(generated: &Image, reference: &Image) -> Result<f64> {
    same_shape(generated, reference)?;
    let a: Vec<f64> = generated.data.iter().copied().collect();
    let b: Vec<f64> = reference.data.iter().copied().collect();
    pearson(&a, &b)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over all full windows ("valid" positions).
fn filter_valid(x: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let (h, wd) = x.dim();
    let k = w.len();
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..k).map(|t| w[t] * x[[i, j + t]]).sum::<f64>();
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..k).map(|t| w[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Mean local SSIM of the luma images: 11×11 Gaussian window (σ = 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, range 1, evaluated where the window fits.
pub fn ssim(generated: &Image, reference: &Image) -> Result<f64> {
    same_shape(generated, reference)?;
    if generated.height() < SSIM_WINDOW || generated.width() < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}",
            generated.height(),
            generated.width()
        )));
    }
    let (x, y) = (generated.gray(), reference.gray());
    let w = gaussian_window();
    let mx = filter_valid(&x, &w);
    let my = filter_valid(&y, &w);
    let sxx = filter_valid(&(&x * &x), &w);
    let syy = filter_valid(&(&y * &y), &w);
    let sxy = filter_valid(&(&x * &y), &w);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let mut total = 0.0;
    for idx in ndarray::indices(mx.dim()) {
        let (ux, uy) = (mx[idx], my[idx]);
        let vx = sxx[idx] - ux * ux;
        let vy = syy[idx] - uy * uy;
        let cov = sxy[idx] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Image::from_gray(&Array2::from_shape_fn((h, w), |(i, j)| f(i, j))).unwrap()
    }

    #[test]
    fn pixcorr_identities() {
        let a = img(4, 4, |i, j| ((i * 3 + j * 5) % 7) as f64 / 7.0);
        let neg = Image::new(a.data.mapv(|v| 1.0 - v)).unwrap();
        assert!((pixcorr(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pixcorr(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = img(4, 4, |_, _| 0.5);
        assert!(matches!(pixcorr(&a, &flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn checkerboard_shifted_by_one_pixel() {
        // A 4×4 checkerboard shifted cyclically by one column is its
        // complement: correlation −1. A shift without wrap-around, padding
        // the first column with black, gives 12 agreeing... computed below.
        let cb = img(4, 4, |i, j| ((i + j) % 2) as f64);
        let shifted = img(4, 4, |i, j| ((i + (j + 3) % 4) % 2) as f64);
        assert!((pixcorr(&cb, &shifted).unwrap() + 1.0).abs() < 1e-12);
        let padded = img(4, 4, |i, j| if j == 0 { 0.0 } else { ((i + j - 1) % 2) as f64 });
        // cb has mean 1/2; padded has 6 ones, mean 3/8. Σ(x−x̄)(y−ȳ) =
        // Σxy − n·x̄·ȳ = 0 − 16·(1/2)(3/8) = −3; Σ(x−x̄)² = 4; Σ(y−ȳ)² =
        // 6 − 16·(9/64) = 3.75. r = −3 / √(4·3.75).
        let expected = -3.0 / (4.0f64 * 3.75).sqrt();
        assert!((pixcorr(&cb, &padded).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let a = img(16, 16, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        let b = img(16, 16, |i, j| ((i * 2 + j * 5) % 13) as f64 / 12.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let small = img(8, 8, |_, _| 0.0);
        assert!(matches!(ssim(&small, &small), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(Image::new(Array3::from_elem((2, 2, 3), 1.5)).is_err());
    }
}
