//! Structural similarity with a fixed 11x11 Gaussian window (sigma 1.5),
//! K1 = 0.01, K2 = 0.03, dynamic range 1.0, valid-region convolution.

use crate::error::EvalError;
use crate::phantom::Image;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 1.0;

fn gaussian_window() -> [f64; WINDOW * WINDOW] {
    let mut w = [0.0; WINDOW * WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let (y, x) = ((i / WINDOW) as f64 - c, (i % WINDOW) as f64 - c);
        *v = (-(y * y + x * x) / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM over all valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, EvalError> {
    if (a.h(), a.w()) != (b.h(), b.w()) {
        return Err(EvalError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    if a.h() < WINDOW || a.w() < WINDOW {
        return Err(EvalError::ShapeMismatch(format!(
            "image {}x{} smaller than the {WINDOW}x{WINDOW} window",
            a.h(),
            a.w()
        )));
    }
    let win = gaussian_window();
    let c1 = (K1 * L) * (K1 * L);
    let c2 = (K2 * L) * (K2 * L);
    let (h, w) = (a.h(), a.w());
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - WINDOW {
        for ox in 0..=w - WINDOW {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..WINDOW {
                for wx in 0..WINDOW {
                    let k = win[wy * WINDOW + wx];
                    let xv = a.get(oy + wy, ox + wx) as f64;
                    let yv = b.get(oy + wy, ox + wx) as f64;
                    mx += k * xv;
                    my += k * yv;
                    mxx += k * xv * xv;
                    myy += k * yv * yv;
                    mxy += k * xv * yv;
                }
            }
            let (vx, vy, cov) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{synthesize_subject, GenParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn phantom() -> Image {
        synthesize_subject(3, &GenParams::default()).unwrap().baseline
    }

    #[test]
    fn identical_images_score_one() {
        let x = phantom();
        let s = ssim(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "ssim(x,x) = {s}");
    }

    #[test]
    fn constant_images_match_closed_form() {
        // Zero variance collapses the structure factor to 1, leaving the
        // luminance term (2*m1*m2 + C1) / (m1^2 + m2^2 + C1).
        let a = Image::from_vec(16, 16, vec![0.25; 256]).unwrap();
        let b = Image::from_vec(16, 16, vec![0.75; 256]).unwrap();
        let expected = (2.0 * 0.25 * 0.75 + 1e-4) / (0.25f64.powi(2) + 0.75f64.powi(2) + 1e-4);
        let s = ssim(&a, &b).unwrap();
        assert!((s - expected).abs() < 1e-6, "{s} vs {expected}");
        assert!((s - 0.60006).abs() < 1e-4);
    }

    #[test]
    fn symmetric_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = Image::from_vec(16, 16, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap();
            let b = Image::from_vec(16, 16, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap();
            let s1 = ssim(&a, &b).unwrap();
            let s2 = ssim(&b, &a).unwrap();
            assert!((s1 - s2).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_decreases_with_growing_noise() {
        let x = phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut previous = 1.0;
        for sigma in [0.01f32, 0.05, 0.1] {
            let noisy: Vec<f32> = x
                .data()
                .iter()
                .map(|&v| (v + rng.gen_range(-2.0..2.0f32) * sigma).clamp(0.0, 1.0))
                .collect();
            let y = Image::from_vec(x.h(), x.w(), noisy).unwrap();
            let s = ssim(&x, &y).unwrap();
            assert!(s < previous, "sigma {sigma}: {s} !< {previous}");
            previous = s;
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Image::zeros(16, 16);
        let b = Image::zeros(16, 17);
        assert!(ssim(&a, &b).is_err());
        let tiny = Image::zeros(8, 8);
        assert!(ssim(&tiny, &tiny).is_err());
    }
}
