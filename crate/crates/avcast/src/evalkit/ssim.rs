//! SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03,
//! dynamic range 1) and PSNR with a 100 dB cap.

use crate::error::{AvError, Result};
use diffcore::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filtering: output (h-10) x (w-10).
fn filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Horizontal pass: h x ow.
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += img[y * w + x + i] * kv;
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass: oh x ow.
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += tmp[(y + i) * ow + x] * kv;
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn frame_view(t: &Tensor) -> Result<(&[f64], usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((t.data(), h, w)),
        [1, h, w] => Ok((t.data(), h, w)),
        [1, 1, h, w] => Ok((t.data(), h, w)),
        _ => Err(AvError::invalid(
            "frame_view",
            format!("expected a single frame, got shape {:?}", t.shape()),
        )),
    }
}

/// Mean windowed SSIM over valid positions.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ad, ah, aw) = frame_view(a)?;
    let (bd, bh, bw) = frame_view(b)?;
    if ah != bh || aw != bw {
        return Err(AvError::invalid(
            "ssim",
            format!("frame sizes {ah}x{aw} vs {bh}x{bw}"),
        ));
    }
    if ah < SSIM_WINDOW || aw < SSIM_WINDOW {
        return Err(AvError::invalid(
            "ssim",
            format!("frames {ah}x{aw} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let kernel = gaussian_kernel();
    let n = ad.len();
    let mut aa = vec![0.0; n];
    let mut bb = vec![0.0; n];
    let mut ab = vec![0.0; n];
    for i in 0..n {
        aa[i] = ad[i] * ad[i];
        bb[i] = bd[i] * bd[i];
        ab[i] = ad[i] * bd[i];
    }
    let mu_a = filter_valid(ad, ah, aw, &kernel);
    let mu_b = filter_valid(bd, ah, aw, &kernel);
    let m_aa = filter_valid(&aa, ah, aw, &kernel);
    let m_bb = filter_valid(&bb, ah, aw, &kernel);
    let m_ab = filter_valid(&ab, ah, aw, &kernel);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

/// 10 * log10(1 / MSE) in dB for unit dynamic range, capped at 100 dB
/// when MSE < 1e-10.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ad, ah, aw) = frame_view(a)?;
    let (bd, bh, bw) = frame_view(b)?;
    if ah != bh || aw != bw {
        return Err(AvError::invalid(
            "psnr",
            format!("frame sizes {ah}x{aw} vs {bh}x{bw}"),
        ));
    }
    let mse = ad
        .iter()
        .zip(bd)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / ad.len() as f64;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(-10.0 * mse.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_frame(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![16, 16], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn ssim_self_is_one() {
        for seed in 0..4 {
            let x = rand_frame(seed);
            assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let (a, b) = (rand_frame(5), rand_frame(6));
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_constant_images_hit_stabilizer_floor() {
        let zeros = Tensor::zeros(vec![16, 16]);
        let ones = Tensor::full(vec![16, 16], 1.0);
        let v = ssim(&zeros, &ones).unwrap();
        // Closed form on constant images: c1 * c2 / ((1 + c1) * c2).
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = c1 / (1.0 + c1);
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn psnr_cases() {
        let x = rand_frame(7);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        // MSE of exactly 0.01 -> 20 dB.
        let a = Tensor::zeros(vec![16, 16]);
        let b = Tensor::full(vec![16, 16], 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        // Brute-force MSE accumulation agreement.
        let (p, q) = (rand_frame(8), rand_frame(9));
        let mut acc = 0.0;
        for i in 0..p.len() {
            let d = p.data()[i] - q.data()[i];
            acc += d * d;
        }
        let mse = acc / p.len() as f64;
        let expected = -10.0 * mse.log10();
        assert!((psnr(&p, &q).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros(vec![16, 16]);
        let b = Tensor::zeros(vec![16, 12]);
        assert!(ssim(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
    }
}
