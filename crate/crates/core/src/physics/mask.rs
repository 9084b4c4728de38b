use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Side of the always-acquired square around the k-space center.
pub const CALIBRATION_SIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Full,
    /// Acquisition mask `M`.
    Acquired,
    /// Loss sub-mask `M_r`, held out from the network input.
    Loss,
    /// Conditioning sub-mask `M_p = M - M_r`.
    Conditioning,
}

/// Binary k-space sampling pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
    pub accel: f64,
    pub seed: u64,
    pub kind: MaskKind,
}

impl SamplingMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>, kind: MaskKind) -> Result<Self> {
        if h == 0 || w == 0 || bits.len() != h * w {
            return Err(Error::Dimension(format!(
                "{h}x{w} mask cannot hold {} entries",
                bits.len()
            )));
        }
        let ones = bits.iter().filter(|&&b| b).count().max(1);
        Ok(Self {
            h,
            w,
            bits,
            accel: (h * w) as f64 / ones as f64,
            seed: 0,
            kind,
        })
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![true; h * w],
            accel: 1.0,
            seed: 0,
            kind: MaskKind::Full,
        }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
            accel: f64::INFINITY,
            seed: 0,
            kind: MaskKind::Acquired,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.w + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    /// Mask as `0.0 / 1.0` values.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !(a && b))
    }

    pub fn union(&self, other: &Self) -> Self {
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Self { bits, ..self.clone() }
    }
}

fn calibration_block(h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (r0, c0) = (h / 2 - CALIBRATION_SIDE / 2, w / 2 - CALIBRATION_SIDE / 2);
    (r0..r0 + CALIBRATION_SIDE)
        .flat_map(move |r| (c0..c0 + CALIBRATION_SIDE).map(move |c| r * w + c))
}

/// Unnormalized centered Gaussian density in normalized frequency units.
fn gaussian_density(h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let (cr, cc) = ((h / 2) as f64, (w / 2) as f64);
    let two_var = 2.0 * sigma * sigma;
    let mut p = Vec::with_capacity(h * w);
    for r in 0..h {
        let dr = (r as f64 - cr) / h as f64;
        for c in 0..w {
            let dc = (c as f64 - cc) / w as f64;
            p.push((-(dr * dr + dc * dc) / two_var).exp());
        }
    }
    p
}

/// Standard deviation at which the density sums to `target` samples.
fn bisect_sigma(h: usize, w: usize, target: f64) -> f64 {
    let (mut lo, mut hi) = (1e-4f64, 1e3f64);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let expected: f64 = gaussian_density(h, w, mid).iter().sum();
        if expected < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    (lo * hi).sqrt()
}

/// Variable-density mask drawn from a centered 2D Gaussian.
///
/// The variance is bisected so the density integrates to `round(h*w/accel)`
/// samples. Positions are then ranked by `u / p` for uniform draws `u`, which
/// keeps Bernoulli(p) ordering while fixing the sample count exactly. A
/// central calibration square is always acquired.
pub fn gen_gaussian_mask(h: usize, w: usize, accel: f64, seed: u64) -> Result<SamplingMask> {
    if !accel.is_finite() || accel < 1.0 {
        return Err(Error::Config(format!("acceleration must be >= 1, got {accel}")));
    }
    if h < CALIBRATION_SIDE || w < CALIBRATION_SIDE {
        return Err(Error::Config(format!("mask {h}x{w} smaller than the calibration block")));
    }
    let total = h * w;
    let target = (total as f64 / accel).round() as usize;
    let calib = CALIBRATION_SIDE * CALIBRATION_SIDE;
    if target < calib {
        return Err(Error::Config(format!(
            "R={accel} keeps {target} samples, fewer than the {calib}-sample calibration block"
        )));
    }

    let mut bits = vec![false; total];
    if target >= total {
        bits.iter_mut().for_each(|b| *b = true);
    } else {
        for k in calibration_block(h, w) {
            bits[k] = true;
        }
        let sigma = bisect_sigma(h, w, target as f64);
        let density = gaussian_density(h, w, sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<f64> = (0..total).map(|_| rng.random::<f64>()).collect();
        let mut ranked: Vec<(f64, usize)> = (0..total)
            .filter(|&k| !bits[k])
            .map(|k| (draws[k] / density[k], k))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, k) in ranked.iter().take(target - calib) {
            bits[k] = true;
        }
    }
    Ok(SamplingMask {
        h,
        w,
        bits,
        accel,
        seed,
        kind: if target >= total {
            MaskKind::Full
        } else {
            MaskKind::Acquired
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_acceleration_is_full() {
        let m = gen_gaussian_mask(16, 16, 1.0, 3).unwrap();
        assert_eq!(m.count(), 256);
    }

    #[test]
    fn exact_count_and_calibration() {
        let m = gen_gaussian_mask(64, 64, 4.0, 11).unwrap();
        assert_eq!(m.count(), 1024);
        for r in 30..34 {
            for c in 30..34 {
                assert!(m.get(r, c));
            }
        }
    }

    #[test]
    fn seeded_determinism() {
        let a = gen_gaussian_mask(32, 32, 4.0, 5).unwrap();
        let b = gen_gaussian_mask(32, 32, 4.0, 5).unwrap();
        let c = gen_gaussian_mask(32, 32, 4.0, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.bits(), c.bits());
    }

    #[test]
    fn rejects_uncalibratable_acceleration() {
        assert!(matches!(gen_gaussian_mask(8, 8, 8.0, 0), Err(Error::Config(_))));
        assert!(matches!(gen_gaussian_mask(8, 8, 0.5, 0), Err(Error::Config(_))));
        assert!(gen_gaussian_mask(8, 8, 4.0, 0).is_ok());
    }
}
