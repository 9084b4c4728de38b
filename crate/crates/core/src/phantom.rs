//! Synthetic phantoms and coil sensitivities.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::ConditioningLabel;
use crate::error::{Error, Result};
use crate::physics::{encode, gen_gaussian_mask, CoilMaps, ComplexImage, Domain};
use crate::selfsup::Acquisition;

/// One ellipse: additive intensity, semi-axes, center, rotation in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    pub phi_deg: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let phi = self.phi_deg.to_radians();
        let (dx, dy) = (x - self.x0, y - self.y0);
        let xr = dx * phi.cos() + dy * phi.sin();
        let yr = -dx * phi.sin() + dy * phi.cos();
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }
}

const fn e(intensity: f64, a: f64, b: f64, x0: f64, y0: f64, phi_deg: f64) -> Ellipse {
    Ellipse {
        intensity,
        a,
        b,
        x0,
        y0,
        phi_deg,
    }
}

/// Modified (high-contrast) Shepp-Logan head.
pub const SHEPP_LOGAN: [Ellipse; 10] = [
    e(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    e(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    e(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    e(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    e(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    e(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    e(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    e(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    e(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    e(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Ellipses of contrast variant `variant`: the intensities of the eight
/// interior features are cyclically rotated by `variant` positions, so
/// variants repeat with period 8 and all share the head outline.
pub fn variant_ellipses(variant: usize) -> [Ellipse; 10] {
    let mut out = SHEPP_LOGAN;
    let inner: Vec<f64> = SHEPP_LOGAN[2..].iter().map(|e| e.intensity).collect();
    let n = inner.len();
    for (i, el) in out[2..].iter_mut().enumerate() {
        el.intensity = inner[(i + variant) % n];
    }
    out
}

/// Pixel center in `[-1, 1]`, with `y` pointing up.
pub fn pixel_coords(h: usize, w: usize, row: usize, col: usize) -> (f64, f64) {
    let x = -1.0 + (2 * col + 1) as f64 / w as f64;
    let y = 1.0 - (2 * row + 1) as f64 / h as f64;
    (x, y)
}

/// Shepp-Logan intensities clamped at zero and scaled to a peak of one.
pub fn shepp_logan(h: usize, w: usize, variant: usize) -> Result<ComplexImage> {
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("phantom needs at least 16x16, got {h}x{w}")));
    }
    let ellipses = variant_ellipses(variant);
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = pixel_coords(h, w, r, c);
            let v: f64 = ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.intensity)
                .sum();
            values.push(v.max(0.0));
        }
    }
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    ComplexImage::from_real(h, w, &values)
}

/// Smooth complex Gaussian sensitivities centered at evenly spaced points on
/// the image border, normalized to unit root-sum-of-squares.
pub fn synth_coils(h: usize, w: usize, n_coils: usize, seed: u64) -> Result<CoilMaps> {
    if n_coils == 0 {
        return Err(Error::Config("need at least one coil".into()));
    }
    if n_coils == 1 {
        return Ok(CoilMaps::unit(h, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = 0.5 * h.max(w) as f64;
    let width = 0.6 * h.max(w) as f64;
    let mut raw = Vec::with_capacity(n_coils);
    for k in 0..n_coils {
        let theta = 2.0 * PI * k as f64 / n_coils as f64;
        let (py, px) = (cy + radius * theta.sin(), cx + radius * theta.cos());
        let phase0 = rng.random_range(0.0..2.0 * PI);
        let ramp = rng.random_range(-1.0..1.0) * PI / h.max(w) as f64;
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - py).powi(2) + (c as f64 - px).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                let phase = phase0 + ramp * (r as f64 - py + c as f64 - px);
                data.push(Complex64::from_polar(mag, phase));
            }
        }
        raw.push(ComplexImage::new(h, w, Domain::Image, data)?);
    }
    CoilMaps::normalized(raw)
}

/// Settings for one simulated slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceSpec {
    pub h: usize,
    pub w: usize,
    pub variant: usize,
    pub contrasts: usize,
    pub coils: usize,
    pub accel: f64,
    pub mask_seed: u64,
    pub coil_seed: u64,
}

/// Ground-truth phantom and its retrospectively undersampled acquisition.
/// The contrast label is `variant % contrasts`.
pub fn simulate_slice(spec: &SliceSpec) -> Result<(ComplexImage, Acquisition)> {
    let truth = shepp_logan(spec.h, spec.w, spec.variant)?;
    let coils = synth_coils(spec.h, spec.w, spec.coils, spec.coil_seed)?;
    let mask = gen_gaussian_mask(spec.h, spec.w, spec.accel, spec.mask_seed)?;
    let kspace = encode(&truth, &coils, &mask)?;
    let label = ConditioningLabel::new(spec.accel, spec.variant % spec.contrasts, spec.contrasts)?;
    Ok((
        truth,
        Acquisition {
            kspace,
            mask,
            coils,
            label,
        },
    ))
}
