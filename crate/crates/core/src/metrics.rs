//! PSNR and SSIM on magnitude images.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::physics::ComplexImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct RealImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RealImage {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dimension(format!("{h}x{w} image with {} values", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn magnitude(x: &ComplexImage) -> Self {
        let (h, w) = x.dims();
        Self {
            h,
            w,
            data: x.magnitude(),
        }
    }

    fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_pair(x: &RealImage, reference: &RealImage) -> Result<()> {
    if (x.h, x.w) != (reference.h, reference.w) {
        return Err(Error::Dimension(format!(
            "{}x{} vs {}x{}",
            x.h, x.w, reference.h, reference.w
        )));
    }
    if reference.data.iter().all(|&v| v == 0.0) {
        return Err(Error::Contract("reference image is identically zero".into()));
    }
    Ok(())
}

/// `10 log10(max(ref)^2 / MSE)`; `+inf` when the images are identical.
pub fn psnr(x: &RealImage, reference: &RealImage) -> Result<f64> {
    check_pair(x, reference)?;
    let mse = x
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = reference.max();
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            w.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean SSIM over every fully contained 11x11 Gaussian window (sigma 1.5),
/// with dynamic range `max(ref)`.
pub fn ssim(x: &RealImage, reference: &RealImage) -> Result<f64> {
    check_pair(x, reference)?;
    if x.h < SSIM_WINDOW || x.w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            x.h, x.w
        )));
    }
    let range = reference.max();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let win = gaussian_window();
    let (oh, ow) = (x.h - SSIM_WINDOW + 1, x.w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wt = win[i * SSIM_WINDOW + j];
                    let k = (r + i) * x.w + c + j;
                    let (a, b) = (x.data[k], reference.data[k]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// `metric<TAB>value` lines.
pub fn format_report(entries: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        writeln!(s, "{k}\t{v}").expect("write to string");
    }
    s
}
