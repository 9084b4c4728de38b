//! Centered, orthonormal 2D Fourier transforms.
//!
//! The DC coefficient sits at `(h / 2, w / 2)` and both directions are scaled
//! by `1 / sqrt(h * w)`, so the pair is unitary.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use super::image::{ComplexImage, Domain};
use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// `out[k] = x[(k + shift) mod n]` along both axes.
fn roll2(data: &[Complex64], h: usize, w: usize, sh: usize, sw: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..h {
        let src_r = (r + sh) % h;
        for c in 0..w {
            out.push(data[src_r * w + (c + sw) % w]);
        }
    }
    out
}

fn transform(x: &ComplexImage, direction: FftDirection) -> Vec<Complex64> {
    let (h, w) = x.dims();
    // ifftshift rolls forward by n/2, fftshift by n - n/2
    let mut buf = roll2(x.data(), h, w, h / 2, w / 2);
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let row = planner.plan_fft(w, direction);
        row.process(&mut buf);
        let col = planner.plan_fft(h, direction);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = buf[r * w + c];
            }
            col.process(&mut column);
            for r in 0..h {
                buf[r * w + c] = column[r];
            }
        }
    });
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = roll2(&buf, h, w, h - h / 2, w - w / 2);
    out.iter_mut().for_each(|z| *z *= scale);
    out
}

fn check_extent(x: &ComplexImage) -> Result<()> {
    let (h, w) = x.dims();
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!("fft needs extents >= 2, got {h}x{w}")));
    }
    Ok(())
}

/// Image to k-space.
pub fn fft2c(x: &ComplexImage) -> Result<ComplexImage> {
    check_extent(x)?;
    let (h, w) = x.dims();
    ComplexImage::new(h, w, Domain::KSpace, transform(x, FftDirection::Forward))
}

/// K-space to image.
pub fn ifft2c(k: &ComplexImage) -> Result<ComplexImage> {
    check_extent(k)?;
    let (h, w) = k.dims();
    ComplexImage::new(h, w, Domain::Image, transform(k, FftDirection::Inverse))
}
