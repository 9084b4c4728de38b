//! Coil encoding, its adjoint, and the data-consistency projection.

use num_complex::Complex64;

use super::fft::{fft2c, ifft2c};
use super::image::{CoilMaps, CoilStack, ComplexImage, Domain};
use super::mask::SamplingMask;
use crate::error::{Error, Result};
use crate::tensor::LinearMap;

fn check_dims(x: &ComplexImage, coils: &CoilMaps, mask: &SamplingMask) -> Result<()> {
    if x.dims() != coils.dims() || x.dims() != mask.dims() {
        return Err(Error::Dimension(format!(
            "image {:?}, coils {:?}, mask {:?}",
            x.dims(),
            coils.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

fn apply_mask(k: &mut ComplexImage, mask: &SamplingMask) {
    for (z, &b) in k.data_mut().iter_mut().zip(mask.bits()) {
        if !b {
            *z = Complex64::new(0.0, 0.0);
        }
    }
}

/// Fully sampled per-coil k-space `F(C_c x)`.
pub fn coil_kspace(x: &ComplexImage, coils: &CoilMaps) -> Result<CoilStack> {
    if x.dims() != coils.dims() {
        return Err(Error::Dimension(format!(
            "image {:?} vs coils {:?}",
            x.dims(),
            coils.dims()
        )));
    }
    let ks = coils
        .maps()
        .iter()
        .map(|c| fft2c(&c.mul(x)?))
        .collect::<Result<Vec<_>>>()?;
    CoilStack::new(ks)
}

/// `y_c = M * F(C_c x)` for every coil.
pub fn encode(x: &ComplexImage, coils: &CoilMaps, mask: &SamplingMask) -> Result<CoilStack> {
    check_dims(x, coils, mask)?;
    let mut ks = coil_kspace(x, coils)?.into_coils();
    ks.iter_mut().for_each(|k| apply_mask(k, mask));
    CoilStack::new(ks)
}

/// Adjoint of [`encode`]: `sum_c conj(C_c) * F^-1(M * y_c)`.
pub fn zero_filled(y: &CoilStack, coils: &CoilMaps, mask: &SamplingMask) -> Result<ComplexImage> {
    if y.n_coils() != coils.n_coils() || y.dims() != coils.dims() || y.dims() != mask.dims() {
        return Err(Error::Dimension(format!(
            "{} coils of {:?} k-space vs {} maps of {:?}",
            y.n_coils(),
            y.dims(),
            coils.n_coils(),
            coils.dims()
        )));
    }
    let (h, w) = y.dims();
    let mut out = ComplexImage::zeros(h, w, Domain::Image);
    for (k, c) in y.coils().iter().zip(coils.maps()) {
        let mut k = k.clone();
        apply_mask(&mut k, mask);
        let img = ifft2c(&k)?;
        for ((o, &v), &s) in out.data_mut().iter_mut().zip(img.data()).zip(c.data()) {
            *o += s.conj() * v;
        }
    }
    Ok(out)
}

/// Replaces the acquired k-space of each coil image by `y_ref` and combines
/// coils with their conjugate sensitivities:
/// `sum_c conj(C_c) F^-1{ F(C_c x)(1 - M) + y_ref_c M }`.
pub fn dc_kspace(
    x: &ComplexImage,
    y_ref: &CoilStack,
    coils: &CoilMaps,
    mask: &SamplingMask,
) -> Result<ComplexImage> {
    check_dims(x, coils, mask)?;
    if y_ref.n_coils() != coils.n_coils() || y_ref.dims() != x.dims() {
        return Err(Error::Dimension("reference k-space does not match coils".into()));
    }
    let (h, w) = x.dims();
    let mut out = ComplexImage::zeros(h, w, Domain::Image);
    for (c, yr) in coils.maps().iter().zip(y_ref.coils()) {
        let mut k = fft2c(&c.mul(x)?)?;
        for ((z, &r), &b) in k.data_mut().iter_mut().zip(yr.data()).zip(mask.bits()) {
            if b {
                *z = r;
            }
        }
        let img = ifft2c(&k)?;
        for ((o, &v), &s) in out.data_mut().iter_mut().zip(img.data()).zip(c.data()) {
            *o += s.conj() * v;
        }
    }
    Ok(out)
}

/// Data consistency against a reference image: acquired k-space of `C x`
/// is replaced by that of `C x_ref`.
pub fn data_consistency(
    x: &ComplexImage,
    x_ref: &ComplexImage,
    coils: &CoilMaps,
    mask: &SamplingMask,
) -> Result<ComplexImage> {
    check_dims(x_ref, coils, mask)?;
    let y_ref = coil_kspace(x_ref, coils)?;
    dc_kspace(x, &y_ref, coils, mask)
}

/// Linear part of [`dc_kspace`] on `[2, h, w]` real/imag channels:
/// `x -> sum_c conj(C_c) F^-1((1 - M) F(C_c x))`. It is self-adjoint.
pub struct DcProjection {
    coils: CoilMaps,
    mask: SamplingMask,
    shape: [usize; 3],
}

impl DcProjection {
    pub fn new(coils: CoilMaps, mask: SamplingMask) -> Result<Self> {
        if coils.dims() != mask.dims() {
            return Err(Error::Dimension("coils and mask differ in size".into()));
        }
        let (h, w) = mask.dims();
        Ok(Self {
            coils,
            mask,
            shape: [2, h, w],
        })
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let (h, w) = self.mask.dims();
        let img = ComplexImage::from_channels(h, w, Domain::Image, x).expect("channel layout");
        let zero = CoilStack::new(vec![ComplexImage::zeros(h, w, Domain::KSpace); self.coils.n_coils()])
            .expect("zero stack");
        dc_kspace(&img, &zero, &self.coils, &self.mask)
            .expect("validated dimensions")
            .to_channels()
    }
}

impl LinearMap for DcProjection {
    fn in_shape(&self) -> &[usize] {
        &self.shape
    }

    fn out_shape(&self) -> &[usize] {
        &self.shape
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.project(x)
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.project(y)
    }
}

/// `[2, h, w]` image channels to `[n_coils, 2, h, w]` per-coil k-space
/// channels, `x -> F(C_c x)`.
pub struct CoilKSpaceMap {
    coils: CoilMaps,
    in_shape: [usize; 3],
    out_shape: [usize; 4],
}

impl CoilKSpaceMap {
    pub fn new(coils: CoilMaps) -> Self {
        let (h, w) = coils.dims();
        let n = coils.n_coils();
        Self {
            coils,
            in_shape: [2, h, w],
            out_shape: [n, 2, h, w],
        }
    }
}

impl LinearMap for CoilKSpaceMap {
    fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (h, w) = self.coils.dims();
        let img = ComplexImage::from_channels(h, w, Domain::Image, x).expect("channel layout");
        coil_kspace(&img, &self.coils)
            .expect("validated dimensions")
            .coils()
            .iter()
            .flat_map(ComplexImage::to_channels)
            .collect()
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let (h, w) = self.coils.dims();
        let per = 2 * h * w;
        let mut out = ComplexImage::zeros(h, w, Domain::Image);
        for (chunk, c) in y.chunks(per).zip(self.coils.maps()) {
            let k = ComplexImage::from_channels(h, w, Domain::KSpace, chunk).expect("channel layout");
            let img = ifft2c(&k).expect("extent");
            for ((o, &v), &s) in out.data_mut().iter_mut().zip(img.data()).zip(c.data()) {
                *o += s.conj() * v;
            }
        }
        out.to_channels()
    }
}
