use num_complex::Complex64;

use crate::error::{Error, Result};

/// Whether a complex array holds image-space or k-space samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Image,
    KSpace,
}

/// Row-major `h x w` complex array.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    h: usize,
    w: usize,
    domain: Domain,
    data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn new(h: usize, w: usize, domain: Domain, data: Vec<Complex64>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::Dimension(format!(
                "{h}x{w} image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { h, w, domain, data })
    }

    pub fn zeros(h: usize, w: usize, domain: Domain) -> Self {
        Self {
            h,
            w,
            domain,
            data: vec![Complex64::new(0.0, 0.0); h * w],
        }
    }

    /// Real-valued image with zero imaginary part.
    pub fn from_real(h: usize, w: usize, values: &[f64]) -> Result<Self> {
        let data = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        Self::new(h, w, Domain::Image, data)
    }

    /// Builds from a `[2, h, w]` real/imaginary channel pair.
    pub fn from_channels(h: usize, w: usize, domain: Domain, channels: &[f64]) -> Result<Self> {
        if channels.len() != 2 * h * w {
            return Err(Error::Dimension(format!(
                "expected {} channel values for {h}x{w}, got {}",
                2 * h * w,
                channels.len()
            )));
        }
        let (re, im) = channels.split_at(h * w);
        let data = re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect();
        Self::new(h, w, domain, data)
    }

    /// Real/imaginary parts as a `[2, h, w]` row-major buffer.
    pub fn to_channels(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|z| z.re)
            .chain(self.data.iter().map(|z| z.im))
            .collect()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.w + col]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|z| *z *= s);
        out
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Self, s: f64) -> Result<Self> {
        self.check_same(other)?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
        Ok(out)
    }

    /// Elementwise complex product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same_dims(other)?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
        Ok(out)
    }

    /// Maximum absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        self.check_same_dims(other)?;
        if self.domain != other.domain {
            return Err(Error::Contract(format!(
                "mixing {:?} and {:?} arrays",
                self.domain, other.domain
            )));
        }
        Ok(())
    }
}

/// Per-coil stack of equally sized complex arrays in one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilStack {
    coils: Vec<ComplexImage>,
}

impl CoilStack {
    pub fn new(coils: Vec<ComplexImage>) -> Result<Self> {
        let Some(first) = coils.first() else {
            return Err(Error::Dimension("coil stack needs at least one coil".into()));
        };
        for c in &coils[1..] {
            first.check_same_dims(c)?;
            if c.domain() != first.domain() {
                return Err(Error::Contract("coil stack mixes domains".into()));
            }
        }
        Ok(Self { coils })
    }

    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.coils[0].dims()
    }

    pub fn domain(&self) -> Domain {
        self.coils[0].domain()
    }

    pub fn coils(&self) -> &[ComplexImage] {
        &self.coils
    }

    pub fn coil(&self, c: usize) -> &ComplexImage {
        &self.coils[c]
    }

    pub fn into_coils(self) -> Vec<ComplexImage> {
        self.coils
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.coils
            .iter()
            .zip(&other.coils)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Coil sensitivities normalized to unit root-sum-of-squares at every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilMaps {
    maps: CoilStack,
}

impl CoilMaps {
    pub const RSS_TOL: f64 = 1e-9;

    /// Validates normalization of already normalized maps.
    pub fn new(maps: Vec<ComplexImage>) -> Result<Self> {
        let maps = CoilStack::new(maps)?;
        let (h, w) = maps.dims();
        for k in 0..h * w {
            let rss: f64 = maps.coils().iter().map(|c| c.data()[k].norm_sqr()).sum::<f64>().sqrt();
            if (rss - 1.0).abs() > Self::RSS_TOL {
                return Err(Error::Contract(format!(
                    "coil maps have root-sum-of-squares {rss} at pixel {k}"
                )));
            }
        }
        Ok(Self { maps })
    }

    /// Divides raw sensitivities by their root-sum-of-squares.
    pub fn normalized(raw: Vec<ComplexImage>) -> Result<Self> {
        let mut maps = CoilStack::new(raw)?;
        let (h, w) = maps.dims();
        for k in 0..h * w {
            let rss: f64 = maps.coils.iter().map(|c| c.data[k].norm_sqr()).sum::<f64>().sqrt();
            if rss <= 0.0 || !rss.is_finite() {
                return Err(Error::Contract(format!("coil maps vanish at pixel {k}")));
            }
            for c in maps.coils.iter_mut() {
                c.data[k] /= rss;
            }
        }
        Ok(Self { maps })
    }

    /// Single coil with unit sensitivity.
    pub fn unit(h: usize, w: usize) -> Self {
        let mut one = ComplexImage::zeros(h, w, Domain::Image);
        one.data.iter_mut().for_each(|z| *z = Complex64::new(1.0, 0.0));
        Self {
            maps: CoilStack { coils: vec![one] },
        }
    }

    pub fn n_coils(&self) -> usize {
        self.maps.n_coils()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.maps.dims()
    }

    pub fn maps(&self) -> &[ComplexImage] {
        self.maps.coils()
    }

    pub fn as_stack(&self) -> &CoilStack {
        &self.maps
    }
}
