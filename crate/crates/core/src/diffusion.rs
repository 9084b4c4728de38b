//! Linear noise schedule, forward noising of training inputs, and the
//! low-noise k-space conditioning used at inference.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::physics::{coil_kspace, CoilMaps, CoilStack, ComplexImage, Domain};

/// Variance of the conditioning noise injected into the zero-filled image.
pub const LOW_NOISE_VARIANCE: f64 = 0.1;

/// Per-step tables, 1-indexed by timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[self.idx(t)]
        }
    }

    /// Posterior standard deviation `sqrt((1 - abar_{t-1}) / (1 - abar_t) * beta_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[self.idx(t)]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Linear beta schedule with inclusive endpoints.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            ((1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
        })
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

/// The defaults: 1000 steps from 1e-4 to 0.02.
pub fn default_schedule() -> NoiseSchedule {
    build_schedule(1000, 1e-4, 0.02).expect("default schedule is valid")
}

/// Complex Gaussian image with independent real and imaginary parts, each of
/// the given variance.
pub fn gaussian_image<R: Rng + ?Sized>(h: usize, w: usize, variance: f64, rng: &mut R) -> ComplexImage {
    let normal = Normal::new(0.0, variance.sqrt()).expect("non-negative variance");
    let data = (0..h * w)
        .map(|_| Complex64::new(normal.sample(rng), normal.sample(rng)))
        .collect();
    ComplexImage::new(h, w, Domain::Image, data).expect("sized buffer")
}

/// `x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps`.
pub fn forward_noise(
    x: &ComplexImage,
    t: usize,
    eps: &ComplexImage,
    sched: &NoiseSchedule,
) -> Result<ComplexImage> {
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    x.scaled(ab.sqrt()).add_scaled(eps, (1.0 - ab).sqrt())
}

/// Per-coil k-space of the zero-filled image noised to level `ts`:
/// `F(C (sqrt(abar) x_u + sqrt(1 - abar) eps_low))`.
pub fn lownoise_kspace(
    x_u: &ComplexImage,
    coils: &CoilMaps,
    ts: usize,
    eps_low: &ComplexImage,
    sched: &NoiseSchedule,
) -> Result<CoilStack> {
    sched.check_timestep(ts)?;
    let ab = sched.alpha_bar(ts);
    let noised = x_u.scaled(ab.sqrt()).add_scaled(eps_low, (1.0 - ab).sqrt())?;
    coil_kspace(&noised, coils)
}

/// `count` evenly spaced descending timesteps starting at `steps`.
pub fn select_timesteps(steps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > steps {
        return Err(Error::Config(format!(
            "cannot select {count} reverse steps out of {steps}"
        )));
    }
    Ok((0..count).map(|k| steps * (count - k) / count).collect())
}
