//! Few-step conditional sampling from the zero-filled image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{denoise, DcReference, DenoiserParams};
use crate::diffusion::{gaussian_image, lownoise_kspace, select_timesteps, NoiseSchedule, LOW_NOISE_VARIANCE};
use crate::error::{Error, Result};
use crate::selfsup::Acquisition;
use crate::physics::{coil_kspace, ComplexImage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerOptions {
    /// Number of reverse steps `S`.
    pub steps: usize,
    pub seed: u64,
    /// Add `sigma_ts * z` between steps.
    pub inject_noise: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            steps: 5,
            seed: 0,
            inject_noise: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: ComplexImage,
    /// Data-consistency reference used by the last reverse step.
    pub final_reference: DcReference,
    pub timesteps: Vec<usize>,
}

/// Runs `S` reverse steps starting from the zero-filled image.
///
/// The step at `ts` produces the iterate for the next selected timestep, so its
/// data-consistency reference is the zero-filled image noised (variance 0.1)
/// to that next level. The last step targets level 0 and uses the measured
/// k-space itself. `sigma_ts * z` is added after every step but the last.
pub fn reconstruct(
    acq: &Acquisition,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
) -> Result<Reconstruction> {
    let cfg = params.config();
    if acq.label.contrast.len() != cfg.contrasts {
        return Err(Error::Checkpoint(format!(
            "network expects {} contrasts, acquisition label has {}",
            cfg.contrasts,
            acq.label.contrast.len()
        )));
    }
    let timesteps = select_timesteps(sched.steps(), opts.steps)?;
    let (h, w) = acq.mask.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let x_u = acq.zero_filled()?;
    let mut x = x_u.clone();
    let mut last_ref = None;
    for (k, &ts) in timesteps.iter().enumerate() {
        let y_ts = match timesteps.get(k + 1) {
            Some(&next) => {
                let eps_low = gaussian_image(h, w, LOW_NOISE_VARIANCE, &mut rng);
                lownoise_kspace(&x_u, &acq.coils, next, &eps_low, sched)?
            }
            None => coil_kspace(&x_u, &acq.coils)?,
        };
        let reference = DcReference::new(y_ts, acq.mask.clone(), acq.coils.clone())?;
        x = denoise(params, &x, &reference, ts, &acq.label)?;
        let last = k + 1 == timesteps.len();
        if !last && opts.inject_noise {
            let z = gaussian_image(h, w, 1.0, &mut rng);
            x = x.add_scaled(&z, sched.sigma(ts))?;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("reconstruction diverged at ts={ts}")));
        }
        last_ref = Some(reference);
    }
    Ok(Reconstruction {
        image: x,
        final_reference: last_ref.expect("at least one step"),
        timesteps,
    })
}
