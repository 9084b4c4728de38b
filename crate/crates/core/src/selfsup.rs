//! Self-supervised training from undersampled k-space only.
//!
//! Each step withholds a random fraction of the acquired points (`M_r`) and
//! conditions the network on the rest (`M_p`). The loss is the L1 distance
//! between the k-space of the estimate and of the zero-filled image at the
//! withheld points.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{denoiser_forward, ConditioningLabel, DcReference, DenoiserConfig, DenoiserParams};
use crate::diffusion::{build_schedule, forward_noise, gaussian_image, NoiseSchedule};
use crate::error::{Error, Result};
use crate::io::{save_checkpoint, Checkpoint};
use crate::physics::{
    coil_kspace, encode, zero_filled, CoilKSpaceMap, CoilMaps, CoilStack, ComplexImage, MaskKind,
    SamplingMask,
};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};

/// Smallest acquisition mask that can be split.
pub const MIN_SPLIT_POINTS: usize = 20;

/// One undersampled acquisition, as stored in a dataset.
#[derive(Clone, Debug)]
pub struct Acquisition {
    /// Measured k-space, zero off `mask`.
    pub kspace: CoilStack,
    pub mask: SamplingMask,
    pub coils: CoilMaps,
    pub label: ConditioningLabel,
}

impl Acquisition {
    pub fn zero_filled(&self) -> Result<ComplexImage> {
        zero_filled(&self.kspace, &self.coils, &self.mask)
    }
}

/// One training instance after splitting the acquisition mask.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// Zero-filled image from the full acquisition `M`.
    pub x_u: ComplexImage,
    /// Measurements restricted to `M_p`.
    pub y_p: CoilStack,
    pub mask: SamplingMask,
    pub mask_loss: SamplingMask,
    pub mask_cond: SamplingMask,
    pub coils: CoilMaps,
    pub label: ConditioningLabel,
    /// Zero-filled image from `y_p`.
    pub x_up: ComplexImage,
}

impl TrainSample {
    pub fn new(acq: &Acquisition, rho: f64, split_seed: u64) -> Result<Self> {
        let (mask_loss, mask_cond) = split_mask(&acq.mask, rho, split_seed)?;
        let x_u = acq.zero_filled()?;
        let masked: Vec<ComplexImage> = acq
            .kspace
            .coils()
            .iter()
            .map(|k| {
                let mut k = k.clone();
                for (z, &b) in k.data_mut().iter_mut().zip(mask_cond.bits()) {
                    if !b {
                        *z = num_complex::Complex64::new(0.0, 0.0);
                    }
                }
                k
            })
            .collect();
        let y_p = CoilStack::new(masked)?;
        let x_up = zero_filled(&y_p, &acq.coils, &mask_cond)?;
        Ok(Self {
            x_u,
            y_p,
            mask: acq.mask.clone(),
            mask_loss,
            mask_cond,
            coils: acq.coils.clone(),
            label: acq.label.clone(),
            x_up,
        })
    }
}

/// Splits `mask` into a loss mask holding `round(rho * |M|)` acquired points
/// chosen uniformly without replacement and the complementary conditioning
/// mask.
pub fn split_mask(mask: &SamplingMask, rho: f64, seed: u64) -> Result<(SamplingMask, SamplingMask)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("loss fraction must lie in (0, 1), got {rho}")));
    }
    let acquired: Vec<usize> = mask
        .bits()
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    if acquired.len() < MIN_SPLIT_POINTS {
        return Err(Error::Contract(format!(
            "mask has {} acquired points, need at least {MIN_SPLIT_POINTS}",
            acquired.len()
        )));
    }
    let count = (rho * acquired.len() as f64).round() as usize;
    if count == 0 || count >= acquired.len() {
        return Err(Error::Contract(format!(
            "loss fraction {rho} of {} points leaves an empty side",
            acquired.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = mask.dims();
    let mut loss = vec![false; h * w];
    for i in index::sample(&mut rng, acquired.len(), count) {
        loss[acquired[i]] = true;
    }
    let cond: Vec<bool> = mask.bits().iter().zip(&loss).map(|(&m, &l)| m && !l).collect();

    let mut m_r = SamplingMask::new(h, w, loss, MaskKind::Loss)?;
    let mut m_p = SamplingMask::new(h, w, cond, MaskKind::Conditioning)?;
    m_r.seed = seed;
    m_p.seed = seed;
    debug_assert!(m_r.is_disjoint(&m_p) && m_r.union(&m_p).bits() == mask.bits());
    Ok((m_r, m_p))
}

fn loss_normalizer(coils: &CoilMaps, mask_loss: &SamplingMask) -> f64 {
    (mask_loss.count() * coils.n_coils()) as f64
}

/// `sum_c |M_r (F(C x_u) - F(C x_hat))|_1 / (|M_r| n_coils)` with the L1 norm
/// taken over real and imaginary parts.
pub fn ss_loss(
    x_hat: &ComplexImage,
    x_u: &ComplexImage,
    coils: &CoilMaps,
    mask_loss: &SamplingMask,
) -> Result<f64> {
    let norm = loss_normalizer(coils, mask_loss);
    if norm == 0.0 {
        return Ok(0.0);
    }
    let target = encode(x_u, coils, mask_loss)?;
    let pred = encode(x_hat, coils, mask_loss)?;
    let mut total = 0.0;
    for (t, p) in target.coils().iter().zip(pred.coils()) {
        for (a, b) in t.data().iter().zip(p.data()) {
            let d = a - b;
            total += d.re.abs() + d.im.abs();
        }
    }
    Ok(total / norm)
}

/// Records [`ss_loss`] on a graph, with `x_hat` a `[2, h, w]` node.
pub fn ss_loss_graph(
    g: &mut Graph,
    x_hat: Var,
    x_u: &ComplexImage,
    coils: &CoilMaps,
    mask_loss: &SamplingMask,
) -> Result<Var> {
    let (h, w) = x_u.dims();
    let n_coils = coils.n_coils();
    let target: Vec<f64> = coil_kspace(x_u, coils)?
        .coils()
        .iter()
        .flat_map(ComplexImage::to_channels)
        .collect();
    let target = g.constant(&Tensor::new(&[n_coils, 2, h, w], target)?);
    let pred = g.apply_linear(Rc::new(CoilKSpaceMap::new(coils.clone())), x_hat)?;
    let diff = g.sub(target, pred)?;
    let m = g.constant(&Tensor::new(&[1, 1, h, w], mask_loss.to_f64())?);
    let masked = g.mul(diff, m)?;
    let abs = g.abs(masked);
    let total = g.sum(abs);
    let norm = loss_normalizer(coils, mask_loss);
    Ok(g.scale(total, if norm == 0.0 { 0.0 } else { 1.0 / norm }))
}

/// Loss of the denoiser on one sample at timestep `t` with noise `eps`.
pub fn sample_loss(
    g: &mut Graph,
    params: &DenoiserParams,
    sample: &TrainSample,
    t: usize,
    eps: &ComplexImage,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let x_t = forward_noise(&sample.x_up, t, eps, sched)?;
    let reference = DcReference::new(sample.y_p.clone(), sample.mask_cond.clone(), sample.coils.clone())?;
    let x_hat = denoiser_forward(g, params, &x_t, &reference, t, &sample.label)?;
    ss_loss_graph(g, x_hat, &sample.x_u, &sample.coils, &sample.mask_loss)
}

/// Forward, backward and one Adam update. Returns the loss before the update.
pub fn train_step(
    sample: &TrainSample,
    t: usize,
    eps: &ComplexImage,
    params: &mut DenoiserParams,
    opt: &mut AdamState,
    adam: &AdamConfig,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = sample_loss(&mut g, params, sample, t, eps, sched)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let grads = g.backward(loss)?.for_params(params.params());
    if let Some(bad) = grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} is not finite",
            params.params().name(params.params().ids().nth(bad).expect("index"))
        )));
    }
    adam_step(params.params_mut(), &grads, opt, adam)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub adam: AdamConfig,
    /// Fraction of acquired points withheld for the loss.
    pub rho: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub denoiser: DenoiserConfig,
    pub seed: u64,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            adam: AdamConfig::default(),
            rho: 0.05,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            denoiser: DenoiserConfig::default(),
            seed: 0,
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.adam.lr.is_nan() || self.adam.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.adam.lr)));
        }
        self.denoiser.validate()?;
        build_schedule(self.diffusion_steps, self.beta_start, self.beta_end)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.diffusion_steps, self.beta_start, self.beta_end)
    }
}

/// Randomness consumed by one training step, derived from `(seed, step)` so a
/// resumed run draws exactly what an uninterrupted one would.
#[derive(Clone, Debug)]
pub struct StepDraw {
    pub sample_index: usize,
    pub t: usize,
    pub split_seed: u64,
    pub eps: ComplexImage,
}

pub fn step_draw(seed: u64, step: u64, dataset_len: usize, dims: (usize, usize), steps_t: usize) -> StepDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let t = rng.random_range(1..=steps_t);
    let split_seed = rng.random::<u64>();
    let eps = gaussian_image(dims.0, dims.1, 1.0, &mut rng);
    StepDraw {
        sample_index: (step % dataset_len as u64) as usize,
        t,
        split_seed,
        eps,
    }
}

/// Parameters, optimizer state and position of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: DenoiserParams,
    pub opt: AdamState,
    /// Index of the next step to run.
    pub step: u64,
    sched: NoiseSchedule,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = DenoiserParams::init(config.denoiser, config.seed)?;
        let opt = AdamState::new(params.params());
        let sched = config.schedule()?;
        Ok(Self {
            config,
            params,
            opt,
            step: 0,
            sched,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let Checkpoint {
            config,
            params,
            opt,
            step,
        } = ckpt;
        config.validate()?;
        let sched = config.schedule()?;
        Ok(Self {
            config,
            params,
            opt,
            step,
            sched,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            opt: self.opt.clone(),
            step: self.step,
        }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Runs the next step on `dataset`.
    pub fn step_once(&mut self, dataset: &[Acquisition]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let dims = dataset[0].mask.dims();
        let draw = step_draw(self.config.seed, self.step, dataset.len(), dims, self.sched.steps());
        let acq = &dataset[draw.sample_index];
        if acq.mask.dims() != dims {
            return Err(Error::Dimension("dataset slices differ in size".into()));
        }
        let sample = TrainSample::new(acq, self.config.rho, draw.split_seed)?;
        let loss = train_step(
            &sample,
            draw.t,
            &draw.eps,
            &mut self.params,
            &mut self.opt,
            &self.config.adam,
            &self.sched,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("step {}: {msg}", self.step)),
            other => other,
        })?;
        self.step += 1;
        Ok(loss)
    }
}

/// Path of the checkpoint written after `step` steps.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:07}.ckpt"))
}

pub const TRACE_FILE: &str = "loss_trace.txt";

/// Runs `trainer` until it has completed `config.steps` steps, returning the
/// `(step, loss)` trace of the steps executed here.
///
/// With an output directory, writes the loss trace, a checkpoint every
/// `ckpt_every` steps, the final checkpoint, and `latest.ckpt`. A trainer
/// resumed past step 0 appends to an existing trace.
pub fn train_loop(
    dataset: &[Acquisition],
    trainer: &mut Trainer,
    out_dir: Option<&Path>,
) -> Result<Vec<(u64, f64)>> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut trace_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRACE_FILE);
            let f = if trainer.step > 0 {
                OpenOptions::new().create(true).append(true).open(&path)
            } else {
                File::create(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };

    let mut trace = Vec::new();
    while trainer.step < trainer.config.steps {
        let step = trainer.step;
        let loss = trainer.step_once(dataset)?;
        trace.push((step, loss));
        if let Some((path, f)) = trace_file.as_mut() {
            writeln!(f, "{step}\t{loss}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = out_dir {
            let every = trainer.config.ckpt_every;
            if every > 0 && trainer.step.is_multiple_of(every) {
                save_checkpoint(&checkpoint_path(dir, trainer.step), &trainer.checkpoint())?;
            }
        }
    }
    if let Some((path, mut f)) = trace_file {
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        let ckpt = trainer.checkpoint();
        save_checkpoint(&checkpoint_path(dir, trainer.step), &ckpt)?;
        save_checkpoint(&dir.join("latest.ckpt"), &ckpt)?;
    }
    Ok(trace)
}
