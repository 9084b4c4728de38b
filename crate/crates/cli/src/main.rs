//! `mrdiff`: simulate undersampled phantom data, train the self-supervised
//! denoiser, reconstruct, and score reconstructions.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical or
//! checkpoint failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mrdiff_core::dataset::{write_dataset, Dataset, DatasetSpec};
use mrdiff_core::denoiser::DenoiserConfig;
use mrdiff_core::io::{load_checkpoint, load_image, save_image};
use mrdiff_core::metrics::{psnr, ssim, RealImage};
use mrdiff_core::sampler::{reconstruct, SamplerOptions};
use mrdiff_core::selfsup::{train_loop, TrainConfig, Trainer, TRACE_FILE};
use mrdiff_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mrdiff", version, about = "Self-supervised diffusion MRI reconstruction")]
struct Cli {
    /// Print the resolved settings as key=value lines and exit.
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate undersampled Shepp-Logan acquisitions.
    Simulate(SimulateArgs),
    /// Train the denoiser on a simulated dataset.
    Train(TrainArgs),
    /// Reconstruct every slice of a dataset with a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// Score reconstructions and the zero-filled baseline against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Image size as H,W.
    #[arg(long, value_parser = parse_size, default_value = "32,32")]
    size: (usize, usize),
    #[arg(long, default_value_t = 1)]
    coils: usize,
    /// Acceleration R.
    #[arg(long, default_value_t = 4.0)]
    accel: f64,
    #[arg(long, default_value_t = 4)]
    slices: usize,
    /// Length of the contrast one-hot label.
    #[arg(long, default_value_t = 1)]
    contrasts: usize,
    /// Phantom variant of the first slice.
    #[arg(long, default_value_t = 0)]
    first_variant: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Total number of steps, counting any already done by a resumed run.
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    /// Unrolled blocks J [default: 2].
    #[arg(long)]
    blocks: Option<usize>,
    /// Feature channels n [default: 16].
    #[arg(long)]
    channels: Option<usize>,
    /// Local latent tokens L [default: 16].
    #[arg(long)]
    tokens: Option<usize>,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    #[arg(long, default_value_t = 0)]
    ckpt_every: u64,
    #[arg(long)]
    out: PathBuf,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Adam learning rate [default: 0.002].
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of acquired points withheld for the loss [default: 0.05].
    #[arg(long)]
    rho: Option<f64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory with the undersampled slices.
    #[arg(long)]
    input: PathBuf,
    /// Reverse diffusion steps S.
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the noise injected between reverse steps.
    #[arg(long)]
    no_noise: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of reconstructions written by `reconstruct`.
    #[arg(long)]
    recon: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(',').ok_or_else(|| format!("expected H,W, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size `{s}`"));
    Ok((parse(h)?, parse(w)?))
}

type Settings = Vec<(&'static str, String)>;

fn print_settings(settings: &Settings) {
    for (k, v) in settings {
        println!("{k}={v}");
    }
}

fn simulate(a: &SimulateArgs, dump: bool) -> Result<()> {
    let spec = DatasetSpec {
        h: a.size.0,
        w: a.size.1,
        coils: a.coils,
        accel: a.accel,
        slices: a.slices,
        contrasts: a.contrasts,
        seed: a.seed,
        first_variant: a.first_variant,
    };
    if dump {
        print_settings(&vec![
            ("command", "simulate".into()),
            ("size", format!("{},{}", spec.h, spec.w)),
            ("coils", spec.coils.to_string()),
            ("accel", spec.accel.to_string()),
            ("slices", spec.slices.to_string()),
            ("contrasts", spec.contrasts.to_string()),
            ("first_variant", spec.first_variant.to_string()),
            ("seed", spec.seed.to_string()),
            ("out", a.out.display().to_string()),
        ]);
        return Ok(());
    }
    let ds = write_dataset(&a.out, &spec)?;
    println!("wrote {} slices to {}", ds.len(), a.out.display());
    Ok(())
}

fn check_same<T: PartialEq + std::fmt::Debug>(what: &str, flag: Option<T>, ckpt: T) -> Result<()> {
    match flag {
        Some(v) if v != ckpt => Err(Error::Checkpoint(format!(
            "--{what} {v:?} disagrees with the checkpoint value {ckpt:?}"
        ))),
        _ => Ok(()),
    }
}

fn train(a: &TrainArgs, dump: bool) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let c = &ck.config;
            check_same("blocks", a.blocks, c.denoiser.blocks)?;
            check_same("channels", a.channels, c.denoiser.channels)?;
            check_same("tokens", a.tokens, c.denoiser.tokens)?;
            check_same("seed", a.seed, c.seed)?;
            check_same("lr", a.lr, c.adam.lr)?;
            check_same("rho", a.rho, c.rho)?;
            Trainer::from_checkpoint(ck)?
        }
        None => {
            let mut cfg = TrainConfig {
                denoiser: DenoiserConfig {
                    channels: a.channels.unwrap_or(16),
                    blocks: a.blocks.unwrap_or(2),
                    tokens: a.tokens.unwrap_or(16),
                    contrasts: ds.spec.contrasts,
                },
                seed: a.seed.unwrap_or(0),
                rho: a.rho.unwrap_or(0.05),
                ..TrainConfig::default()
            };
            if let Some(lr) = a.lr {
                cfg.adam.lr = lr;
            }
            Trainer::new(cfg)?
        }
    };
    if trainer.config.denoiser.contrasts != ds.spec.contrasts {
        return Err(Error::Checkpoint(format!(
            "network expects {} contrasts, dataset has {}",
            trainer.config.denoiser.contrasts, ds.spec.contrasts
        )));
    }
    trainer.config.steps = a.steps;
    trainer.config.ckpt_every = a.ckpt_every;
    if trainer.step > a.steps {
        return Err(Error::Config(format!(
            "checkpoint is already at step {}, past --steps {}",
            trainer.step, a.steps
        )));
    }
    let c = &trainer.config;
    if dump {
        print_settings(&vec![
            ("command", "train".into()),
            ("data", a.data.display().to_string()),
            ("out", a.out.display().to_string()),
            ("start_step", trainer.step.to_string()),
            ("steps", c.steps.to_string()),
            ("blocks", c.denoiser.blocks.to_string()),
            ("channels", c.denoiser.channels.to_string()),
            ("tokens", c.denoiser.tokens.to_string()),
            ("contrasts", c.denoiser.contrasts.to_string()),
            ("lr", c.adam.lr.to_string()),
            ("beta1", c.adam.beta1.to_string()),
            ("beta2", c.adam.beta2.to_string()),
            ("rho", c.rho.to_string()),
            ("diffusion_steps", c.diffusion_steps.to_string()),
            ("beta_start", c.beta_start.to_string()),
            ("beta_end", c.beta_end.to_string()),
            ("ckpt_every", c.ckpt_every.to_string()),
            ("seed", c.seed.to_string()),
        ]);
        return Ok(());
    }
    let data = ds.acquisitions()?;
    let start = Instant::now();
    let trace = train_loop(&data, &mut trainer, Some(&a.out))?;
    let secs = start.elapsed().as_secs_f64();
    println!("steps {} to {} in {secs:.1}s", trace.first().map_or(trainer.step, |t| t.0), trainer.step);
    if !trace.is_empty() {
        let tail = &trace[trace.len().saturating_sub(100)..];
        let mean = tail.iter().map(|t| t.1).sum::<f64>() / tail.len() as f64;
        println!("mean loss over last {} steps {mean:.6}", tail.len());
    }
    println!("trace {}", a.out.join(TRACE_FILE).display());
    Ok(())
}

fn recon_name(name: &str) -> String {
    format!("{name}.mrk")
}

fn reconstruct_cmd(a: &ReconstructArgs, dump: bool) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let ds = Dataset::open(&a.input)?;
    let sched = ck.config.schedule()?;
    if dump {
        print_settings(&vec![
            ("command", "reconstruct".into()),
            ("ckpt", a.ckpt.display().to_string()),
            ("input", a.input.display().to_string()),
            ("out", a.out.display().to_string()),
            ("steps", a.steps.to_string()),
            ("seed", a.seed.to_string()),
            ("inject_noise", (!a.no_noise).to_string()),
            ("diffusion_steps", ck.config.diffusion_steps.to_string()),
        ]);
        return Ok(());
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    for k in 0..ds.len() {
        let acq = ds.acquisition(k)?;
        let opts = SamplerOptions {
            steps: a.steps,
            seed: a.seed.wrapping_add(k as u64),
            inject_noise: !a.no_noise,
        };
        let start = Instant::now();
        let rec = reconstruct(&acq, &ck.params, &sched, &opts)?;
        let secs = start.elapsed().as_secs_f64();
        save_image(&a.out.join(recon_name(&ds.slices[k].name)), &rec.image)?;
        println!("{}\t{secs:.6}s", ds.slices[k].name);
    }
    Ok(())
}

fn count_recons(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "mrk"))
        .count())
}

fn evaluate(a: &EvaluateArgs, dump: bool) -> Result<()> {
    if dump {
        print_settings(&vec![
            ("command", "evaluate".into()),
            ("recon", a.recon.display().to_string()),
            ("data", a.data.display().to_string()),
            ("report", a.report.as_ref().map_or(String::new(), |p| p.display().to_string())),
        ]);
        return Ok(());
    }
    let ds = Dataset::open(&a.data)?;
    let found = count_recons(&a.recon)?;
    if found != ds.len() {
        return Err(Error::Config(format!(
            "{} holds {found} reconstructions, dataset has {} slices",
            a.recon.display(),
            ds.len()
        )));
    }
    let mut report = String::from("slice\tpsnr\tssim\tzf_psnr\tzf_ssim\n");
    let mut sums = [0.0; 4];
    for k in 0..ds.len() {
        let name = &ds.slices[k].name;
        let truth = RealImage::magnitude(&ds.truth(k)?);
        let recon = RealImage::magnitude(&load_image(&a.recon.join(recon_name(name)))?);
        let zf = RealImage::magnitude(&ds.acquisition(k)?.zero_filled()?);
        let row = [
            psnr(&recon, &truth)?,
            ssim(&recon, &truth)?,
            psnr(&zf, &truth)?,
            ssim(&zf, &truth)?,
        ];
        report.push_str(name);
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
            report.push_str(&format!("\t{v:.6}"));
        }
        report.push('\n');
    }
    report.push_str("mean");
    for s in sums {
        report.push_str(&format!("\t{:.6}", s / ds.len() as f64));
    }
    report.push('\n');
    print!("{report}");
    if let Some(path) = &a.report {
        fs::write(path, &report).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::Checkpoint(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let dump = cli.dump_config;
    let res = match &cli.command {
        Command::Simulate(a) => simulate(a, dump),
        Command::Train(a) => train(a, dump),
        Command::Reconstruct(a) => reconstruct_cmd(a, dump),
        Command::Evaluate(a) => evaluate(a, dump),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
