use mrdiff_core::denoiser::DenoiserConfig;
use mrdiff_core::io::{load_checkpoint, save_checkpoint};
use mrdiff_core::phantom::{simulate_slice, SliceSpec};
use mrdiff_core::physics::{fft2c, CoilMaps, ComplexImage, MaskKind, SamplingMask};
use mrdiff_core::selfsup::{
    split_mask, ss_loss, train_loop, train_step, Acquisition, TrainConfig, TrainSample, Trainer,
    TRACE_FILE,
};
use mrdiff_core::tensor::{AdamConfig, AdamState};
use mrdiff_core::Error;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(variant: usize) -> SliceSpec {
    SliceSpec {
        h: 16,
        w: 16,
        variant,
        contrasts: 1,
        coils: 1,
        accel: 2.0,
        mask_seed: variant as u64,
        coil_seed: 0,
    }
}

fn dataset(n: usize) -> Vec<Acquisition> {
    (0..n).map(|v| simulate_slice(&spec(v)).unwrap().1).collect()
}

fn tiny_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        denoiser: DenoiserConfig {
            channels: 4,
            blocks: 1,
            tokens: 2,
            contrasts: 1,
        },
        seed: 3,
        ckpt_every: 0,
        ..TrainConfig::default()
    }
}

fn random_mask(h: usize, w: usize, count: usize, seed: u64) -> SamplingMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![false; h * w];
    let mut placed = 0;
    while placed < count {
        let i = rng.random_range(0..h * w);
        if !bits[i] {
            bits[i] = true;
            placed += 1;
        }
    }
    SamplingMask::new(h, w, bits, MaskKind::Acquired).unwrap()
}

#[test]
fn split_of_a_thousand_points() {
    let m = random_mask(40, 40, 1000, 1);
    let (r, p) = split_mask(&m, 0.05, 9).unwrap();
    assert_eq!((r.count(), p.count()), (50, 950));
    assert!(r.is_disjoint(&p));
    assert_eq!(r.union(&p).bits(), m.bits());
    assert_eq!((r.kind, p.kind), (MaskKind::Loss, MaskKind::Conditioning));
}

#[test]
fn split_partitions_over_many_seeds() {
    let m = random_mask(32, 32, 256, 2);
    let want = (0.05f64 * 256.0).round() as usize;
    for seed in 0..1000 {
        let (r, p) = split_mask(&m, 0.05, seed).unwrap();
        assert_eq!(r.count(), want);
        assert!(r.is_disjoint(&p));
        assert_eq!(r.union(&p).bits(), m.bits());
    }
    let (a, _) = split_mask(&m, 0.05, 1).unwrap();
    let (b, _) = split_mask(&m, 0.05, 1).unwrap();
    let (c, _) = split_mask(&m, 0.05, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn split_guards() {
    let few = random_mask(8, 8, 19, 3);
    assert!(matches!(split_mask(&few, 0.05, 0), Err(Error::Contract(_))));
    // 20 points at 1% rounds to an empty loss set
    let twenty = random_mask(8, 8, 20, 3);
    assert!(matches!(split_mask(&twenty, 0.01, 0), Err(Error::Contract(_))));
    for rho in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(matches!(split_mask(&twenty, rho, 0), Err(Error::Config(_))));
    }
}

#[test]
fn sample_fields_are_consistent() {
    let acq = &dataset(1)[0];
    let s = TrainSample::new(acq, 0.05, 4).unwrap();
    assert!(s.mask_loss.is_disjoint(&s.mask_cond));
    assert_eq!(s.mask_loss.union(&s.mask_cond).bits(), acq.mask.bits());
    for (k, &b) in s.y_p.coil(0).data().iter().zip(s.mask_cond.bits()) {
        if !b {
            assert_eq!(*k, Complex64::new(0.0, 0.0));
        }
    }
    assert!(s.x_u.max_abs_diff(&acq.zero_filled().unwrap()) < 1e-15);
}

#[test]
fn loss_examples() {
    let coils = CoilMaps::unit(2, 2);
    let x = ComplexImage::new(
        2,
        2,
        mrdiff_core::physics::Domain::Image,
        vec![
            Complex64::new(1.0, 0.5),
            Complex64::new(-0.5, 0.0),
            Complex64::new(0.25, -1.0),
            Complex64::new(2.0, 0.0),
        ],
    )
    .unwrap();
    let y = ComplexImage::from_real(2, 2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
    let mask = SamplingMask::new(2, 2, vec![true, false, false, true], MaskKind::Loss).unwrap();
    assert_eq!(ss_loss(&x, &x, &coils, &mask).unwrap(), 0.0);
    assert_eq!(ss_loss(&x, &y, &coils, &SamplingMask::empty(2, 2)).unwrap(), 0.0);

    // hand computation of the 2x2 centered transform on the two masked entries
    let kx = fft2c(&x).unwrap();
    let ky = fft2c(&y).unwrap();
    let d0 = kx.data()[0] - ky.data()[0];
    let d3 = kx.data()[3] - ky.data()[3];
    let want = (d0.re.abs() + d0.im.abs() + d3.re.abs() + d3.im.abs()) / 2.0;
    let got = ss_loss(&y, &x, &coils, &mask).unwrap();
    assert!((got - want).abs() < 1e-12);

    // for a 2x2 grid the transform is (x00 + x01 + x10 + x11)/2 at index 3
    let sum: Complex64 = x.data().iter().sum::<Complex64>() / 2.0;
    assert!((kx.data()[3] - sum).norm() < 1e-12);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let acq = &dataset(1)[0];
    let cfg = tiny_config(1);
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    let before = tr.params.params().clone();
    let sample = TrainSample::new(acq, 0.05, 0).unwrap();
    let eps = mrdiff_core::diffusion::gaussian_image(16, 16, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let mut opt = AdamState::new(tr.params.params());
    let adam = AdamConfig {
        lr: 0.0,
        ..AdamConfig::default()
    };
    let sched = tr.schedule().clone();
    let loss = train_step(&sample, 500, &eps, &mut tr.params, &mut opt, &adam, &sched).unwrap();
    assert!(loss > 0.0 && loss.is_finite());
    assert_eq!(tr.params.params().tensors(), before.tensors());
}

#[test]
fn training_is_bit_reproducible() {
    let data = dataset(2);
    let run = || {
        let mut tr = Trainer::new(tiny_config(5)).unwrap();
        let trace = train_loop(&data, &mut tr, None).unwrap();
        (trace, tr.params.params().clone())
    };
    let (t1, p1) = run();
    let (t2, p2) = run();
    assert_eq!(t1.len(), 5);
    assert_eq!(
        t1.iter().map(|x| x.1.to_bits()).collect::<Vec<_>>(),
        t2.iter().map(|x| x.1.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(p1.tensors(), p2.tensors());
}

#[test]
fn resume_reproduces_the_uninterrupted_trace() {
    let data = dataset(3);
    let dir = tempfile::tempdir().unwrap();

    let mut full = Trainer::new(tiny_config(8)).unwrap();
    let whole = train_loop(&data, &mut full, None).unwrap();

    let mut first = Trainer::new(tiny_config(4)).unwrap();
    train_loop(&data, &mut first, None).unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(resumed.step, 4);
    resumed.config.steps = 8;
    let tail = train_loop(&data, &mut resumed, None).unwrap();

    let bits = |v: &[(u64, f64)]| v.iter().map(|(s, l)| (*s, l.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&tail), bits(&whole[4..]));
    assert_eq!(resumed.params.params().tensors(), full.params.params().tensors());
}

#[test]
fn train_loop_writes_trace_and_checkpoints() {
    let data = dataset(2);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(4);
    cfg.ckpt_every = 2;
    let mut tr = Trainer::new(cfg).unwrap();
    train_loop(&data, &mut tr, Some(dir.path())).unwrap();
    let trace = std::fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 4);
    for (i, line) in lines.iter().enumerate() {
        let (step, loss) = line.split_once('\t').unwrap();
        assert_eq!(step.parse::<u64>().unwrap(), i as u64);
        assert!(loss.parse::<f64>().unwrap() > 0.0);
    }
    for name in ["ckpt_0000002.ckpt", "ckpt_0000004.ckpt", "latest.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn empty_dataset_is_a_configuration_error() {
    let mut tr = Trainer::new(tiny_config(1)).unwrap();
    assert!(matches!(train_loop(&[], &mut tr, None), Err(Error::Config(_))));
}

#[test]
fn short_training_halves_the_loss() {
    // 200 steps on a 32x32 phantom: running mean falls by half from the
    // first ten steps
    let acq: Vec<Acquisition> = (0..2)
        .map(|v| {
            simulate_slice(&SliceSpec {
                h: 32,
                w: 32,
                accel: 4.0,
                mask_seed: 10 + v as u64,
                ..spec(v)
            })
            .unwrap()
            .1
        })
        .collect();
    let mut cfg = tiny_config(200);
    cfg.denoiser = DenoiserConfig {
        channels: 8,
        blocks: 1,
        tokens: 4,
        contrasts: 1,
    };
    let mut tr = Trainer::new(cfg).unwrap();
    let trace = train_loop(&acq, &mut tr, None).unwrap();
    let first = trace[..10].iter().map(|x| x.1).sum::<f64>() / 10.0;
    let last = trace[150..].iter().map(|x| x.1).sum::<f64>() / 50.0;
    assert!(last <= 0.5 * first, "first {first}, last {last}");
}
