//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed; the process
//! exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::rc::Rc;
use std::time::Instant;

use mrdiff_core::denoiser::layers::{attn_instance_norm, cross_attention, dense, modulated_conv};
use mrdiff_core::denoiser::{denoiser_forward, mapper_forward, ConditioningLabel, DcReference, DenoiserConfig, DenoiserParams};
use mrdiff_core::diffusion::{default_schedule, gaussian_image};
use mrdiff_core::io::load_checkpoint;
use mrdiff_core::phantom::{simulate_slice, synth_coils, SliceSpec};
use mrdiff_core::physics::{
    data_consistency, encode, fft2c, gen_gaussian_mask, zero_filled, CoilKSpaceMap, CoilMaps, CoilStack,
    ComplexImage, DcProjection, Domain, MaskKind, SamplingMask,
};
use mrdiff_core::sampler::{reconstruct, SamplerOptions};
use mrdiff_core::selfsup::split_mask;
use mrdiff_core::tensor::{finite_diff_check, finite_diff_check_sampled, GradCheck, Graph, ParamSet, Tensor, Var};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn run(&mut self, name: &str, limit_secs: f64, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match out {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if secs >= limit_secs {
            pass = false;
            detail = format!("{detail}; over the {limit_secs}s budget");
        }
        self.record(name, pass, &format!("{detail} [{secs:.1}s]"));
    }

    fn record(&mut self, name: &str, pass: bool, detail: &str) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), pass));
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_image(h: usize, w: usize, seed: u64) -> ComplexImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    ComplexImage::new(h, w, Domain::Image, data).unwrap()
}

fn rand_mask(h: usize, w: usize, p: f64, seed: u64) -> SamplingMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = (0..h * w).map(|_| rng.random_bool(p)).collect();
    SamplingMask::new(h, w, bits, MaskKind::Acquired).unwrap()
}

fn naive_fft2c(x: &ComplexImage) -> Vec<Complex64> {
    let (h, w) = x.dims();
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let phase = -2.0
                        * PI
                        * ((u as f64 - ch) * (r as f64 - ch) / h as f64
                            + (v as f64 - cw) * (c as f64 - cw) / w as f64);
                    acc += x.get(r, c) * Complex64::from_polar(1.0, phase);
                }
            }
            out[u * w + v] = acc / ((h * w) as f64).sqrt();
        }
    }
    out
}

fn physics() -> Outcome {
    let mut fft_err: f64 = 0.0;
    for seed in 0..3 {
        let x = rand_image(16, 16, seed);
        let got = fft2c(&x).unwrap();
        let want = naive_fft2c(&x);
        for (a, b) in got.data().iter().zip(&want) {
            fft_err = fft_err.max((a - b).norm());
        }
    }
    let mut adj_err: f64 = 0.0;
    for seed in 0..20 {
        let nc = 1 + (seed as usize % 3);
        let coils = synth_coils(16, 16, nc, seed).unwrap();
        let mask = rand_mask(16, 16, 0.4, seed);
        let x = rand_image(16, 16, seed + 100);
        let y = CoilStack::new(
            (0..nc)
                .map(|c| {
                    let k = rand_image(16, 16, seed + 200 + c as u64);
                    ComplexImage::new(16, 16, Domain::KSpace, k.data().to_vec()).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let ex = encode(&x, &coils, &mask).unwrap();
        let ehy = zero_filled(&y, &coils, &mask).unwrap();
        let lhs: Complex64 = ex
            .coils()
            .iter()
            .zip(y.coils())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| p * q.conj()).collect::<Vec<_>>())
            .sum();
        let rhs: Complex64 = x.data().iter().zip(ehy.data()).map(|(p, q)| p * q.conj()).sum();
        adj_err = adj_err.max((lhs - rhs).norm());
    }
    let mut dc_err: f64 = 0.0;
    let coils = CoilMaps::unit(16, 16);
    for seed in 0..20 {
        let mask = rand_mask(16, 16, 0.35, seed);
        let x = rand_image(16, 16, seed + 300);
        let x_ref = rand_image(16, 16, seed + 400);
        let once = data_consistency(&x, &x_ref, &coils, &mask).unwrap();
        let twice = data_consistency(&once, &x_ref, &coils, &mask).unwrap();
        dc_err = dc_err.max(once.max_abs_diff(&twice));
    }
    check(
        fft_err < 1e-9 && adj_err < 1e-9 && dc_err < 1e-10,
        format!("fft vs direct DFT {fft_err:.1e} (<1e-9), adjointness {adj_err:.1e} (<1e-9), DC idempotence {dc_err:.1e} (<1e-10)"),
    )
}

fn rt(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> mrdiff_core::Result<Var> {
    let w = g.constant(&rt(g.shape(y).to_vec().as_slice(), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn gradients() -> Outcome {
    let mut worst: Vec<(&str, GradCheck)> = Vec::new();
    // some parameters have exactly zero gradient (key biases under softmax
    // shift invariance); a 1e-5 step keeps the difference quotient's rounding
    // noise well below GRAD_FLOOR there
    let eps = 1e-5;

    let mut ps = ParamSet::new();
    let a = ps.add("a", rt(&[2, 3], 1));
    let mut bt = rt(&[2, 3], 2);
    bt.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    let b = ps.add("b", bt);
    let r = finite_diff_check(&ps, eps, |g, ps| {
        let (x, y) = (g.param(ps, a), g.param(ps, b));
        let p = g.mul(x, y)?;
        let q = g.div(p, y)?;
        let q = g.sub(q, x)?;
        let q = g.add(q, y)?;
        let r = g.leaky_relu(q, 0.2);
        let s = g.sqrt(y);
        let t = g.abs(x);
        let u = g.add(r, s)?;
        let u = g.add(u, t)?;
        let u = g.add_scalar(u, 0.3);
        let u = g.scale(u, 0.7);
        let u = g.square(u);
        Ok(g.sum(u))
    });
    worst.push(("elementwise", r.map_err(|e| e.to_string())?));

    let mut ps = ParamSet::new();
    let a = ps.add("a", rt(&[3, 4], 3));
    let b = ps.add("b", rt(&[4, 5], 4));
    let r = finite_diff_check(&ps, eps, |g, ps| {
        let (x, y) = (g.param(ps, a), g.param(ps, b));
        let m = g.matmul(x, y)?;
        let s = g.softmax_rows(m)?;
        let t = g.transpose(s)?;
        weighted_sum(g, t, 5)
    });
    worst.push(("matmul/softmax/transpose", r.map_err(|e| e.to_string())?));

    let mut ps = ParamSet::new();
    let x = ps.add("x", rt(&[2, 5, 4], 6));
    let k = ps.add("k", rt(&[3, 2, 3, 3], 7));
    let r = finite_diff_check(&ps, eps, |g, ps| {
        let (vx, vk) = (g.param(ps, x), g.param(ps, k));
        let y = g.conv2d(vx, vk)?;
        let mu = g.mean_axes(y, &[1, 2])?;
        let c = g.sub(y, mu)?;
        let c = g.reshape(c, &[3, 20])?;
        let c = g.reshape(c, &[3, 5, 4])?;
        let s = g.sum_axes(c, &[0])?;
        let s = g.square(s);
        weighted_sum(g, s, 8)
    });
    worst.push(("conv/reductions/reshape", r.map_err(|e| e.to_string())?));

    let mut ps = ParamSet::new();
    let x = ps.add("x", rt(&[4, 3], 9));
    let w = ps.add("w", rt(&[3, 5], 10));
    let bias = ps.add("b", rt(&[1, 5], 11));
    let r = finite_diff_check(&ps, eps, |g, ps| {
        let (vx, vw, vb) = (g.param(ps, x), g.param(ps, w), g.param(ps, bias));
        let y = dense(g, vx, vw, vb)?;
        weighted_sum(g, y, 12)
    });
    worst.push(("dense", r.map_err(|e| e.to_string())?));

    let mut ps = ParamSet::new();
    let x = ps.add("x", rt(&[2, 4, 3], 13));
    let s = ps.add("s", rt(&[1, 2], 14));
    let k = ps.add("k", rt(&[3, 2, 3, 3], 15));
    let r = finite_diff_check(&ps, eps, |g, ps| {
        let (vx, vs, vk) = (g.param(ps, x), g.param(ps, s), g.param(ps, k));
        let y = modulated_conv(g, vx, vs, vk, true)?;
        weighted_sum(g, y, 16)
    });
    worst.push(("modulated conv", r.map_err(|e| e.to_string())?));

    let mut ps = ParamSet::new();
    let (n, l, d, dv) = (4, 3, 5, 2);
    for (i, (name, shape)) in [
        ("tok", vec![6, n]),
        ("pe_img", vec![6, n]),
        ("lat", vec![l, d]),
        ("pe_lat", vec![l, d]),
        ("qw", vec![n, n]),
        ("qb", vec![1, n]),
        ("kw", vec![d, n]),
        ("kb", vec![1, n]),
        ("vw", vec![d, dv]),
        ("vb", vec![1, dv]),
    ]
    .into_iter()
    .enumerate()
    {
        ps.add(name, rt(&shape, 20 + i as u64));
    }
    let r = finite_diff_check(&ps, eps, |g, ps| {
        let v = |g: &mut Graph, name: &str| g.param(ps, ps.id_of(name).unwrap());
        let (tok, pe, lat, pel) = (v(g, "tok"), v(g, "pe_img"), v(g, "lat"), v(g, "pe_lat"));
        let q = (v(g, "qw"), v(g, "qb"));
        let k = (v(g, "kw"), v(g, "kb"));
        let vv = (v(g, "vw"), v(g, "vb"));
        let y = cross_attention(g, tok, pe, lat, pel, q, k, vv)?;
        weighted_sum(g, y, 30)
    });
    worst.push(("cross-attention", r.map_err(|e| e.to_string())?));

    let mut ps = ParamSet::new();
    let x = ps.add("x", rt(&[2, 3, 4], 31));
    let att = ps.add("att", rt(&[12, 3], 32));
    let aw = ps.add("aw", rt(&[3, 2], 33));
    let ab = ps.add("ab", rt(&[1, 2], 34));
    let r = finite_diff_check(&ps, eps, |g, ps| {
        let alpha = (g.param(ps, aw), g.param(ps, ab));
        let (vx, va) = (g.param(ps, x), g.param(ps, att));
        let y = attn_instance_norm(g, vx, va, alpha)?;
        weighted_sum(g, y, 35)
    });
    worst.push(("attention-scaled instance norm", r.map_err(|e| e.to_string())?));

    let coils = synth_coils(8, 8, 2, 3).unwrap();
    let mask = gen_gaussian_mask(8, 8, 2.0, 4).unwrap();
    let mut ps = ParamSet::new();
    let x = ps.add("x", rt(&[2, 8, 8], 36));
    let dc = Rc::new(DcProjection::new(coils.clone(), mask.clone()).unwrap());
    let ck = Rc::new(CoilKSpaceMap::new(coils.clone()));
    let r = finite_diff_check(&ps, eps, |g, ps| {
        let vx = g.param(ps, x);
        let p = g.apply_linear(dc.clone(), vx)?;
        let k = g.apply_linear(ck.clone(), p)?;
        let k = g.abs(k);
        weighted_sum(g, k, 37)
    });
    worst.push(("data consistency and coil k-space maps", r.map_err(|e| e.to_string())?));

    let cfg = DenoiserConfig {
        channels: 4,
        blocks: 1,
        tokens: 3,
        contrasts: 2,
    };
    let label = ConditioningLabel::new(4.0, 1, 2).unwrap();
    let p = DenoiserParams::init(cfg, 12).unwrap();
    let r = finite_diff_check_sampled(p.params(), eps, 6, |g, ps| {
        let mut q = p.clone();
        q.load_params(ps.clone())?;
        let (wg, wl) = mapper_forward(g, &q, 250, &label)?;
        let a = weighted_sum(g, wg, 38)?;
        let b = g.square(wl);
        let b = g.sum(b);
        g.add(a, b)
    });
    worst.push(("mapper", r.map_err(|e| e.to_string())?));

    let x_ref = gaussian_image(8, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(5));
    let reference = DcReference::new(encode(&x_ref, &coils, &mask).unwrap(), mask.clone(), coils.clone()).unwrap();
    let x_in = gaussian_image(8, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(6));
    let r = finite_diff_check_sampled(p.params(), eps, 4, |g, ps| {
        let mut q = p.clone();
        q.load_params(ps.clone())?;
        let out = denoiser_forward(g, &q, &x_in, &reference, 400, &label)?;
        weighted_sum(g, out, 39)
    });
    worst.push(("full denoiser J=1 n=4 8x8", r.map_err(|e| e.to_string())?));

    let max = worst.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let (name, at) = worst
        .iter()
        .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
        .unwrap();
    check(
        max < 1e-4,
        format!(
            "{} layer checks, max relative error {max:.2e} (<1e-4) in {name} at {}[{}]",
            worst.len(),
            at.param,
            at.index
        ),
    )
}

fn schedule() -> Outcome {
    let s = default_schedule();
    let decreasing = (1..s.steps()).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t));
    let ab1 = s.alpha_bar(1);
    let ab_t = s.alpha_bar(1000);
    let sigma1 = s.sigma(1);
    check(
        decreasing && (ab1 - 0.9999).abs() < 1e-15 && ab_t < 5e-5 && sigma1 == 0.0,
        format!("strictly decreasing {decreasing}, abar_1 {ab1}, abar_1000 {ab_t:.3e}, sigma_1 {sigma1}"),
    )
}

fn split_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bits = vec![false; 40 * 40];
    let mut placed = 0;
    while placed < 1000 {
        let i = rng.random_range(0..bits.len());
        if !bits[i] {
            bits[i] = true;
            placed += 1;
        }
    }
    let thousand = SamplingMask::new(40, 40, bits, MaskKind::Acquired).unwrap();
    let gaussian = gen_gaussian_mask(32, 32, 4.0, 1).unwrap();
    for mask in [&thousand, &gaussian] {
        let want = (0.05 * mask.count() as f64).round() as usize;
        for seed in 0..1000 {
            let (r, p) = split_mask(mask, 0.05, seed).map_err(|e| e.to_string())?;
            if !r.is_disjoint(&p) || r.union(&p).bits() != mask.bits() || r.count() != want {
                return Err(format!("seed {seed} on |M|={}: |M_r|={} (want {want})", mask.count(), r.count()));
            }
        }
    }
    Ok(format!(
        "1000 seeds each on |M|=1000 (|M_r|=50) and |M|={} (|M_r|={}): disjoint, union M, exact count",
        gaussian.count(),
        (0.05 * gaussian.count() as f64).round()
    ))
}

fn hard_dc() -> Outcome {
    let cfg = DenoiserConfig {
        channels: 8,
        blocks: 2,
        tokens: 4,
        contrasts: 1,
    };
    let sched = default_schedule();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for (i, steps) in [1usize, 2, 3, 5, 10, 25].into_iter().enumerate() {
        for accel in [2.0, 4.0] {
            let (_, acq) = simulate_slice(&SliceSpec {
                h: 32,
                w: 32,
                variant: i,
                contrasts: 1,
                coils: 1,
                accel,
                mask_seed: 50 + i as u64,
                coil_seed: 0,
            })
            .unwrap();
            let p = DenoiserParams::init(cfg, i as u64).unwrap();
            let opts = SamplerOptions {
                steps,
                seed: i as u64,
                inject_noise: true,
            };
            let r = reconstruct(&acq, &p, &sched, &opts).map_err(|e| e.to_string())?;
            let f = &r.final_reference;
            let got = encode(&r.image, &f.coils, &f.mask).unwrap();
            for (g, k) in got.coils().iter().zip(f.kspace.coils()) {
                for ((a, b), &m) in g.data().iter().zip(k.data()).zip(f.mask.bits()) {
                    if m {
                        worst = worst.max((a - b).norm());
                    }
                }
            }
            runs += 1;
        }
    }
    check(
        worst < 1e-9,
        format!("{runs} reconstructions over S in {{1,2,3,5,10,25}}, max |M(F x_out - y_ref)| {worst:.2e} (<1e-9)"),
    )
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mrdiff"))
}

fn run_cli(args: &[&str]) -> std::result::Result<String, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`mrdiff {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    ckpt: PathBuf,
    test_data: PathBuf,
}

/// Trains the toy model and returns (a), (b) outcomes.
fn e2e(root: &Path) -> (Outcome, Outcome, Option<Toy>) {
    let train = root.join("train");
    let test = root.join("test");
    let run = root.join("run");
    let rec = root.join("rec");
    let steps = || -> std::result::Result<String, String> {
        run_cli(&["simulate", "--size", "32,32", "--coils", "1", "--accel", "4", "--slices", "4", "--seed", "1", "--out", s(&train)])?;
        run_cli(&[
            "simulate", "--size", "32,32", "--coils", "1", "--accel", "4", "--slices", "4", "--first-variant", "4", "--seed", "2",
            "--out", s(&test),
        ])?;
        run_cli(&["train", "--data", s(&train), "--steps", "2000", "--blocks", "2", "--channels", "16", "--seed", "0", "--out", s(&run)])?;
        run_cli(&["reconstruct", "--ckpt", s(&run.join("latest.ckpt")), "--input", s(&test), "--steps", "5", "--seed", "0", "--out", s(&rec)])?;
        run_cli(&["evaluate", "--recon", s(&rec), "--data", s(&test)])
    };
    let report = match steps() {
        Ok(r) => r,
        Err(e) => return (Err(e.clone()), Err(e), None),
    };

    let trace: Vec<f64> = fs::read_to_string(run.join("loss_trace.txt"))
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.split('\t').nth(1)?.parse().ok())
        .collect();
    let a = if trace.len() == 2000 {
        let first = trace[..100].iter().sum::<f64>() / 100.0;
        let last = trace[1900..].iter().sum::<f64>() / 100.0;
        check(
            last <= 0.5 * first,
            format!("loss mean first 100 {first:.4}, last 100 {last:.4}, ratio {:.3} (<=0.5)", last / first),
        )
    } else {
        Err(format!("trace has {} entries, expected 2000", trace.len()))
    };

    let gains: Vec<f64> = report
        .lines()
        .filter(|l| l.starts_with("slice_"))
        .map(|l| {
            let f: Vec<f64> = l.split('\t').skip(1).map(|v| v.parse().unwrap_or(f64::NAN)).collect();
            f[0] - f[2]
        })
        .collect();
    let b = check(
        gains.len() == 4 && gains.iter().all(|g| *g >= 2.0),
        format!(
            "PSNR gain over zero-filled per held-out variant {:?} dB (each >=2)",
            gains.iter().map(|g| format!("{g:.2}")).collect::<Vec<_>>()
        ),
    );
    (
        a,
        b,
        Some(Toy {
            ckpt: run.join("latest.ckpt"),
            test_data: test,
        }),
    )
}

fn speed(toy: Option<&Toy>) -> Outcome {
    let toy = toy.ok_or("no trained checkpoint from the end-to-end run")?;
    let ck = load_checkpoint(&toy.ckpt).map_err(|e| e.to_string())?;
    let ds = mrdiff_core::dataset::Dataset::open(&toy.test_data).map_err(|e| e.to_string())?;
    let acq = ds.acquisition(0).map_err(|e| e.to_string())?;
    let sched = ck.config.schedule().map_err(|e| e.to_string())?;
    let time = |steps: usize| -> f64 {
        let opts = SamplerOptions {
            steps,
            seed: 0,
            inject_noise: true,
        };
        let t = Instant::now();
        reconstruct(&acq, &ck.params, &sched, &opts).unwrap();
        t.elapsed().as_secs_f64()
    };
    // timing noise only ever adds time: keep the fastest of interleaved runs,
    // so slow drifts on a shared core hit every S alike
    time(5);
    let sizes = [5, 25, 100, 1000];
    let mut best = [f64::INFINITY; 4];
    for round in 0..5 {
        for (b, &steps) in best.iter_mut().zip(&sizes) {
            if steps < 1000 || round < 3 {
                *b = b.min(time(steps));
            }
        }
    }
    let [t5, t25, t100, t1000] = best;
    let per = t1000 / 1000.0;
    let devs: Vec<String> = [(5, t5), (25, t25), (100, t100)]
        .iter()
        .map(|&(s, t)| format!("S={s} {:+.1}%", (t / s as f64 / per - 1.0) * 100.0))
        .collect();
    let dev = [(5, t5), (25, t25), (100, t100)]
        .iter()
        .map(|&(s, t)| (t / s as f64 / per - 1.0).abs())
        .fold(0.0, f64::max);
    check(
        t5 < t1000 / 50.0 && dev <= 0.2,
        format!(
            "S=5 {t5:.3}s vs S=1000 {t1000:.2}s (ratio 1/{:.0}, need <1/50); per-step time vs S=1000: {} (each within 20%)",
            t1000 / t5,
            devs.join(", ")
        ),
    )
}

fn files_in(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Outcome {
    let d = |name: &str| root.join(name);
    let sim = |out: &Path| {
        run_cli(&["simulate", "--size", "16,16", "--coils", "2", "--accel", "2", "--slices", "3", "--contrasts", "2", "--seed", "9", "--out", s(out)])
    };
    sim(&d("sim1"))?;
    sim(&d("sim2"))?;
    if files_in(&d("sim1")) != files_in(&d("sim2")) {
        return Err("simulate outputs differ".into());
    }

    let sim1 = d("sim1");
    let train = |out: &Path, steps: &str, resume: Option<&Path>| {
        let mut args = vec!["train", "--data", s(&sim1), "--steps", steps, "--blocks", "1", "--channels", "4", "--tokens", "2", "--seed", "3", "--ckpt-every", "10", "--out", s(out)];
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        run_cli(&args)
    };
    train(&d("full1"), "30", None)?;
    train(&d("full2"), "30", None)?;
    if files_in(&d("full1")) != files_in(&d("full2")) {
        return Err("train outputs differ between identical runs".into());
    }
    train(&d("part"), "15", None)?;
    train(&d("part"), "30", Some(&d("part").join("latest.ckpt")))?;
    let read = |p: PathBuf| fs::read(p).unwrap_or_default();
    if read(d("part").join("loss_trace.txt")) != read(d("full1").join("loss_trace.txt")) {
        return Err("resumed loss trace differs from the uninterrupted run".into());
    }
    if read(d("part").join("latest.ckpt")) != read(d("full1").join("latest.ckpt")) {
        return Err("resumed checkpoint differs from the uninterrupted run".into());
    }

    let ckpt = d("full1").join("latest.ckpt");
    let recon = |out: &Path| run_cli(&["reconstruct", "--ckpt", s(&ckpt), "--input", s(&d("sim1")), "--seed", "4", "--out", s(out)]);
    recon(&d("rec1"))?;
    recon(&d("rec2"))?;
    if files_in(&d("rec1")) != files_in(&d("rec2")) {
        return Err("reconstruct outputs differ".into());
    }
    let eval = || run_cli(&["evaluate", "--recon", s(&d("rec1")), "--data", s(&d("sim1"))]);
    if eval()? != eval()? {
        return Err("evaluate reports differ".into());
    }
    Ok("simulate, train, reconstruct and evaluate are byte-identical across reruns; 15+15 resumed training matches 30 uninterrupted steps (trace and checkpoint bytes)".into())
}

fn main() {
    // `cargo test -- --list` and filters come through here too
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let root = tempfile::tempdir().expect("temporary directory");
    let mut suite = Suite { results: Vec::new() };
    suite.run("physics oracle equivalence", 10.0, physics);
    suite.run("gradient suite", 120.0, gradients);
    suite.run("schedule", 1.0, schedule);
    suite.run("self-supervision split algebra", 10.0, split_algebra);
    suite.run("hard data consistency", 30.0, hard_dc);

    let start = Instant::now();
    let (a, b, toy) = e2e(&root.path().join("toy"));
    let secs = start.elapsed().as_secs_f64();
    let budget = if secs < 1800.0 { String::new() } else { "; over the 1800s budget".into() };
    for (name, r) in [("end-to-end toy (a) loss halves", a), ("end-to-end toy (b) PSNR gain", b)] {
        let pass = r.is_ok() && secs < 1800.0;
        let detail = r.unwrap_or_else(|e| e);
        suite.record(name, pass, &format!("{detail}{budget} [{secs:.1}s for the toy run]"));
    }

    suite.run("few-step speed", f64::INFINITY, || speed(toy.as_ref()));
    suite.run("determinism", f64::INFINITY, || determinism(&root.path().join("det")));

    let passed = suite.results.iter().filter(|r| r.1).count();
    println!("{passed}/{} acceptance criteria passed", suite.results.len());
    if passed != suite.results.len() {
        std::process::exit(1);
    }
}
