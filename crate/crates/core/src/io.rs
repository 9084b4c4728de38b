//! On-disk formats.
//!
//! `MRK1` containers hold one image, a per-coil k-space or sensitivity stack,
//! or a sampling mask:
//!
//! ```text
//! offset 0   "MRK1"            magic, 4D 52 4B 31
//! offset 4   u32 kind          0 image, 1 k-space, 2 mask, 3 coil stack
//! offset 8   u32 n_coils
//! offset 12  u32 h
//! offset 16  u32 w
//! offset 20  payload           masks: one byte (0/1) per position;
//!                              otherwise f32 re/im pairs, coil-major, row-major
//! ```
//!
//! All integers and floats are little-endian. Checkpoints are a text manifest
//! followed by a raw `f64` little-endian blob; see [`save_checkpoint`].

use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::physics::{CoilMaps, CoilStack, ComplexImage, Domain, MaskKind, SamplingMask};
use crate::selfsup::TrainConfig;
use crate::tensor::{AdamConfig, AdamState, ParamSet, Tensor};

pub const MAGIC: [u8; 4] = *b"MRK1";
pub const HEADER_LEN: usize = 20;
/// Largest payload accepted from a header.
pub const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum ContainerKind {
    Image = 0,
    KSpace = 1,
    Mask = 2,
    CoilStack = 3,
}

/// Contents of one `MRK1` file.
#[derive(Clone, Debug, PartialEq)]
pub enum Container {
    Image(ComplexImage),
    KSpace(CoilStack),
    Mask(SamplingMask),
    Coils(CoilStack),
}

impl Container {
    pub fn kind(&self) -> ContainerKind {
        match self {
            Container::Image(_) => ContainerKind::Image,
            Container::KSpace(_) => ContainerKind::KSpace,
            Container::Mask(_) => ContainerKind::Mask,
            Container::Coils(_) => ContainerKind::CoilStack,
        }
    }
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn write_complex(buf: &mut Vec<u8>, data: &[Complex64]) {
    for z in data {
        buf.extend_from_slice(&(z.re as f32).to_le_bytes());
        buf.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
}

pub fn encode_container(c: &Container) -> Vec<u8> {
    let (n, (h, w)) = match c {
        Container::Image(x) => (1, x.dims()),
        Container::KSpace(s) | Container::Coils(s) => (s.n_coils(), s.dims()),
        Container::Mask(m) => (1, m.dims()),
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + n * h * w * 8);
    buf.extend_from_slice(&MAGIC);
    for v in [c.kind() as u32, n as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match c {
        Container::Image(x) => write_complex(&mut buf, x.data()),
        Container::KSpace(s) | Container::Coils(s) => {
            s.coils().iter().for_each(|x| write_complex(&mut buf, x.data()))
        }
        Container::Mask(m) => buf.extend(m.bits().iter().map(|&b| b as u8)),
    }
    buf
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn read_complex(bytes: &[u8], start: usize, count: usize) -> Result<Vec<Complex64>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let o = start + 8 * i;
        let re = f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let im = f32::from_le_bytes(bytes[o + 4..o + 8].try_into().expect("4 bytes"));
        if !re.is_finite() || !im.is_finite() {
            return Err(fmt_err(o, "non-finite sample"));
        }
        out.push(Complex64::new(re as f64, im as f64));
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(bytes.len(), format!("header needs {HEADER_LEN} bytes")));
    }
    if bytes[..4] != MAGIC {
        return Err(fmt_err(0, format!("bad magic {:02X?}", &bytes[..4])));
    }
    let kind = match read_u32(bytes, 4) {
        0 => ContainerKind::Image,
        1 => ContainerKind::KSpace,
        2 => ContainerKind::Mask,
        3 => ContainerKind::CoilStack,
        k => return Err(fmt_err(4, format!("unknown kind {k}"))),
    };
    let n = read_u32(bytes, 8) as u64;
    let h = read_u32(bytes, 12) as u64;
    let w = read_u32(bytes, 16) as u64;
    if n == 0 || h == 0 || w == 0 {
        return Err(fmt_err(8, format!("zero dimension in {n}x{h}x{w}")));
    }
    if matches!(kind, ContainerKind::Image | ContainerKind::Mask) && n != 1 {
        return Err(fmt_err(8, format!("{kind:?} must have one coil, header says {n}")));
    }
    let per_sample = if kind == ContainerKind::Mask { 1 } else { 8 };
    let payload = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(per_sample))
        .filter(|&v| v <= MAX_PAYLOAD)
        .ok_or_else(|| fmt_err(8, format!("dimensions {n}x{h}x{w} exceed the payload cap")))?;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if available != payload {
        return Err(fmt_err(
            HEADER_LEN + available.min(payload) as usize,
            format!("header implies {payload} payload bytes, found {available}"),
        ));
    }
    let (n, h, w) = (n as usize, h as usize, w as usize);
    let hw = h * w;
    Ok(match kind {
        ContainerKind::Mask => {
            let raw = &bytes[HEADER_LEN..];
            if let Some(i) = raw.iter().position(|&b| b > 1) {
                return Err(fmt_err(HEADER_LEN + i, format!("mask byte {}", raw[i])));
            }
            let mut m = SamplingMask::new(h, w, raw.iter().map(|&b| b == 1).collect(), MaskKind::Acquired)?;
            if m.count() == hw {
                m.kind = MaskKind::Full;
            }
            Container::Mask(m)
        }
        ContainerKind::Image => {
            Container::Image(ComplexImage::new(h, w, Domain::Image, read_complex(bytes, HEADER_LEN, hw)?)?)
        }
        ContainerKind::KSpace | ContainerKind::CoilStack => {
            let domain = if kind == ContainerKind::KSpace {
                Domain::KSpace
            } else {
                Domain::Image
            };
            let coils = (0..n)
                .map(|c| {
                    let data = read_complex(bytes, HEADER_LEN + c * hw * 8, hw)?;
                    ComplexImage::new(h, w, domain, data)
                })
                .collect::<Result<Vec<_>>>()?;
            let stack = CoilStack::new(coils)?;
            if kind == ContainerKind::KSpace {
                Container::KSpace(stack)
            } else {
                Container::Coils(stack)
            }
        }
    })
}

pub fn save_container(path: &Path, c: &Container) -> Result<()> {
    fs::write(path, encode_container(c)).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

fn wrong_kind(path: &Path, want: &str, got: &Container) -> Error {
    Error::Format {
        offset: 4,
        msg: format!("{}: expected {want}, found {:?}", path.display(), got.kind()),
    }
}

pub fn save_image(path: &Path, x: &ComplexImage) -> Result<()> {
    save_container(path, &Container::Image(x.clone()))
}

pub fn load_image(path: &Path) -> Result<ComplexImage> {
    match load_container(path)? {
        Container::Image(x) => Ok(x),
        other => Err(wrong_kind(path, "image", &other)),
    }
}

pub fn save_kspace(path: &Path, y: &CoilStack) -> Result<()> {
    save_container(path, &Container::KSpace(y.clone()))
}

pub fn load_kspace(path: &Path) -> Result<CoilStack> {
    match load_container(path)? {
        Container::KSpace(y) => Ok(y),
        other => Err(wrong_kind(path, "k-space", &other)),
    }
}

pub fn save_mask(path: &Path, m: &SamplingMask) -> Result<()> {
    save_container(path, &Container::Mask(m.clone()))
}

pub fn load_mask(path: &Path) -> Result<SamplingMask> {
    match load_container(path)? {
        Container::Mask(m) => Ok(m),
        other => Err(wrong_kind(path, "mask", &other)),
    }
}

pub fn save_coils(path: &Path, c: &CoilMaps) -> Result<()> {
    save_container(path, &Container::Coils(c.as_stack().clone()))
}

/// Loads coil maps, renormalizing away the single-precision rounding of disk
/// storage.
pub fn load_coils(path: &Path) -> Result<CoilMaps> {
    match load_container(path)? {
        Container::Coils(s) => CoilMaps::normalized(s.into_coils()),
        other => Err(wrong_kind(path, "coil stack", &other)),
    }
}

/// Everything needed to resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: DenoiserParams,
    pub opt: AdamState,
    pub step: u64,
}

pub const CKPT_MAGIC: &str = "MRDIFF-CKPT 1";

fn config_lines(c: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("channels", c.denoiser.channels.to_string()),
        ("blocks", c.denoiser.blocks.to_string()),
        ("tokens", c.denoiser.tokens.to_string()),
        ("contrasts", c.denoiser.contrasts.to_string()),
        ("steps", c.steps.to_string()),
        ("lr", c.adam.lr.to_string()),
        ("beta1", c.adam.beta1.to_string()),
        ("beta2", c.adam.beta2.to_string()),
        ("adam_eps", c.adam.eps.to_string()),
        ("rho", c.rho.to_string()),
        ("diffusion_steps", c.diffusion_steps.to_string()),
        ("beta_start", c.beta_start.to_string()),
        ("beta_end", c.beta_end.to_string()),
        ("seed", c.seed.to_string()),
        ("ckpt_every", c.ckpt_every.to_string()),
    ]
}

/// Writes a checkpoint:
///
/// ```text
/// MRDIFF-CKPT 1
/// config <key> <value>        (one per training setting)
/// step <n>
/// adam_step <n>
/// tensor <name> <dims...> <byte offset> <byte length>
/// end
/// <blob of f64 little-endian>
/// ```
///
/// Tensors are the parameters followed by `adam.m.<name>` and `adam.v.<name>`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut manifest = format!("{CKPT_MAGIC}\n");
    for (k, v) in config_lines(&ckpt.config) {
        manifest.push_str(&format!("config {k} {v}\n"));
    }
    manifest.push_str(&format!("step {}\nadam_step {}\n", ckpt.step, ckpt.opt.step));

    let ps = ckpt.params.params();
    let mut entries: Vec<(String, &Tensor)> = ps.iter().map(|(n, t)| (n.to_string(), t)).collect();
    for (i, (name, _)) in ps.iter().enumerate() {
        entries.push((format!("adam.m.{name}"), &ckpt.opt.m[i]));
    }
    for (i, (name, _)) in ps.iter().enumerate() {
        entries.push((format!("adam.v.{name}"), &ckpt.opt.v[i]));
    }

    let mut blob = Vec::new();
    for (name, t) in &entries {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor {name} {} {} {}\n",
            dims.join(" "),
            blob.len(),
            t.len() * 8
        ));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.push_str("end\n");
    let mut bytes = manifest.into_bytes();
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

fn parse<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ckpt_err(path, format!("bad value {v:?} for {key}")))
}

struct Manifest {
    config: TrainConfig,
    step: u64,
    adam_step: u64,
    tensors: ParamSet,
}

fn read_manifest(path: &Path, bytes: &[u8]) -> Result<Manifest> {
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| ckpt_err(path, "manifest has no end marker"))?;
    let text = std::str::from_utf8(&bytes[..end + 1]).map_err(|_| ckpt_err(path, "manifest is not UTF-8"))?;
    let blob = &bytes[end + 5..];
    let mut lines = text.lines();
    if lines.next() != Some(CKPT_MAGIC) {
        return Err(ckpt_err(path, "missing checkpoint magic line"));
    }

    let mut c = TrainConfig::default();
    let mut d = DenoiserConfig::default();
    let mut adam = AdamConfig::default();
    let (mut step, mut adam_step) = (None, None);
    let mut seen = Vec::new();
    let mut tensors = ParamSet::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["config", key, v] => {
                seen.push(key.to_string());
                match *key {
                    "channels" => d.channels = parse(path, key, v)?,
                    "blocks" => d.blocks = parse(path, key, v)?,
                    "tokens" => d.tokens = parse(path, key, v)?,
                    "contrasts" => d.contrasts = parse(path, key, v)?,
                    "steps" => c.steps = parse(path, key, v)?,
                    "lr" => adam.lr = parse(path, key, v)?,
                    "beta1" => adam.beta1 = parse(path, key, v)?,
                    "beta2" => adam.beta2 = parse(path, key, v)?,
                    "adam_eps" => adam.eps = parse(path, key, v)?,
                    "rho" => c.rho = parse(path, key, v)?,
                    "diffusion_steps" => c.diffusion_steps = parse(path, key, v)?,
                    "beta_start" => c.beta_start = parse(path, key, v)?,
                    "beta_end" => c.beta_end = parse(path, key, v)?,
                    "seed" => c.seed = parse(path, key, v)?,
                    "ckpt_every" => c.ckpt_every = parse(path, key, v)?,
                    other => return Err(ckpt_err(path, format!("unknown config key {other}"))),
                }
            }
            ["step", v] => step = Some(parse(path, "step", v)?),
            ["adam_step", v] => adam_step = Some(parse(path, "adam_step", v)?),
            ["tensor", name, rest @ ..] if rest.len() >= 3 => {
                let nums = rest
                    .iter()
                    .map(|v| parse::<u64>(path, name, v))
                    .collect::<Result<Vec<_>>>()?;
                let (dims, span) = nums.split_at(nums.len() - 2);
                let (offset, len) = (span[0], span[1]);
                let count = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d));
                if count.map(|c| c * 8) != Some(len) || len > MAX_PAYLOAD {
                    return Err(ckpt_err(path, format!("tensor {name}: dims {dims:?} disagree with length {len}")));
                }
                let stop = offset.checked_add(len).filter(|&s| s <= blob.len() as u64);
                let Some(stop) = stop else {
                    return Err(ckpt_err(path, format!("tensor {name} runs past the blob")));
                };
                let data = blob[offset as usize..stop as usize]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
                let t = Tensor::new(&shape, data).map_err(|e| ckpt_err(path, e))?;
                tensors.add(*name, t);
            }
            _ => return Err(ckpt_err(path, format!("unparseable manifest line {line:?}"))),
        }
    }
    for (key, _) in config_lines(&c) {
        if !seen.iter().any(|s| s == key) {
            return Err(ckpt_err(path, format!("config {key} missing")));
        }
    }
    c.denoiser = d;
    c.adam = adam;
    Ok(Manifest {
        config: c,
        step: step.ok_or_else(|| ckpt_err(path, "step missing"))?,
        adam_step: adam_step.ok_or_else(|| ckpt_err(path, "adam_step missing"))?,
        tensors,
    })
}

/// Loads a checkpoint into a network built from `denoiser`, failing with the
/// list of missing, unexpected, or mis-shaped tensors if the layouts differ.
pub fn load_checkpoint_as(path: &Path, denoiser: DenoiserConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let Manifest {
        mut config,
        step,
        adam_step,
        tensors,
    } = read_manifest(path, &bytes)?;

    let mut params = DenoiserParams::init(denoiser, 0)?;
    let mut net = ParamSet::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in tensors.iter() {
        if let Some(base) = name.strip_prefix("adam.m.") {
            m.push((base.to_string(), t.clone()));
        } else if let Some(base) = name.strip_prefix("adam.v.") {
            v.push((base.to_string(), t.clone()));
        } else {
            net.add(name, t.clone());
        }
    }
    params
        .load_params(net)
        .map_err(|e| ckpt_err(path, e))?;

    let order = |moments: Vec<(String, Tensor)>, which: &str| -> Result<Vec<Tensor>> {
        params
            .params()
            .iter()
            .map(|(name, t)| {
                let found = moments.iter().find(|(n, _)| n == name);
                match found {
                    Some((_, m)) if m.shape() == t.shape() => Ok(m.clone().with_grad(false)),
                    _ => Err(ckpt_err(path, format!("optimizer {which} moment for {name} missing or mis-shaped"))),
                }
            })
            .collect()
    };
    let opt = AdamState {
        m: order(m, "first")?,
        v: order(v, "second")?,
        step: adam_step,
    };
    config.denoiser = denoiser;
    Ok(Checkpoint {
        config,
        params,
        opt,
        step,
    })
}

/// Loads a checkpoint with the network layout it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest = read_manifest(path, &bytes)?;
    load_checkpoint_as(path, manifest.config.denoiser)
}
