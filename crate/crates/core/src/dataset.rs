//! On-disk datasets of simulated slices.
//!
//! A dataset directory holds `manifest.txt` and one subdirectory per slice
//! with `truth.mrk`, `coils.mrk`, `mask.mrk` and `kspace.mrk`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::ConditioningLabel;
use crate::error::{Error, Result};
use crate::io::{load_coils, load_image, load_kspace, load_mask, save_coils, save_image, save_kspace, save_mask};
use crate::phantom::{simulate_slice, SliceSpec};
use crate::physics::ComplexImage;
use crate::selfsup::Acquisition;

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "mrdiff-dataset 1";

/// Settings shared by every slice of a simulated dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub h: usize,
    pub w: usize,
    pub coils: usize,
    pub accel: f64,
    pub slices: usize,
    pub contrasts: usize,
    pub seed: u64,
    /// Phantom variant of the first slice; slice `k` uses `first_variant + k`.
    pub first_variant: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub name: String,
    pub variant: usize,
    pub contrast: usize,
    pub mask_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub spec: DatasetSpec,
    pub slices: Vec<SliceRecord>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 {
            return Err(Error::Config("dataset needs at least one slice".into()));
        }
        if self.contrasts == 0 || self.coils == 0 {
            return Err(Error::Config("contrasts and coils must be positive".into()));
        }
        if !(self.accel >= 1.0 && self.accel.is_finite()) {
            return Err(Error::Config(format!("acceleration must be >= 1, got {}", self.accel)));
        }
        Ok(())
    }

    /// Per-slice settings; mask seeds are drawn from `seed`, coil maps share it.
    pub fn slice_specs(&self) -> Vec<SliceSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.slices)
            .map(|k| SliceSpec {
                h: self.h,
                w: self.w,
                variant: self.first_variant + k,
                contrasts: self.contrasts,
                coils: self.coils,
                accel: self.accel,
                mask_seed: rng.random(),
                coil_seed: self.seed,
            })
            .collect()
    }
}

/// Simulates every slice of `spec` into `dir`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut slices = Vec::with_capacity(spec.slices);
    for (k, s) in spec.slice_specs().iter().enumerate() {
        let (truth, acq) = simulate_slice(s)?;
        let name = format!("slice_{k:04}");
        let sd = dir.join(&name);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        save_image(&sd.join("truth.mrk"), &truth)?;
        save_coils(&sd.join("coils.mrk"), &acq.coils)?;
        save_mask(&sd.join("mask.mrk"), &acq.mask)?;
        save_kspace(&sd.join("kspace.mrk"), &acq.kspace)?;
        slices.push(SliceRecord {
            name,
            variant: s.variant,
            contrast: s.variant % s.contrasts,
            mask_seed: s.mask_seed,
        });
    }
    let ds = Dataset {
        dir: dir.to_path_buf(),
        spec: *spec,
        slices,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, ds.manifest()).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

impl Dataset {
    pub fn manifest(&self) -> String {
        let s = &self.spec;
        let mut out = format!("{HEADER}\n");
        let _ = writeln!(out, "size {} {}", s.h, s.w);
        let _ = writeln!(out, "coils {}", s.coils);
        let _ = writeln!(out, "accel {}", s.accel);
        let _ = writeln!(out, "contrasts {}", s.contrasts);
        let _ = writeln!(out, "seed {}", s.seed);
        let _ = writeln!(out, "first_variant {}", s.first_variant);
        let _ = writeln!(out, "slices {}", s.slices);
        for r in &self.slices {
            let _ = writeln!(
                out,
                "slice {} variant {} contrast {} mask_seed {}",
                r.name, r.variant, r.contrast, r.mask_seed
            );
        }
        out
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |msg: String| Error::Config(format!("{}: {msg}", path.display()));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad(format!("first line must be `{HEADER}`")));
        }
        let mut spec = DatasetSpec {
            h: 0,
            w: 0,
            coils: 0,
            accel: 0.0,
            slices: 0,
            contrasts: 0,
            seed: 0,
            first_variant: 0,
        };
        let mut slices = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("bad number in `{line}`")));
            match f.as_slice() {
                [] => {}
                ["size", h, w] => {
                    spec.h = num(h)? as usize;
                    spec.w = num(w)? as usize;
                }
                ["coils", v] => spec.coils = num(v)? as usize,
                ["accel", v] => {
                    spec.accel = v.parse().map_err(|_| bad(format!("bad number in `{line}`")))?
                }
                ["contrasts", v] => spec.contrasts = num(v)? as usize,
                ["seed", v] => spec.seed = num(v)?,
                ["first_variant", v] => spec.first_variant = num(v)? as usize,
                ["slices", v] => spec.slices = num(v)? as usize,
                ["slice", name, "variant", v, "contrast", c, "mask_seed", m] => slices.push(SliceRecord {
                    name: name.to_string(),
                    variant: num(v)? as usize,
                    contrast: num(c)? as usize,
                    mask_seed: num(m)?,
                }),
                _ => return Err(bad(format!("unrecognized line `{line}`"))),
            }
        }
        spec.validate().map_err(|e| bad(e.to_string()))?;
        if slices.len() != spec.slices {
            return Err(bad(format!("declares {} slices, lists {}", spec.slices, slices.len())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            spec,
            slices,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice_dir(&self, k: usize) -> PathBuf {
        self.dir.join(&self.slices[k].name)
    }

    pub fn acquisition(&self, k: usize) -> Result<Acquisition> {
        let sd = self.slice_dir(k);
        let acq = Acquisition {
            kspace: load_kspace(&sd.join("kspace.mrk"))?,
            mask: load_mask(&sd.join("mask.mrk"))?,
            coils: load_coils(&sd.join("coils.mrk"))?,
            label: ConditioningLabel::new(self.spec.accel, self.slices[k].contrast, self.spec.contrasts)?,
        };
        let dims = (self.spec.h, self.spec.w);
        if acq.mask.dims() != dims || acq.kspace.dims() != dims || acq.coils.dims() != dims {
            return Err(Error::Dimension(format!("{}: slice files disagree with the manifest size", sd.display())));
        }
        if acq.kspace.n_coils() != acq.coils.n_coils() {
            return Err(Error::Dimension(format!("{}: k-space and coil counts differ", sd.display())));
        }
        Ok(acq)
    }

    pub fn acquisitions(&self) -> Result<Vec<Acquisition>> {
        (0..self.len()).map(|k| self.acquisition(k)).collect()
    }

    pub fn truth(&self, k: usize) -> Result<ComplexImage> {
        load_image(&self.slice_dir(k).join("truth.mrk"))
    }
}
