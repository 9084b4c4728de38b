//! The unrolled denoiser.
//!
//! A mapper MLP turns `(t, label)` into a global latent `w_g` and `L` local
//! latent tokens `w_l`. The image is lifted to `n` feature channels and passes
//! through `J` denoising blocks. Each block runs two cross-attention layers
//! (modulated convolution, cross-attention against `w_l`, attention-scaled
//! instance normalization), reduces to a real/imaginary pair, enforces data
//! consistency, and expands back to `n` channels. A final projection to two
//! channels is followed by one more data-consistency step, so every output is
//! exactly consistent with the conditioning k-space.

pub mod layers;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::physics::{zero_filled, CoilMaps, CoilStack, ComplexImage, DcProjection, Domain, SamplingMask};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};
use layers::{
    attn_instance_norm, conv_bias, cross_attention, dense, image_positional_encoding,
    modulated_conv, sinusoid, to_tokens, LEAKY_SLOPE,
};

/// Width of the mapper layers and of both latents.
pub const LATENT_DIM: usize = 32;
/// Hidden fully connected layers in the mapper.
pub const MAPPER_LAYERS: usize = 12;
/// Cross-attention layers per denoising block.
pub const LAYERS_PER_BLOCK: usize = 2;
/// Acceleration is fed to the mapper as `R / ACCEL_NORM`.
pub const ACCEL_NORM: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Feature channels `n`.
    pub channels: usize,
    /// Unrolled blocks `J`.
    pub blocks: usize,
    /// Local latent tokens `L`.
    pub tokens: usize,
    /// Length of the contrast one-hot vector.
    pub contrasts: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            blocks: 4,
            tokens: 16,
            contrasts: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.blocks == 0 || self.tokens == 0 || self.contrasts == 0 {
            return Err(Error::Config(format!("all denoiser sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn label_len(&self) -> usize {
        1 + self.contrasts
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (n, l, d) = (self.channels, self.tokens, LATENT_DIM);
        let dense = |i: usize, o: usize| i * o + o;
        let conv = |i: usize, o: usize| 9 * i * o + o;
        let mapper = dense(d + self.label_len(), d)
            + (MAPPER_LAYERS - 1) * dense(d, d)
            + dense(d, d)
            + dense(d, l * d);
        let layer = dense(d, n) // affine
            + 9 * n * n + n // modulated kernel + bias
            + dense(n, n) // query
            + dense(d, n) // key
            + dense(d, n) // value
            + dense(n, n) // alpha
            + l * d; // latent positional encoding
        let block = LAYERS_PER_BLOCK * layer + conv(n, 2) + conv(2, n);
        mapper + self.blocks * block + conv(2, n) + conv(n, 2)
    }
}

/// Acceleration and contrast fed to the mapper.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningLabel {
    /// `R / 8`.
    pub accel: f64,
    pub contrast: Vec<f64>,
}

impl ConditioningLabel {
    pub fn new(accel: f64, contrast: usize, contrasts: usize) -> Result<Self> {
        if contrast >= contrasts {
            return Err(Error::Config(format!(
                "contrast {contrast} outside one-hot of length {contrasts}"
            )));
        }
        let mut one_hot = vec![0.0; contrasts];
        one_hot[contrast] = 1.0;
        Ok(Self {
            accel: accel / ACCEL_NORM,
            contrast: one_hot,
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        std::iter::once(self.accel).chain(self.contrast.iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    k: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct MapperIds {
    hidden: Vec<Dense>,
    head_g: Dense,
    head_l: Dense,
}

#[derive(Clone, Copy, Debug)]
struct AttnLayerIds {
    affine: Dense,
    conv: Conv,
    q: Dense,
    k: Dense,
    v: Dense,
    alpha: Dense,
    pe_lat: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    layers: [AttnLayerIds; LAYERS_PER_BLOCK],
    reduce: Conv,
    expand: Conv,
}

/// All trainable tensors of the mapper and the unrolled blocks.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    params: ParamSet,
    mapper: MapperIds,
    blocks: Vec<BlockIds>,
    lift: Conv,
    out: Conv,
}

struct Init<'a> {
    ps: &'a mut ParamSet,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn tensor(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = if std == 0.0 {
            Tensor::zeros(shape)
        } else {
            Tensor::randn(shape, std, &mut self.rng)
        };
        self.ps.add(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.ps.add(name, Tensor::filled(shape, value))
    }

    /// He-style init for layers followed by a leaky ReLU.
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64, bias: f64) -> Dense {
        let std = gain / (fan_in as f64).sqrt();
        Dense {
            w: self.tensor(format!("{name}.w"), &[fan_in, fan_out], std),
            b: self.constant(format!("{name}.b"), &[1, fan_out], bias),
        }
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> Conv {
        let std = 1.0 / ((9 * c_in) as f64).sqrt();
        Conv {
            k: self.tensor(format!("{name}.k"), &[c_out, c_in, 3, 3], std),
            b: self.constant(format!("{name}.b"), &[c_out, 1, 1], 0.0),
        }
    }
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (n, l, d) = (config.channels, config.tokens, LATENT_DIM);
        let relu_gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut params = ParamSet::new();
        let mut init = Init {
            ps: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let mut hidden = Vec::with_capacity(MAPPER_LAYERS);
        for i in 0..MAPPER_LAYERS {
            let fan_in = if i == 0 { d + config.label_len() } else { d };
            hidden.push(init.dense(&format!("mapper.fc{i}"), fan_in, d, relu_gain, 0.0));
        }
        let mapper = MapperIds {
            hidden,
            head_g: init.dense("mapper.head_g", d, d, 1.0, 0.0),
            head_l: init.dense("mapper.head_l", d, l * d, 1.0, 0.0),
        };

        let lift = init.conv("lift", 2, n);
        let mut blocks = Vec::with_capacity(config.blocks);
        for j in 0..config.blocks {
            let layers = std::array::from_fn(|i| {
                let p = format!("block{j}.layer{i}");
                AttnLayerIds {
                    affine: init.dense(&format!("{p}.affine"), d, n, 1.0, 1.0),
                    conv: init.conv(&format!("{p}.conv"), n, n),
                    q: init.dense(&format!("{p}.query"), n, n, 1.0, 0.0),
                    k: init.dense(&format!("{p}.key"), d, n, 1.0, 0.0),
                    v: init.dense(&format!("{p}.value"), d, n, 1.0, 0.0),
                    alpha: init.dense(&format!("{p}.alpha"), n, n, 0.1, 1.0),
                    pe_lat: init.tensor(format!("{p}.pe_latent"), &[l, d], 0.1),
                }
            });
            blocks.push(BlockIds {
                layers,
                reduce: init.conv(&format!("block{j}.reduce"), n, 2),
                expand: init.conv(&format!("block{j}.expand"), 2, n),
            });
        }
        let out = init.conv("out", n, 2);

        let p = Self {
            config,
            params,
            mapper,
            blocks,
            lift,
            out,
        };
        debug_assert_eq!(p.params.num_scalars(), config.param_count());
        Ok(p)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces every tensor from a set with identical names and shapes.
    pub fn load_params(&mut self, other: ParamSet) -> Result<()> {
        let mut offenders = Vec::new();
        for (name, t) in self.params.iter() {
            match other.id_of(name) {
                None => offenders.push(format!("missing {name}")),
                Some(id) if other.get(id).shape() != t.shape() => offenders.push(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    other.get(id).shape()
                )),
                Some(_) => {}
            }
        }
        for (name, _) in other.iter() {
            if self.params.id_of(name).is_none() {
                offenders.push(format!("unexpected {name}"));
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Checkpoint(offenders.join("; ")));
        }
        for id in self.params.ids().collect::<Vec<_>>() {
            let src = other.id_of(self.params.name(id)).expect("checked above");
            *self.params.get_mut(id) = other.get(src).clone();
        }
        Ok(())
    }

    /// Zeroes the final projection (kernel and bias).
    pub fn zero_output_head(&mut self) {
        for id in [self.out.k, self.out.b] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Zeroes both mapper heads.
    pub fn zero_mapper_heads(&mut self) {
        let h = &self.mapper;
        for id in [h.head_g.w, h.head_g.b, h.head_l.w, h.head_l.b] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Data-consistency inputs: the conditioning k-space, its mask, and coils.
#[derive(Clone, Debug)]
pub struct DcReference {
    pub kspace: CoilStack,
    pub mask: SamplingMask,
    pub coils: CoilMaps,
}

impl DcReference {
    pub fn new(kspace: CoilStack, mask: SamplingMask, coils: CoilMaps) -> Result<Self> {
        if kspace.dims() != mask.dims() || kspace.dims() != coils.dims() {
            return Err(Error::Dimension(format!(
                "k-space {:?}, mask {:?}, coils {:?}",
                kspace.dims(),
                mask.dims(),
                coils.dims()
            )));
        }
        if kspace.n_coils() != coils.n_coils() {
            return Err(Error::Dimension(format!(
                "{} k-space coils vs {} maps",
                kspace.n_coils(),
                coils.n_coils()
            )));
        }
        Ok(Self { kspace, mask, coils })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

/// Graph form of the data-consistency projection: `x -> P x + offset`, where
/// `P` keeps unacquired k-space and `offset` is the zero-filled reference.
struct DcNode {
    proj: Rc<DcProjection>,
    offset: Var,
}

impl DcNode {
    fn new(g: &mut Graph, r: &DcReference) -> Result<Self> {
        let (h, w) = r.dims();
        let proj = Rc::new(DcProjection::new(r.coils.clone(), r.mask.clone())?);
        let zf = zero_filled(&r.kspace, &r.coils, &r.mask)?;
        let offset = g.constant(&Tensor::new(&[2, h, w], zf.to_channels())?);
        Ok(Self { proj, offset })
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = g.apply_linear(self.proj.clone(), x)?;
        g.add(p, self.offset)
    }
}

fn dense_vars(g: &mut Graph, ps: &ParamSet, d: Dense) -> (Var, Var) {
    (g.param(ps, d.w), g.param(ps, d.b))
}

/// Mapper input: sinusoidal timestep embedding followed by the label.
pub fn mapper_input(t: usize, label: &ConditioningLabel) -> Vec<f64> {
    let mut v = sinusoid(t as f64, LATENT_DIM);
    v.extend(label.to_vec());
    v
}

/// Global latent `[1, 32]` and local latents `[L, 32]`.
pub fn mapper_forward(
    g: &mut Graph,
    p: &DenoiserParams,
    t: usize,
    label: &ConditioningLabel,
) -> Result<(Var, Var)> {
    if label.contrast.len() != p.config.contrasts {
        return Err(Error::Dimension(format!(
            "label has {} contrasts, network expects {}",
            label.contrast.len(),
            p.config.contrasts
        )));
    }
    let input = mapper_input(t, label);
    let mut h = g.constant(&Tensor::new(&[1, input.len()], input)?);
    for &layer in &p.mapper.hidden {
        let (w, b) = dense_vars(g, &p.params, layer);
        let y = dense(g, h, w, b)?;
        h = g.leaky_relu(y, LEAKY_SLOPE);
    }
    let (w, b) = dense_vars(g, &p.params, p.mapper.head_g);
    let w_g = dense(g, h, w, b)?;
    let (w, b) = dense_vars(g, &p.params, p.mapper.head_l);
    let w_l = dense(g, h, w, b)?;
    let w_l = g.reshape(w_l, &[p.config.tokens, LATENT_DIM])?;
    Ok((w_g, w_l))
}

fn attention_layer(
    g: &mut Graph,
    ps: &ParamSet,
    ids: &AttnLayerIds,
    x: Var,
    w_g: Var,
    w_l: Var,
    pe_img: Var,
) -> Result<Var> {
    let (aw, ab) = dense_vars(g, ps, ids.affine);
    let styles = dense(g, w_g, aw, ab)?;
    let kernel = g.param(ps, ids.conv.k);
    let y = modulated_conv(g, x, styles, kernel, true)?;
    let bias = g.param(ps, ids.conv.b);
    let y = g.add(y, bias)?;
    let y = g.leaky_relu(y, LEAKY_SLOPE);

    let tokens = to_tokens(g, y)?;
    let pe_lat = g.param(ps, ids.pe_lat);
    let q = dense_vars(g, ps, ids.q);
    let k = dense_vars(g, ps, ids.k);
    let v = dense_vars(g, ps, ids.v);
    let att = cross_attention(g, tokens, pe_img, w_l, pe_lat, q, k, v)?;
    let alpha = dense_vars(g, ps, ids.alpha);
    attn_instance_norm(g, y, att, alpha)
}

fn conv_param(g: &mut Graph, ps: &ParamSet, c: Conv, x: Var) -> Result<Var> {
    let (k, b) = (g.param(ps, c.k), g.param(ps, c.b));
    conv_bias(g, x, k, b)
}

/// One denoising block on `[n, h, w]` features.
fn block_forward(
    g: &mut Graph,
    p: &DenoiserParams,
    block: &BlockIds,
    x: Var,
    latents: (Var, Var),
    pe_img: Var,
    dc: &DcNode,
) -> Result<Var> {
    let mut x = x;
    for layer in &block.layers {
        x = attention_layer(g, &p.params, layer, x, latents.0, latents.1, pe_img)?;
    }
    let pair = conv_param(g, &p.params, block.reduce, x)?;
    let pair = dc.apply(g, pair)?;
    conv_param(g, &p.params, block.expand, pair)
}

/// Records `R_theta(x_t, y, M, C, t)` and returns the `[2, h, w]` estimate of
/// the clean image.
pub fn denoiser_forward(
    g: &mut Graph,
    p: &DenoiserParams,
    x_t: &ComplexImage,
    reference: &DcReference,
    t: usize,
    label: &ConditioningLabel,
) -> Result<Var> {
    let (h, w) = x_t.dims();
    if reference.dims() != (h, w) {
        return Err(Error::Dimension(format!(
            "input {h}x{w} vs reference {:?}",
            reference.dims()
        )));
    }
    let latents = mapper_forward(g, p, t, label)?;
    let pe_img = g.constant(&image_positional_encoding(h, w, p.config.channels));
    let dc = DcNode::new(g, reference)?;

    let x = g.constant(&Tensor::new(&[2, h, w], x_t.to_channels())?);
    let mut feat = conv_param(g, &p.params, p.lift, x)?;
    for block in &p.blocks {
        feat = block_forward(g, p, block, feat, latents, pe_img, &dc)?;
    }
    let out = conv_param(g, &p.params, p.out, feat)?;
    dc.apply(g, out)
}

/// Forward pass returning the complex estimate.
pub fn denoise(
    p: &DenoiserParams,
    x_t: &ComplexImage,
    reference: &DcReference,
    t: usize,
    label: &ConditioningLabel,
) -> Result<ComplexImage> {
    let mut g = Graph::new();
    let out = denoiser_forward(&mut g, p, x_t, reference, t, label)?;
    let (h, w) = x_t.dims();
    ComplexImage::from_channels(h, w, Domain::Image, g.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            channels: 4,
            blocks: 2,
            tokens: 3,
            contrasts: 2,
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [tiny(), DenoiserConfig::default()] {
            let p = DenoiserParams::init(cfg, 0).unwrap();
            assert_eq!(p.params().num_scalars(), cfg.param_count());
        }
        // hand count for n=4, J=2, L=3, one-hot of 2
        let mapper = (35 * 32 + 32) + 11 * (32 * 32 + 32) + (32 * 32 + 32) + (32 * 96 + 96);
        let layer = (32 * 4 + 4) + (144 + 4) + 20 + (32 * 4 + 4) + (32 * 4 + 4) + 20 + 96;
        let block = 2 * layer + (72 + 2) + (72 + 4);
        assert_eq!(tiny().param_count(), mapper + 2 * block + (72 + 4) + (72 + 2));
    }

    #[test]
    fn label_one_hot() {
        let l = ConditioningLabel::new(4.0, 1, 3).unwrap();
        assert_eq!(l.to_vec(), vec![0.5, 0.0, 1.0, 0.0]);
        assert!(ConditioningLabel::new(4.0, 3, 3).is_err());
    }

    #[test]
    fn load_rejects_missing_blocks() {
        let small = DenoiserParams::init(DenoiserConfig { blocks: 1, ..tiny() }, 0).unwrap();
        let mut big = DenoiserParams::init(tiny(), 0).unwrap();
        let err = big.load_params(small.params().clone()).unwrap_err().to_string();
        assert!(err.contains("missing block1.layer0.conv.k"), "{err}");
    }
}
