//! The trainable functions: registration U-Net, ResNet translation
//! generator split into encoder and decoder, and the per-layer projection
//! heads used by the contrastive losses.
//!
//! Layers are written directly against `candle_core` so that every forward
//! pass can run either on live parameters ([`ParamMode::Train`]) or on a
//! detached view of them ([`ParamMode::Frozen`]). The frozen view still
//! propagates gradients to its *inputs*, which is how the local alignment
//! loss reaches the registration network without touching the encoder or
//! the heads.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether a forward pass records gradients for its own parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Train,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ParamKind {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
    /// Weight that starts at exactly zero regardless of scheme.
    ZeroWeight,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    kind: ParamKind,
}

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    fn register(&mut self, name: String, shape: &[usize], kind: ParamKind, dtype: DType, device: &Device) -> Result<Var> {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        let var = Var::zeros(shape, dtype, device)?;
        self.entries.push(ParamEntry {
            name,
            var: var.clone(),
            kind,
        });
        Ok(var)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.var.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.var)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    Xavier,
}

/// Upper bound of the Xavier-uniform distribution.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Re-initializes every parameter: weights Xavier-uniform, biases zero,
/// zero-marked weights zero. Draws happen in registration order.
pub fn init_parameters<R: Rng + ?Sized>(params: &ParamSet, scheme: InitScheme, rng: &mut R) -> Result<()> {
    let InitScheme::Xavier = scheme;
    for e in params.iter() {
        let t = e.var.as_tensor();
        let fresh = match e.kind {
            ParamKind::Weight { fan_in, fan_out } => {
                let bound = xavier_bound(fan_in, fan_out);
                let v: Vec<f64> = (0..t.elem_count())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::from_vec(v, t.shape(), t.device())?.to_dtype(t.dtype())?
            }
            ParamKind::Bias | ParamKind::ZeroWeight => t.zeros_like()?,
        };
        e.var.set(&fresh)?;
    }
    Ok(())
}

fn view(var: &Var, mode: ParamMode) -> Tensor {
    match mode {
        ParamMode::Train => var.as_tensor().clone(),
        ParamMode::Frozen => var.as_tensor().detach(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Padding {
    Zeros,
    Replicate,
}

#[derive(Debug, Clone)]
struct Conv2d {
    weight: Var,
    bias: Var,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
}

#[allow(clippy::too_many_arguments)]
impl Conv2d {
    fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        zero_weight: bool,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let kind = if zero_weight {
            ParamKind::ZeroWeight
        } else {
            ParamKind::Weight {
                fan_in: in_channels * kernel * kernel,
                fan_out: out_channels * kernel * kernel,
            }
        };
        let weight = params.register(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            kind,
            dtype,
            device,
        )?;
        let bias = params.register(format!("{name}.bias"), &[out_channels], ParamKind::Bias, dtype, device)?;
        Ok(Self {
            weight,
            bias,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    fn forward(&self, x: &Tensor, mode: ParamMode) -> candle_core::Result<Tensor> {
        let p = self.kernel / 2;
        let y = match self.padding {
            Padding::Zeros => x.conv2d(&view(&self.weight, mode), p, self.stride, 1, 1)?,
            Padding::Replicate => x
                .pad_with_same(2, p, p)?
                .pad_with_same(3, p, p)?
                .conv2d(&view(&self.weight, mode), 0, self.stride, 1, 1)?,
        };
        let b = view(&self.bias, mode).reshape((1, self.out_channels, 1, 1))?;
        y.broadcast_add(&b)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, dtype: DType, device: &Device) -> Result<Self> {
        let weight = params.register(
            format!("{name}.weight"),
            &[output, input],
            ParamKind::Weight {
                fan_in: input,
                fan_out: output,
            },
            dtype,
            device,
        )?;
        let bias = params.register(format!("{name}.bias"), &[output], ParamKind::Bias, dtype, device)?;
        Ok(Self { weight, bias })
    }

    fn forward(&self, x: &Tensor, mode: ParamMode) -> candle_core::Result<Tensor> {
        x.matmul(&view(&self.weight, mode).t()?)?
            .broadcast_add(&view(&self.bias, mode))
    }
}

/// Per-sample, per-channel normalization over the spatial dimensions.
pub fn instance_norm(x: &Tensor) -> candle_core::Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    centered.broadcast_div(&(var + 1e-5)?.sqrt()?)
}

fn leaky_relu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.maximum(&(x * 0.2)?)
}

/// Architecture hyperparameters for both networks and the heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Channel width of each U-Net level; the first level runs at full
    /// resolution and every further level halves it.
    pub reg_channels: Vec<usize>,
    /// Width of the translation network's first convolution.
    pub trans_base_channels: usize,
    pub trans_res_blocks: usize,
    /// How many residual blocks belong to the encoder half.
    pub trans_encoder_blocks: usize,
    /// Embedding width of the projection heads.
    pub embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            reg_channels: vec![16, 32, 32, 64, 64],
            trans_base_channels: 64,
            trans_res_blocks: 9,
            trans_encoder_blocks: 4,
            embed_dim: 256,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reg_channels.len() < 2 || self.reg_channels.contains(&0) {
            return Err(Error::InvalidArgument(
                "reg_channels needs at least two positive widths".into(),
            ));
        }
        if self.trans_base_channels == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument("widths must be positive".into()));
        }
        if self.trans_encoder_blocks > self.trans_res_blocks {
            return Err(Error::InvalidArgument(format!(
                "encoder blocks ({}) exceed residual blocks ({})",
                self.trans_encoder_blocks, self.trans_res_blocks
            )));
        }
        Ok(())
    }

    /// Spatial size must be divisible by this factor for both networks.
    pub fn size_multiple(&self) -> usize {
        (1 << (self.reg_channels.len() - 1)).max(4)
    }

    /// Number of selectable encoder taps.
    pub fn num_encoder_layers(&self) -> usize {
        4 + self.trans_encoder_blocks
    }

    /// Channel count of encoder tap `id`.
    pub fn layer_channels(&self, id: usize) -> Result<usize> {
        let c = self.trans_base_channels;
        match id {
            0 => Ok(1),
            1 => Ok(c),
            2 => Ok(2 * c),
            i if i < self.num_encoder_layers() => Ok(4 * c),
            _ => Err(Error::InvalidArgument(format!(
                "encoder layer id {id} out of range 0..{}",
                self.num_encoder_layers()
            ))),
        }
    }
}

pub(crate) fn check_spatial(h: usize, w: usize, multiple: usize) -> Result<()> {
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::ShapeMismatch(format!(
            "spatial size {h}x{w} must be a positive multiple of {multiple}"
        )));
    }
    Ok(())
}

/// U-Net predicting a displacement field from a stacked (source, target) pair.
#[derive(Debug, Clone)]
pub struct RegistrationNet {
    encoder: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
    flow: Conv2d,
    params: ParamSet,
    levels: usize,
}

impl RegistrationNet {
    pub fn new(arch: &ArchConfig, dtype: DType, device: &Device) -> Result<Self> {
        arch.validate()?;
        let ch = &arch.reg_channels;
        let mut params = ParamSet::default();
        let mut encoder = Vec::with_capacity(ch.len());
        let mut prev = 2;
        for (i, &c) in ch.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            encoder.push(Conv2d::new(
                &mut params,
                &format!("reg.enc{i}"),
                prev,
                c,
                3,
                stride,
                Padding::Zeros,
                false,
                dtype,
                device,
            )?);
            prev = c;
        }
        let mut decoder = Vec::with_capacity(ch.len() - 1);
        for i in (0..ch.len() - 1).rev() {
            decoder.push(Conv2d::new(
                &mut params,
                &format!("reg.dec{i}"),
                prev + ch[i],
                ch[i],
                3,
                1,
                Padding::Zeros,
                false,
                dtype,
                device,
            )?);
            prev = ch[i];
        }
        let flow = Conv2d::new(&mut params, "reg.flow", prev, 2, 3, 1, Padding::Zeros, true, dtype, device)?;
        Ok(Self {
            encoder,
            decoder,
            flow,
            params,
            levels: ch.len(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// `x`, `y`: `(B, 1, H, W)`; returns `(B, 2, H, W)` displacements.
    pub fn forward(&self, x: &Tensor, y: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if x.dims() != y.dims() {
            return Err(Error::ShapeMismatch(format!(
                "registration inputs differ: {:?} vs {:?}",
                x.dims(),
                y.dims()
            )));
        }
        check_spatial(h, w, 1 << (self.levels - 1))?;
        let mut h_t = Tensor::cat(&[x, y], 1)?;
        let mut skips = Vec::with_capacity(self.levels);
        for conv in &self.encoder {
            h_t = leaky_relu(&instance_norm(&conv.forward(&h_t, mode)?)?)?;
            skips.push(h_t.clone());
        }
        skips.pop();
        for conv in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let (_, _, sh, sw) = skip.dims4()?;
            let up = h_t.upsample_nearest2d(sh, sw)?;
            let merged = Tensor::cat(&[&up, &skip], 1)?;
            h_t = leaky_relu(&instance_norm(&conv.forward(&merged, mode)?)?)?;
        }
        Ok(self.flow.forward(&h_t, mode)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, mode: ParamMode) -> candle_core::Result<Tensor> {
        let h = instance_norm(&self.conv1.forward(x, mode)?)?.relu()?;
        let h = instance_norm(&self.conv2.forward(&h, mode)?)?;
        x + h
    }
}

/// Encoder taps in shallow-to-deep order.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    layers: Vec<(usize, Tensor)>,
}

impl FeatureStack {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|(i, _)| *i).collect()
    }

    pub fn maps(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().map(|(_, t)| t)
    }

    pub fn get(&self, idx: usize) -> Option<&Tensor> {
        self.layers.get(idx).map(|(_, t)| t)
    }

    /// Number of spatial locations `H * W` of each map.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|(_, t)| {
                let d = t.dims();
                d[d.len() - 2] * d[d.len() - 1]
            })
            .collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|(i, t)| (*i, t.detach())).collect(),
        }
    }
}

/// ResNet generator `T = T_dec o T_enc` with a saturating output.
#[derive(Debug, Clone)]
pub struct TranslationNet {
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<ResBlock>,
    up: [Conv2d; 2],
    out: Conv2d,
    encoder_blocks: usize,
    params: ParamSet,
    encoder_param_count: usize,
}

impl TranslationNet {
    pub fn new(arch: &ArchConfig, dtype: DType, device: &Device) -> Result<Self> {
        arch.validate()?;
        let c = arch.trans_base_channels;
        let mut params = ParamSet::default();
        let stem = Conv2d::new(&mut params, "trans.enc.stem", 1, c, 7, 1, Padding::Replicate, false, dtype, device)?;
        let down = [
            Conv2d::new(&mut params, "trans.enc.down0", c, 2 * c, 3, 2, Padding::Zeros, false, dtype, device)?,
            Conv2d::new(&mut params, "trans.enc.down1", 2 * c, 4 * c, 3, 2, Padding::Zeros, false, dtype, device)?,
        ];
        let mut blocks = Vec::with_capacity(arch.trans_res_blocks);
        let mut encoder_param_count = params.len();
        for i in 0..arch.trans_res_blocks {
            let half = if i < arch.trans_encoder_blocks { "enc" } else { "dec" };
            let mut conv = |j: usize| {
                Conv2d::new(
                    &mut params,
                    &format!("trans.{half}.res{i}.conv{j}"),
                    4 * c,
                    4 * c,
                    3,
                    1,
                    Padding::Replicate,
                    false,
                    dtype,
                    device,
                )
            };
            let conv1 = conv(1)?;
            let conv2 = conv(2)?;
            blocks.push(ResBlock { conv1, conv2 });
            if i + 1 == arch.trans_encoder_blocks {
                encoder_param_count = params.len();
            }
        }
        let up = [
            Conv2d::new(&mut params, "trans.dec.up0", 4 * c, 2 * c, 3, 1, Padding::Zeros, false, dtype, device)?,
            Conv2d::new(&mut params, "trans.dec.up1", 2 * c, c, 3, 1, Padding::Zeros, false, dtype, device)?,
        ];
        let out = Conv2d::new(&mut params, "trans.dec.out", c, 1, 7, 1, Padding::Replicate, false, dtype, device)?;
        Ok(Self {
            stem,
            down,
            blocks,
            up,
            out,
            encoder_blocks: arch.trans_encoder_blocks,
            params,
            encoder_param_count,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Parameters belonging to `T_enc`.
    pub fn encoder_params(&self) -> impl Iterator<Item = &ParamEntry> {
        self.params.iter().take(self.encoder_param_count)
    }

    pub fn num_encoder_layers(&self) -> usize {
        4 + self.encoder_blocks
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!("translation input must have 1 channel, got {c}")));
        }
        check_spatial(h, w, 4)
    }

    /// Runs the encoder, recording the taps listed in `layer_ids`
    /// (which must be strictly increasing). Returns the encoder output too.
    fn run_encoder(&self, x: &Tensor, layer_ids: &[usize], mode: ParamMode) -> Result<(Tensor, FeatureStack)> {
        Self::check_input(x)?;
        let n = self.num_encoder_layers();
        if let Some(&bad) = layer_ids.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "encoder layer id {bad} out of range 0..{n}"
            )));
        }
        if layer_ids.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidArgument(format!(
                "encoder layer ids must be strictly increasing, got {layer_ids:?}"
            )));
        }
        let mut layers = Vec::with_capacity(layer_ids.len());
        let mut wanted = layer_ids.iter().peekable();
        let mut record = |id: usize, t: &Tensor| {
            if wanted.peek() == Some(&&id) {
                wanted.next();
                layers.push((id, t.clone()));
            }
        };
        record(0, x);
        let mut h = instance_norm(&self.stem.forward(x, mode)?)?.relu()?;
        record(1, &h);
        for (k, conv) in self.down.iter().enumerate() {
            h = instance_norm(&conv.forward(&h, mode)?)?.relu()?;
            record(2 + k, &h);
        }
        for (k, block) in self.blocks[..self.encoder_blocks].iter().enumerate() {
            h = block.forward(&h, mode)?;
            record(4 + k, &h);
        }
        Ok((h, FeatureStack { layers }))
    }

    /// `T_enc` output.
    pub fn encode(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        Ok(self.run_encoder(x, &[], mode)?.0)
    }

    /// `T_dec` applied to an encoder output.
    pub fn decode(&self, h: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let mut h = h.clone();
        for block in &self.blocks[self.encoder_blocks..] {
            h = block.forward(&h, mode)?;
        }
        for conv in &self.up {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
            h = instance_norm(&conv.forward(&h, mode)?)?.relu()?;
        }
        Ok(self.out.forward(&h, mode)?.tanh()?)
    }

    pub fn forward(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        self.decode(&self.encode(x, mode)?, mode)
    }

    /// Encoder taps only; stops no earlier than the deepest requested tap.
    pub fn encode_features(&self, x: &Tensor, layer_ids: &[usize], mode: ParamMode) -> Result<FeatureStack> {
        Ok(self.run_encoder(x, layer_ids, mode)?.1)
    }

    /// Translation plus the encoder taps of the input, sharing one encoder pass.
    pub fn forward_with_features(
        &self,
        x: &Tensor,
        layer_ids: &[usize],
        mode: ParamMode,
    ) -> Result<(Tensor, FeatureStack)> {
        let (h, stack) = self.run_encoder(x, layer_ids, mode)?;
        Ok((self.decode(&h, mode)?, stack))
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

/// Two-layer perceptrons `H_l`, one per selected encoder layer, followed by
/// L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    heads: Vec<Mlp>,
    layer_ids: Vec<usize>,
    params: ParamSet,
}

/// Per-layer `(n_l, K)` matrices of unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct PatchEmbeddings {
    pub layers: Vec<Tensor>,
}

impl PatchEmbeddings {
    pub fn detach(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Tensor::detach).collect(),
        }
    }
}

/// Row-wise L2 normalization of an `(n, K)` matrix.
pub fn l2_normalize_rows(x: &Tensor) -> candle_core::Result<Tensor> {
    // clamp before the sqrt: its derivative at 0 is infinite
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.maximum(1e-24)?.sqrt()?;
    x.broadcast_div(&norm)
}

impl ProjectionHeads {
    pub fn new(arch: &ArchConfig, layer_ids: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::default();
        let k = arch.embed_dim;
        let heads = layer_ids
            .iter()
            .enumerate()
            .map(|(l, &id)| {
                let c = arch.layer_channels(id)?;
                Ok(Mlp {
                    fc1: Linear::new(&mut params, &format!("heads.{l}.fc1"), c, k, dtype, device)?,
                    fc2: Linear::new(&mut params, &format!("heads.{l}.fc2"), k, k, dtype, device)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            layer_ids: layer_ids.to_vec(),
            params,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    /// Embeds the features at the given flat spatial indices of each layer.
    /// Rows of each output matrix follow the order of `locations[l]`.
    pub fn embed(&self, stack: &FeatureStack, locations: &[Vec<usize>], mode: ParamMode) -> Result<PatchEmbeddings> {
        if stack.layer_ids() != self.layer_ids {
            return Err(Error::InvalidArgument(format!(
                "feature stack layers {:?} do not match heads {:?}",
                stack.layer_ids(),
                self.layer_ids
            )));
        }
        if locations.len() != stack.len() {
            return Err(Error::InvalidArgument(format!(
                "{} location lists for {} layers",
                locations.len(),
                stack.len()
            )));
        }
        let mut layers = Vec::with_capacity(stack.len());
        for ((feat, locs), (mlp, s)) in stack
            .maps()
            .zip(locations)
            .zip(self.heads.iter().zip(stack.spatial_sizes()))
        {
            let (b, c, h, w) = feat.dims4()?;
            if b != 1 {
                return Err(Error::ShapeMismatch(format!("embedding expects batch 1, got {b}")));
            }
            if let Some(&bad) = locs.iter().find(|&&i| i >= s) {
                return Err(Error::InvalidArgument(format!(
                    "location {bad} out of range for a layer with {s} positions"
                )));
            }
            let idx: Vec<u32> = locs.iter().map(|&i| i as u32).collect();
            let idx = Tensor::from_vec(idx, locs.len(), feat.device())?;
            let picked = feat.reshape((c, h * w))?.index_select(&idx, 1)?.t()?;
            let hid = mlp.fc1.forward(&picked, mode)?.relu()?;
            let z = mlp.fc2.forward(&hid, mode)?;
            layers.push(l2_normalize_rows(&z)?);
        }
        Ok(PatchEmbeddings { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_zero_row_has_finite_gradient() {
        let x = Var::from_tensor(&Tensor::new(&[[0.0f64, 0.0, 0.0], [3.0, 4.0, 0.0]], &Device::Cpu).unwrap()).unwrap();
        let y = l2_normalize_rows(x.as_tensor()).unwrap();
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(gx.iter().all(|v| v.is_finite()), "{gx:?}");
        let rows = y.to_vec2::<f64>().unwrap();
        assert_eq!(rows[0], vec![0.0, 0.0, 0.0]);
        assert!((rows[1][0] - 0.6).abs() < 1e-12);
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            reg_channels: vec![4, 8, 8],
            trans_base_channels: 4,
            trans_res_blocks: 3,
            trans_encoder_blocks: 2,
            embed_dim: 16,
        }
    }

    fn rand_img(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn xavier_bounds_and_zero_biases() {
        let arch = ArchConfig {
            trans_base_channels: 64,
            trans_res_blocks: 1,
            trans_encoder_blocks: 1,
            ..small_arch()
        };
        let net = TranslationNet::new(&arch, DType::F64, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_parameters(net.params(), InitScheme::Xavier, &mut rng).unwrap();
        // down0 maps 64 -> 128 channels; its first residual conv is 256 -> 256.
        let w = net.params().get("trans.enc.res0.conv1.weight").unwrap();
        let bound = (6.0f64 / (9.0 * 256.0 + 9.0 * 256.0)).sqrt();
        assert!((xavier_bound(9 * 256, 9 * 256) - bound).abs() < 1e-15);
        let max = w.as_tensor().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(max <= bound && max > 0.9 * bound);
        for e in net.params().iter().filter(|e| e.name.ends_with(".bias")) {
            let s = e.var.as_tensor().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert_eq!(s, 0.0, "{}", e.name);
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let arch = small_arch();
        let a = RegistrationNet::new(&arch, DType::F64, &Device::Cpu).unwrap();
        let b = RegistrationNet::new(&arch, DType::F64, &Device::Cpu).unwrap();
        init_parameters(a.params(), InitScheme::Xavier, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        init_parameters(b.params(), InitScheme::Xavier, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (x, y) in a.params().iter().zip(b.params().iter()) {
            let dx = x.var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let dy = y.var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(dx, dy);
        }
        assert_eq!(a.params().num_elements(), b.params().num_elements());
    }

    #[test]
    fn registration_output_shape_and_initial_identity() {
        let arch = small_arch();
        let net = RegistrationNet::new(&arch, DType::F64, &Device::Cpu).unwrap();
        init_parameters(net.params(), InitScheme::Xavier, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_img(&mut rng, 16, 12);
        let y = rand_img(&mut rng, 16, 12);
        let phi = net.forward(&x, &y, ParamMode::Train).unwrap();
        assert_eq!(phi.dims(), &[1, 2, 16, 12]);
        // zero-initialized flow head
        let s = phi.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(s, 0.0);
        let bad = rand_img(&mut rng, 10, 12);
        assert!(net.forward(&bad, &bad, ParamMode::Train).is_err());
    }

    #[test]
    fn translation_preserves_shape_and_range() {
        let arch = small_arch();
        let net = TranslationNet::new(&arch, DType::F64, &Device::Cpu).unwrap();
        init_parameters(net.params(), InitScheme::Xavier, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_img(&mut rng, 16, 8);
        let y = net.forward(&x, ParamMode::Frozen).unwrap();
        assert_eq!(y.dims(), x.dims());
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.is_finite() && a.abs() <= 1.0));
        let y2 = net.forward(&x, ParamMode::Frozen).unwrap();
        assert_eq!(v, y2.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn feature_stack_layout() {
        let arch = small_arch();
        let net = TranslationNet::new(&arch, DType::F64, &Device::Cpu).unwrap();
        init_parameters(net.params(), InitScheme::Xavier, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = rand_img(&mut ChaCha8Rng::seed_from_u64(5), 16, 16);
        let ids = [0, 1, 2, 3, 5];
        let stack = net.encode_features(&x, &ids, ParamMode::Train).unwrap();
        assert_eq!(stack.len(), 5);
        assert_eq!(stack.layer_ids(), ids);
        let first = stack.get(0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(first, x.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let sizes = stack.spatial_sizes();
        assert!(sizes.windows(2).all(|p| p[0] >= p[1]));
        for (t, &id) in stack.maps().zip(&ids) {
            assert_eq!(t.dims()[1], arch.layer_channels(id).unwrap());
        }
        assert!(net.encode_features(&x, &[0, 6], ParamMode::Train).is_err());
        assert!(net.encode_features(&x, &[2, 1], ParamMode::Train).is_err());
    }

    #[test]
    fn encoder_params_are_the_first_half() {
        let net = TranslationNet::new(&small_arch(), DType::F64, &Device::Cpu).unwrap();
        let names: Vec<_> = net.encoder_params().map(|e| e.name.clone()).collect();
        assert!(names.iter().all(|n| n.starts_with("trans.enc.")));
        let total_enc = net.params().iter().filter(|e| e.name.starts_with("trans.enc.")).count();
        assert_eq!(names.len(), total_enc);
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let arch = small_arch();
        let ids = vec![0, 1, 2, 3, 5];
        let net = TranslationNet::new(&arch, DType::F64, &Device::Cpu).unwrap();
        let heads = ProjectionHeads::new(&arch, &ids, DType::F64, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        init_parameters(net.params(), InitScheme::Xavier, &mut rng).unwrap();
        init_parameters(heads.params(), InitScheme::Xavier, &mut rng).unwrap();
        let x = rand_img(&mut rng, 16, 16);
        let stack = net.encode_features(&x, &ids, ParamMode::Frozen).unwrap();
        let locs = vec![vec![3]; 5];
        let e1 = heads.embed(&stack, &locs, ParamMode::Frozen).unwrap();
        let e2 = heads.embed(&stack, &locs, ParamMode::Frozen).unwrap();
        assert_eq!(e1.layers.len(), 5);
        for (a, b) in e1.layers.iter().zip(&e2.layers) {
            assert_eq!(a.dims(), &[1, 16]);
            let n = a.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(
                a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                b.flatten_all().unwrap().to_vec1::<f64>().unwrap()
            );
        }
        let too_far = vec![vec![16 * 16]; 5];
        assert!(heads.embed(&stack, &too_far, ParamMode::Frozen).is_err());
    }
}
