//! Loss terms of the joint objective.
//!
//! Every function here is a differentiable tensor expression; the training
//! step assembles them into the weighted objective. L1-type losses are means
//! over pixels, and the smoothness penalty is averaged over pixels, so the
//! weights do not depend on image resolution.

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{FeatureStack, ParamMode, PatchEmbeddings, ProjectionHeads, TranslationNet};

/// Contrastive sampling configuration shared by the PatchNCE and local
/// alignment losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NceConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Spatial locations sampled per layer; each query sees
    /// `num_locations - 1` negatives.
    pub num_locations: usize,
    /// Encoder taps, strictly increasing. See
    /// [`crate::networks::ArchConfig::layer_channels`] for the numbering.
    pub layer_ids: Vec<usize>,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            num_locations: 256,
            layer_ids: vec![0, 2, 3, 4, 7],
        }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if self.num_locations < 2 {
            return Err(Error::InvalidArgument(
                "num_locations must be at least 2 (one positive, one negative)".into(),
            ));
        }
        if self.layer_ids.is_empty() || self.layer_ids.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidArgument(format!(
                "layer_ids must be non-empty and strictly increasing, got {:?}",
                self.layer_ids
            )));
        }
        Ok(())
    }
}

/// Weights of the objective terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_a: f64,
    pub lambda_l: f64,
    pub lambda_g: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 0.25,
            lambda_a: 1.0,
            lambda_l: 0.25,
            lambda_g: 1.0,
            lambda_s: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_a", self.lambda_a),
            ("lambda_l", self.lambda_l),
            ("lambda_g", self.lambda_g),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::PatchNceX | LossTerm::PatchNceY => self.lambda_p,
            LossTerm::Appearance => self.lambda_a,
            LossTerm::Local => self.lambda_l,
            LossTerm::Global => self.lambda_g,
            LossTerm::Smooth => self.lambda_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    #[serde(rename = "patchnce_x")]
    PatchNceX,
    #[serde(rename = "patchnce_y")]
    PatchNceY,
    Appearance,
    Local,
    Global,
    Smooth,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::PatchNceX,
        LossTerm::PatchNceY,
        LossTerm::Appearance,
        LossTerm::Local,
        LossTerm::Global,
        LossTerm::Smooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::PatchNceX => "patchnce_x",
            LossTerm::PatchNceY => "patchnce_y",
            LossTerm::Appearance => "appearance",
            LossTerm::Local => "local",
            LossTerm::Global => "global",
            LossTerm::Smooth => "smooth",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Log-sum-exp over the last dimension with a detached shift.
fn log_sum_exp_rows(logits: &Tensor) -> candle_core::Result<Tensor> {
    let shift = logits.max_keepdim(D::Minus1)?.detach();
    let summed = logits.broadcast_sub(&shift)?.exp()?.sum_keepdim(D::Minus1)?;
    summed.log()? + shift
}

/// `-log( e^{z.z+/tau} / (e^{z.z+/tau} + sum_n e^{z.z-_n/tau}) )` for a single
/// query `z` (`K`), positive `z_pos` (`K`) and negatives `z_negs` (`N x K`).
pub fn info_nce(z: &Tensor, z_pos: &Tensor, z_negs: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let k = z.elem_count();
    let (n, kk) = z_negs.dims2()?;
    if n == 0 || kk != k || z_pos.elem_count() != k {
        return Err(Error::ShapeMismatch(format!(
            "info_nce: query {:?}, positive {:?}, negatives {:?}",
            z.dims(),
            z_pos.dims(),
            z_negs.dims()
        )));
    }
    let z = z.reshape((1, k))?;
    let keys = Tensor::cat(&[&z_pos.reshape((1, k))?, z_negs], 0)?;
    let logits = (z.matmul(&keys.t()?)? / tau)?;
    let lse = log_sum_exp_rows(&logits)?;
    let pos = logits.narrow(1, 0, 1)?;
    Ok((lse - pos)?.reshape(())?)
}

/// Mean InfoNCE over the rows of `queries` (`S x K`), where row `s` of `keys`
/// is the positive for query `s` and every other key row is a negative.
pub fn info_nce_rows(queries: &Tensor, keys: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let (s, k) = queries.dims2()?;
    if keys.dims() != [s, k] || s < 2 {
        return Err(Error::ShapeMismatch(format!(
            "info_nce_rows: queries {:?}, keys {:?} (need at least 2 rows)",
            queries.dims(),
            keys.dims()
        )));
    }
    let logits = (queries.matmul(&keys.t()?)? / tau)?;
    let lse = log_sum_exp_rows(&logits)?;
    let pos = (queries * keys)?.sum_keepdim(1)?.affine(1.0 / tau, 0.0)?;
    Ok((lse - pos)?.mean_all()?)
}

/// Draws `n` distinct flat locations per layer.
pub fn sample_locations<R: Rng + ?Sized>(spatial_sizes: &[usize], n: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    spatial_sizes
        .iter()
        .map(|&s| {
            if n > s {
                return Err(Error::InvalidArgument(format!(
                    "cannot sample {n} locations from a layer with {s} positions"
                )));
            }
            Ok(rand::seq::index::sample(rng, s, n).into_vec())
        })
        .collect()
}

/// Mean over layers of [`info_nce_rows`].
pub fn patch_nce_from_embeddings(queries: &PatchEmbeddings, keys: &PatchEmbeddings, tau: f64) -> Result<Tensor> {
    if queries.layers.len() != keys.layers.len() || queries.layers.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} query layers vs {} key layers",
            queries.layers.len(),
            keys.layers.len()
        )));
    }
    let per_layer = queries
        .layers
        .iter()
        .zip(&keys.layers)
        .map(|(q, k)| info_nce_rows(q, k, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&per_layer, 0)?.mean_all()?)
}

/// Shared body of the two patchwise contrastive losses: queries come from
/// `query_img`, positives and negatives from `key_img`, at locations shared
/// between the two and drawn fresh from `rng`.
fn contrastive_patch_loss<R: Rng + ?Sized>(
    query_img: &Tensor,
    key_img: &Tensor,
    net: &TranslationNet,
    heads: &ProjectionHeads,
    cfg: &NceConfig,
    mode: ParamMode,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    if query_img.dims() != key_img.dims() {
        return Err(Error::ShapeMismatch(format!(
            "contrastive images differ: {:?} vs {:?}",
            query_img.dims(),
            key_img.dims()
        )));
    }
    let key_stack = net.encode_features(key_img, &cfg.layer_ids, mode)?;
    let query_stack = net.encode_features(query_img, &cfg.layer_ids, mode)?;
    patch_nce_from_stacks(&query_stack, &key_stack, heads, cfg, mode, rng)
}

/// PatchNCE over precomputed encoder taps. Locations are drawn from `rng`
/// and shared between the two stacks.
pub fn patch_nce_from_stacks<R: Rng + ?Sized>(
    query_stack: &FeatureStack,
    key_stack: &FeatureStack,
    heads: &ProjectionHeads,
    cfg: &NceConfig,
    mode: ParamMode,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    if query_stack.spatial_sizes() != key_stack.spatial_sizes() {
        return Err(Error::ShapeMismatch("query and key feature stacks differ".into()));
    }
    let locations = sample_locations(&key_stack.spatial_sizes(), cfg.num_locations, rng)?;
    let keys = heads.embed(key_stack, &locations, mode)?;
    let queries = heads.embed(query_stack, &locations, mode)?;
    patch_nce_from_embeddings(&queries, &keys, cfg.tau)
}

/// Multilayer PatchNCE between an input image and the translation output.
/// Queries are output patches; the positive is the input patch at the same
/// location and negatives are the other sampled input patches.
pub fn patch_nce_loss<R: Rng + ?Sized>(
    input_img: &Tensor,
    output_img: &Tensor,
    net: &TranslationNet,
    heads: &ProjectionHeads,
    cfg: &NceConfig,
    rng: &mut R,
) -> Result<Tensor> {
    contrastive_patch_loss(output_img, input_img, net, heads, cfg, ParamMode::Train, rng)
}

/// Cross-modality patchwise InfoNCE between the warped source and the target.
///
/// The encoder and heads run on a detached view of their parameters, so the
/// only gradient path is through `x_warped` (and `y`) back to the field.
pub fn local_alignment_loss<R: Rng + ?Sized>(
    x_warped: &Tensor,
    y: &Tensor,
    net: &TranslationNet,
    heads: &ProjectionHeads,
    cfg: &NceConfig,
    rng: &mut R,
) -> Result<Tensor> {
    contrastive_patch_loss(x_warped, y, net, heads, cfg, ParamMode::Frozen, rng)
}

fn mean_abs_diff(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Mean absolute difference between the warped translation and the target.
pub fn appearance_loss(y_prime_warped: &Tensor, y: &Tensor) -> Result<Tensor> {
    mean_abs_diff(y_prime_warped, y, "appearance_loss")
}

/// Mean absolute difference between the warped translation and the
/// reconstruction of the target.
pub fn global_alignment_loss(y_prime_warped: &Tensor, y_hat: &Tensor) -> Result<Tensor> {
    mean_abs_diff(y_prime_warped, y_hat, "global_alignment_loss")
}

/// Offset inside the neighbour-difference norm. Subtracting its square root
/// keeps a constant field at exactly zero while the gradient stays finite.
const SMOOTH_EPS: f64 = 1e-24;

fn edge_norm_sum(diff: &Tensor) -> candle_core::Result<Tensor> {
    let norm = (diff.sqr()?.sum_keepdim(1)? + SMOOTH_EPS)?.sqrt()?;
    (norm - SMOOTH_EPS.sqrt())?.sum_all()
}

/// Mean over pixels `v` of `sum_{u in N4(v)} |phi(u) - phi(v)|_2`, using only
/// in-bounds neighbours. `field` is `(B, 2, H, W)`.
pub fn smoothness_loss(field: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = field.dims4()?;
    if c != 2 {
        return Err(Error::ShapeMismatch(format!("field must have 2 channels, got {c}")));
    }
    let mut total = Tensor::zeros((), field.dtype(), field.device())?;
    if h > 1 {
        let dv = (field.narrow(2, 1, h - 1)? - field.narrow(2, 0, h - 1)?)?;
        total = (total + edge_norm_sum(&dv)?)?;
    }
    if w > 1 {
        let dh = (field.narrow(3, 1, w - 1)? - field.narrow(3, 0, w - 1)?)?;
        total = (total + edge_norm_sum(&dh)?)?;
    }
    // each neighbour pair is seen from both of its pixels
    Ok((total * (2.0 / (b * h * w) as f64))?)
}

/// Weighted sum of scalar loss values; fails on the first non-finite term.
pub fn total_loss(terms: &BTreeMap<LossTerm, f64>, weights: &LossWeights) -> Result<f64> {
    check_finite(terms.iter().map(|(t, v)| (*t, *v)))?;
    Ok(terms.iter().map(|(t, v)| weights.weight(*t) * v).sum())
}

pub(crate) fn check_finite(terms: impl IntoIterator<Item = (LossTerm, f64)>) -> Result<()> {
    for (term, value) in terms {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: term.name().to_string(),
                value,
            });
        }
    }
    Ok(())
}

/// Differentiable weighted sum of loss tensors.
pub fn weighted_objective(terms: &[(LossTerm, Tensor)], weights: &LossWeights) -> Result<Tensor> {
    let mut iter = terms.iter();
    let (t0, v0) = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("objective needs at least one term".into()))?;
    let mut acc = (v0 * weights.weight(*t0))?;
    for (t, v) in iter {
        acc = (acc + (v * weights.weight(*t))?)?;
    }
    Ok(acc)
}
