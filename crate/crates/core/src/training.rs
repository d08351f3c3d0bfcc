//! Joint optimization of the registration network, translation network and
//! projection heads, with checkpointing and run logs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hex, DatasetSplits, PairRecord, PairedDataset};
use crate::error::{Error, Result};
use crate::grids::{tensor_to_array2, warp_tensor, DeformationField, ImageGrid};
use crate::losses::{
    appearance_loss, check_finite, global_alignment_loss, patch_nce_from_stacks, smoothness_loss, weighted_objective,
    LossTerm, LossWeights, NceConfig,
};
use crate::metrics::{aggregate, evaluate_pair, EvalReport, PairMetrics, Spacing, Units};
use crate::networks::{
    init_parameters, ArchConfig, InitScheme, ParamEntry, ParamMode, ProjectionHeads, RegistrationNet, TranslationNet,
};
use crate::viz;

/// Which optional alignment terms are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    pub use_local: bool,
    pub use_global: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        Self {
            use_local: true,
            use_global: true,
        }
    }
}

/// Named ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoLocal,
    NoGlobal,
    NoLocalGlobal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoLocal, Variant::NoGlobal, Variant::NoLocalGlobal];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLocal => "no_local",
            Variant::NoGlobal => "no_global",
            Variant::NoLocalGlobal => "no_local_global",
        }
    }

    pub fn flags(self) -> VariantFlags {
        VariantFlags {
            use_local: matches!(self, Variant::Full | Variant::NoGlobal),
            use_global: matches!(self, Variant::Full | Variant::NoLocal),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

/// Floating-point precision of network parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Last epoch at the full learning rate.
    pub decay_start_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub nce: NceConfig,
    pub variant: VariantFlags,
    /// Validate and write samples every this many epochs (and at the end).
    pub checkpoint_interval: usize,
    pub arch: ArchConfig,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            decay_start_epoch: 200,
            batch_size: 1,
            seed: 0,
            weights: LossWeights::default(),
            nce: NceConfig::default(),
            variant: VariantFlags::default(),
            checkpoint_interval: 10,
            arch: ArchConfig::default(),
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.decay_start_epoch == 0 || self.decay_start_epoch > self.epochs {
            return bad(format!(
                "decay_start_epoch {} must lie in 1..={}",
                self.decay_start_epoch, self.epochs
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return bad("batch_size and checkpoint_interval must be >= 1".into());
        }
        self.weights.validate()?;
        self.nce.validate()?;
        self.arch.validate()?;
        let max_id = self.arch.num_encoder_layers();
        if let Some(&bad_id) = self.nce.layer_ids.iter().find(|&&l| l >= max_id) {
            return bad(format!("layer id {bad_id} exceeds the {max_id} encoder taps"));
        }
        Ok(())
    }

    /// Loss terms that are computed and logged under this configuration.
    pub fn active_terms(&self) -> Vec<LossTerm> {
        LossTerm::ALL
            .into_iter()
            .filter(|t| match t {
                LossTerm::Local => self.variant.use_local,
                LossTerm::Global => self.variant.use_global,
                LossTerm::Smooth => self.weights.lambda_s > 0.0,
                _ => true,
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Returns a copy of `config` with the flags of the named ablation variant.
pub fn make_variant(config: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let variant: Variant = name.parse()?;
    Ok(TrainConfig {
        variant: variant.flags(),
        ..config.clone()
    })
}

/// Learning rate used during epoch `e` (1-based): constant up to
/// `decay_start_epoch`, then linear down to zero at the final epoch.
pub fn lr_at_epoch(e: usize, config: &TrainConfig) -> Result<f64> {
    if e == 0 || e > config.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {e} outside 1..={}",
            config.epochs
        )));
    }
    let ds = config.decay_start_epoch;
    if e <= ds {
        return Ok(config.lr);
    }
    Ok(config.lr * (1.0 - (e - ds) as f64 / (config.epochs - ds) as f64))
}

const ADAM_EPS: f64 = 1e-8;
const STREAM_INIT: u64 = 1 << 62;
const STREAM_EPOCH: u64 = 1 << 63;

/// Fresh generator for one stream of the run seed.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator used by training step `step` (1-based).
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    seeded_stream(seed, step)
}

/// Record visiting order for epoch `epoch`.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_stream(seed, STREAM_EPOCH | epoch as u64));
    order
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    fn new(params: &[ParamEntry]) -> Result<Self> {
        let zeros = |p: &ParamEntry| p.var.zeros_like();
        Ok(Self {
            m: params.iter().map(zeros).collect::<candle_core::Result<_>>()?,
            v: params.iter().map(zeros).collect::<candle_core::Result<_>>()?,
            t: 0,
        })
    }

    /// One update; parameters without a gradient are left untouched.
    fn step(&mut self, params: &[ParamEntry], grads: &[Option<Tensor>], lr: f64, b1: f64, b2: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = ((&self.m[i] * b1)? + (g * (1.0 - b1))?)?;
            let v = ((&self.v[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + ADAM_EPS)?;
            let update = ((&m / bc1)? / denom)?;
            p.var.set(&(p.var.as_tensor() - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// Scalar diagnostics of one optimizer step (batch means).
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss_terms: BTreeMap<LossTerm, f64>,
    pub total: f64,
    /// L2 norm of the objective gradient per network: `registration`,
    /// `translation`, `heads`.
    pub grad_norms: BTreeMap<String, f64>,
}

/// A pair prepared as `(1, 1, H, W)` tensors.
#[derive(Debug, Clone)]
pub struct PairTensors {
    pub x: Tensor,
    pub y: Tensor,
}

impl PairTensors {
    pub fn new(source: &ImageGrid, target: &ImageGrid, dtype: DType, device: &Device) -> Result<Self> {
        if source.shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "source {:?} vs target {:?}",
                source.shape(),
                target.shape()
            )));
        }
        Ok(Self {
            x: source.to_tensor(dtype, device)?,
            y: target.to_tensor(dtype, device)?,
        })
    }
}

/// Forward intermediates of one pair.
pub struct ForwardPass {
    pub phi: Tensor,
    pub y_prime: Tensor,
    pub y_hat: Tensor,
    pub y_prime_warped: Tensor,
    pub terms: Vec<(LossTerm, Tensor)>,
}

/// Networks plus optimizer state.
pub struct Trainer {
    config: TrainConfig,
    device: Device,
    reg: RegistrationNet,
    trans: TranslationNet,
    heads: ProjectionHeads,
    params: Vec<ParamEntry>,
    adam: Adam,
    epoch: usize,
    step: u64,
}

impl Trainer {
    /// Builds and initializes all networks from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let dtype = config.precision.dtype();
        let reg = RegistrationNet::new(&config.arch, dtype, &device)?;
        let trans = TranslationNet::new(&config.arch, dtype, &device)?;
        let heads = ProjectionHeads::new(&config.arch, &config.nce.layer_ids, dtype, &device)?;
        let mut rng = seeded_stream(config.seed, STREAM_INIT);
        for set in [reg.params(), trans.params(), heads.params()] {
            init_parameters(set, InitScheme::Xavier, &mut rng)?;
        }
        let params: Vec<ParamEntry> = reg
            .params()
            .iter()
            .chain(trans.params().iter())
            .chain(heads.params().iter())
            .cloned()
            .collect();
        let adam = Adam::new(&params)?;
        Ok(Self {
            config,
            device,
            reg,
            trans,
            heads,
            params,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn registration_net(&self) -> &RegistrationNet {
        &self.reg
    }

    pub fn translation_net(&self) -> &TranslationNet {
        &self.trans
    }

    pub fn heads(&self) -> &ProjectionHeads {
        &self.heads
    }

    pub fn params(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn prepare(&self, record: &PairRecord) -> Result<PairTensors> {
        PairTensors::new(&record.source, &record.target, self.dtype(), &self.device)
    }

    /// Forward pass of one pair with every active loss term. Locations are
    /// drawn from `rng` in the order PatchNCE(X), PatchNCE(Y), local.
    pub fn forward(&self, pair: &PairTensors, rng: &mut ChaCha8Rng) -> Result<ForwardPass> {
        let cfg = &self.config;
        let ids = &cfg.nce.layer_ids;
        let train = ParamMode::Train;
        let phi = self.reg.forward(&pair.x, &pair.y, train)?;
        let (y_prime, x_stack) = self.trans.forward_with_features(&pair.x, ids, train)?;
        let y_prime_stack = self.trans.encode_features(&y_prime, ids, train)?;
        let (y_hat, y_stack) = self.trans.forward_with_features(&pair.y, ids, train)?;
        let y_hat_stack = self.trans.encode_features(&y_hat, ids, train)?;
        let y_prime_warped = warp_tensor(&y_prime, &phi)?;

        let mut terms = vec![
            (
                LossTerm::PatchNceX,
                patch_nce_from_stacks(&y_prime_stack, &x_stack, &self.heads, &cfg.nce, train, rng)?,
            ),
            (
                LossTerm::PatchNceY,
                patch_nce_from_stacks(&y_hat_stack, &y_stack, &self.heads, &cfg.nce, train, rng)?,
            ),
            (LossTerm::Appearance, appearance_loss(&y_prime_warped, &pair.y)?),
        ];
        if cfg.variant.use_local {
            // frozen view of T_enc and H: only R receives gradient
            let x_warped = warp_tensor(&pair.x, &phi)?;
            let frozen = ParamMode::Frozen;
            let q = self.trans.encode_features(&x_warped, ids, frozen)?;
            let local = patch_nce_from_stacks(&q, &y_stack.detach(), &self.heads, &cfg.nce, frozen, rng)?;
            terms.push((LossTerm::Local, local));
        }
        if cfg.variant.use_global {
            terms.push((LossTerm::Global, global_alignment_loss(&y_prime_warped, &y_hat)?));
        }
        if cfg.weights.lambda_s > 0.0 {
            terms.push((LossTerm::Smooth, smoothness_loss(&phi)?));
        }
        Ok(ForwardPass {
            phi,
            y_prime,
            y_hat,
            y_prime_warped,
            terms,
        })
    }

    /// Gradient of `objective` for every parameter (`None` when the
    /// parameter is not on any gradient path).
    pub fn gradients(&self, objective: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let store = objective.backward()?;
        // detached so optimizer state does not keep the forward graph alive
        Ok(self
            .params
            .iter()
            .map(|p| store.get(p.var.as_tensor()).map(Tensor::detach))
            .collect())
    }

    /// Per-parameter gradient L2 norms of a single loss term, with absent
    /// gradients reported as 0.
    pub fn term_gradient_norms(
        &self,
        pair: &PairTensors,
        term: LossTerm,
        rng: &mut ChaCha8Rng,
    ) -> Result<BTreeMap<String, f64>> {
        let pass = self.forward(pair, rng)?;
        let (_, loss) = pass
            .terms
            .iter()
            .find(|(t, _)| *t == term)
            .ok_or_else(|| Error::InvalidArgument(format!("term {term} is not active")))?;
        let grads = self.gradients(loss)?;
        self.params
            .iter()
            .zip(grads)
            .map(|(p, g)| Ok((p.name.clone(), g.map(|g| l2_norm(&g)).transpose()?.unwrap_or(0.0))))
            .collect()
    }

    /// One optimizer update over `batch`: gradients of the weighted objective
    /// are averaged over the pairs, then Adam is applied with `lr`.
    pub fn train_step(&mut self, batch: &[&PairTensors], lr: f64, rng: &mut ChaCha8Rng) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut acc: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut loss_terms: BTreeMap<LossTerm, f64> = BTreeMap::new();
        for pair in batch {
            let pass = self.forward(pair, rng)?;
            let values: Vec<(LossTerm, f64)> = pass
                .terms
                .iter()
                .map(|(t, v)| Ok((*t, v.to_dtype(DType::F64)?.to_scalar::<f64>()?)))
                .collect::<Result<_>>()?;
            check_finite(values.iter().copied())?;
            for (t, v) in values {
                *loss_terms.entry(t).or_insert(0.0) += v * scale;
            }
            let objective = (weighted_objective(&pass.terms, &self.config.weights)? * scale)?;
            for (slot, g) in acc.iter_mut().zip(self.gradients(&objective)?) {
                *slot = match (slot.take(), g) {
                    (Some(a), Some(g)) => Some((a + g)?),
                    (a, g) => a.or(g),
                };
            }
        }
        let mut sq: BTreeMap<String, f64> = BTreeMap::new();
        for (p, g) in self.params.iter().zip(&acc) {
            let group = p.name.split('.').next().unwrap_or("").to_string();
            let group = match group.as_str() {
                "reg" => "registration",
                "trans" => "translation",
                _ => "heads",
            };
            let n = g.as_ref().map(l2_norm).transpose()?.unwrap_or(0.0);
            *sq.entry(group.to_string()).or_insert(0.0) += n * n;
        }
        let grad_norms = sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect();
        self.adam
            .step(&self.params, &acc, lr, self.config.beta1, self.config.beta2)?;
        self.step += 1;
        let total = loss_terms
            .iter()
            .map(|(t, v)| self.config.weights.weight(*t) * v)
            .sum();
        Ok(StepReport {
            loss_terms,
            total,
            grad_norms,
        })
    }

    /// Predicted field for one pair (no gradient tracking).
    pub fn register(&self, source: &ImageGrid, target: &ImageGrid) -> Result<DeformationField> {
        let pair = PairTensors::new(source, target, self.dtype(), &self.device)?;
        let phi = self.reg.forward(&pair.x, &pair.y, ParamMode::Frozen)?;
        DeformationField::from_tensor(&phi)
    }

    /// `T(img)`.
    pub fn translate(&self, img: &ImageGrid) -> Result<ImageGrid> {
        let out = self
            .trans
            .forward(&img.to_tensor(self.dtype(), &self.device)?, ParamMode::Frozen)?;
        ImageGrid::from_tensor(&out, format!("{}-translated", img.modality()))
    }

    /// Registers every pair of `ds` and scores it.
    pub fn evaluate(&self, ds: &PairedDataset) -> Result<(Vec<PairMetrics>, Vec<String>)> {
        evaluate_with(ds, |r| self.register(&r.source, &r.target))
    }

    /// Writes parameters, Adam moments and progress counters as safetensors.
    pub fn save_checkpoint(&self, path: &Path, val_dsc: Option<f64>) -> Result<()> {
        let cpu = Device::Cpu;
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (i, p) in self.params.iter().enumerate() {
            map.insert(format!("param/{}", p.name), p.var.as_tensor().clone());
            map.insert(format!("adam_m/{}", p.name), self.adam.m[i].clone());
            map.insert(format!("adam_v/{}", p.name), self.adam.v[i].clone());
        }
        let counters = [self.epoch as i64, self.step as i64, self.adam.t as i64];
        map.insert("meta/counters".into(), Tensor::new(&counters[..], &cpu)?);
        map.insert(
            "meta/val_dsc".into(),
            Tensor::new(&[val_dsc.unwrap_or(f64::NAN)][..], &cpu)?,
        );
        map.insert(
            "meta/config".into(),
            Tensor::new(serde_json::to_vec(&self.config)?.as_slice(), &cpu)?,
        );
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        candle_core::safetensors::save(&map, &tmp)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Rebuilds a trainer from a checkpoint. With `config` given, that
    /// configuration is used instead of the stored one; its architecture and
    /// precision must match.
    pub fn load_checkpoint(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let config = match config {
            Some(c) => {
                if c.arch != ckpt.config.arch || c.precision != ckpt.config.precision || c.nce.layer_ids != ckpt.config.nce.layer_ids {
                    return Err(Error::Checkpoint(format!(
                        "{}: architecture differs from the requested configuration",
                        path.display()
                    )));
                }
                c
            }
            None => ckpt.config.clone(),
        };
        let mut trainer = Trainer::new(config)?;
        let take = |prefix: &str, name: &str, like: &Tensor| -> Result<Tensor> {
            let t = ckpt.tensors.get(&format!("{prefix}/{name}")).ok_or_else(|| {
                Error::Checkpoint(format!("{}: missing {prefix}/{name}", path.display()))
            })?;
            if t.dims() != like.dims() {
                return Err(Error::Checkpoint(format!(
                    "{}: {prefix}/{name} has shape {:?}, expected {:?}",
                    path.display(),
                    t.dims(),
                    like.dims()
                )));
            }
            Ok(t.to_dtype(like.dtype())?)
        };
        for (i, p) in trainer.params.iter().enumerate() {
            p.var.set(&take("param", &p.name, p.var.as_tensor())?)?;
            trainer.adam.m[i] = take("adam_m", &p.name, p.var.as_tensor())?;
            trainer.adam.v[i] = take("adam_v", &p.name, p.var.as_tensor())?;
        }
        trainer.epoch = ckpt.epoch;
        trainer.step = ckpt.step;
        trainer.adam.t = ckpt.adam_t;
        Ok(trainer)
    }
}

fn l2_norm(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?)
}

/// Metadata of a stored checkpoint.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub adam_t: u64,
    pub val_dsc: Option<f64>,
    tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("{} not found", path.display())));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let meta = |k: &str| {
            tensors
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing {k}", path.display())))
        };
        let counters: Vec<i64> = meta("meta/counters")?.to_vec1()?;
        if counters.len() != 3 || counters.iter().any(|&c| c < 0) {
            return Err(Error::Checkpoint(format!("{}: malformed counters", path.display())));
        }
        let val: Vec<f64> = meta("meta/val_dsc")?.to_vec1()?;
        let config: TrainConfig = serde_json::from_slice(&meta("meta/config")?.to_vec1::<u8>()?)?;
        Ok(Self {
            config,
            epoch: counters[0] as usize,
            step: counters[1] as u64,
            adam_t: counters[2] as u64,
            val_dsc: val.first().copied().filter(|v| v.is_finite()),
            tensors,
        })
    }
}

/// Scores a field per pair produced by `field_for`. Pairs without both masks
/// are skipped and returned by name.
pub fn evaluate_with<F>(ds: &PairedDataset, mut field_for: F) -> Result<(Vec<PairMetrics>, Vec<String>)>
where
    F: FnMut(&PairRecord) -> Result<DeformationField>,
{
    let mut metrics = Vec::with_capacity(ds.len());
    let mut skipped = Vec::new();
    for r in &ds.records {
        let (Some(sm), Some(tm)) = (&r.source_mask, &r.target_mask) else {
            log::warn!("pair {} has no masks; skipped", r.name);
            skipped.push(r.name.clone());
            continue;
        };
        let field = field_for(r)?;
        let spacing = Spacing {
            row: r.meta.spacing_mm[0],
            col: r.meta.spacing_mm[1],
        };
        metrics.push(evaluate_pair(&r.name, sm, tm, &field, spacing)?);
    }
    Ok((metrics, skipped))
}

/// Aggregate over pairs, or `None` for an empty list.
pub fn summarize(metrics: &[PairMetrics]) -> Result<Option<EvalReport>> {
    if metrics.is_empty() {
        return Ok(None);
    }
    aggregate(metrics, Units::Mm).map(Some)
}

/// One row of `history.csv`: means over an epoch's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub epoch: usize,
    /// Completed optimizer steps at the end of the epoch.
    pub step: u64,
    pub terms: BTreeMap<LossTerm, f64>,
    pub total: f64,
    pub lr: f64,
    pub val_dsc: Option<f64>,
    pub val_hd95: Option<f64>,
}

/// One row of `steps.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub terms: BTreeMap<LossTerm, f64>,
    pub total: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn write_csv_atomic(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        w.write_record(&header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut header = vec!["epoch".to_string(), "step".to_string()];
    header.extend(LossTerm::ALL.iter().map(|t| t.name().to_string()));
    header.extend(["total", "lr", "val_dsc", "val_hd95"].map(String::from));
    let rows = history
        .iter()
        .map(|h| {
            let mut row = vec![h.epoch.to_string(), h.step.to_string()];
            row.extend(LossTerm::ALL.iter().map(|t| fmt_opt(h.terms.get(t).copied())));
            row.extend([fmt_opt(Some(h.total)), fmt_opt(Some(h.lr)), fmt_opt(h.val_dsc), fmt_opt(h.val_hd95)]);
            row
        })
        .collect();
    write_csv_atomic(path, header, rows)
}

pub fn write_steps(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut header = vec!["epoch".to_string(), "step".to_string()];
    header.extend(LossTerm::ALL.iter().map(|t| t.name().to_string()));
    header.push("total".into());
    let rows = steps
        .iter()
        .map(|s| {
            let mut row = vec![s.epoch.to_string(), s.step.to_string()];
            row.extend(LossTerm::ALL.iter().map(|t| fmt_opt(s.terms.get(t).copied())));
            row.push(fmt_opt(Some(s.total)));
            row
        })
        .collect();
    write_csv_atomic(path, header, rows)
}

fn read_rows(path: &Path) -> Result<Vec<HashMap<String, String>>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(headers.iter().map(String::from).zip(rec.iter().map(String::from)).collect())
        })
        .collect()
}

fn parse_field<T: FromStr>(row: &HashMap<String, String>, key: &str, path: &Path) -> Result<Option<T>> {
    match row.get(key).map(String::as_str) {
        None | Some("") => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|_| Error::dataset(path, format!("bad value `{s}` in column {key}"))),
    }
}

fn parse_terms(row: &HashMap<String, String>, path: &Path) -> Result<BTreeMap<LossTerm, f64>> {
    let mut terms = BTreeMap::new();
    for t in LossTerm::ALL {
        if let Some(v) = parse_field(row, t.name(), path)? {
            terms.insert(t, v);
        }
    }
    Ok(terms)
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    read_rows(path)?
        .iter()
        .map(|row| {
            let req = |k: &str| -> Result<f64> {
                parse_field(row, k, path)?.ok_or_else(|| Error::dataset(path, format!("missing {k}")))
            };
            Ok(HistoryRecord {
                epoch: req("epoch")? as usize,
                step: req("step")? as u64,
                terms: parse_terms(row, path)?,
                total: req("total")?,
                lr: req("lr")?,
                val_dsc: parse_field(row, "val_dsc", path)?,
                val_hd95: parse_field(row, "val_hd95", path)?,
            })
        })
        .collect()
}

pub fn read_steps(path: &Path) -> Result<Vec<StepRecord>> {
    read_rows(path)?
        .iter()
        .map(|row| {
            let req = |k: &str| -> Result<f64> {
                parse_field(row, k, path)?.ok_or_else(|| Error::dataset(path, format!("missing {k}")))
            };
            Ok(StepRecord {
                epoch: req("epoch")? as usize,
                step: req("step")? as u64,
                terms: parse_terms(row, path)?,
                total: req("total")?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub run_dir: PathBuf,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub write_samples: bool,
}

impl FitOptions {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        Self {
            run_dir: run_dir.into(),
            resume: None,
            write_samples: true,
        }
    }
}

pub struct FitOutcome {
    /// Best-on-validation checkpoint, or the last one when there is no
    /// validation data.
    pub checkpoint_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub history: Vec<HistoryRecord>,
    pub steps: Vec<StepRecord>,
    /// Validation DSC of the identity field (unregistered pairs).
    pub baseline_val_dsc: Option<f64>,
    pub trainer: Trainer,
}

fn mean_scores(metrics: &[PairMetrics]) -> (Option<f64>, Option<f64>) {
    if metrics.is_empty() {
        return (None, None);
    }
    let dsc = metrics.iter().map(PairMetrics::mean_dice).sum::<f64>() / metrics.len() as f64;
    let hd: Vec<f64> = metrics.iter().filter_map(PairMetrics::mean_hd95).collect();
    let hd = (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64);
    (Some(dsc), hd)
}

fn write_sample(trainer: &Trainer, record: &PairRecord, path: &Path) -> Result<()> {
    let pair = trainer.prepare(record)?;
    let phi = trainer.reg.forward(&pair.x, &pair.y, ParamMode::Frozen)?;
    let y_prime = trainer.trans.forward(&pair.x, ParamMode::Frozen)?;
    let panels = [
        pair.x.clone(),
        pair.y.clone(),
        y_prime.clone(),
        warp_tensor(&pair.x, &phi)?,
        warp_tensor(&y_prime, &phi)?,
    ]
    .iter()
    .map(tensor_to_array2)
    .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = panels.iter().map(|p| p.view()).collect();
    viz::save_gray(&viz::montage(&views)?, path)
}

/// Trains on `splits.train`, validating on `splits.val` every
/// `checkpoint_interval` epochs and after the final epoch.
///
/// Writes `config.json`, `history.csv`, `steps.csv`,
/// `checkpoints/{last,best}.ckpt` and `samples/epoch_%03d.png` under
/// `opts.run_dir`. A non-finite loss aborts with an error; the checkpoint of
/// the last completed epoch is kept.
pub fn fit(splits: &DatasetSplits, config: &TrainConfig, opts: &FitOptions) -> Result<FitOutcome> {
    if splits.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let run = &opts.run_dir;
    let ckpt_dir = run.join("checkpoints");
    let sample_dir = run.join("samples");
    fs::create_dir_all(&ckpt_dir)?;
    if opts.write_samples {
        fs::create_dir_all(&sample_dir)?;
    }
    let last_path = ckpt_dir.join("last.ckpt");
    let best_path = ckpt_dir.join("best.ckpt");
    let history_path = run.join("history.csv");
    let steps_path = run.join("steps.csv");

    let (mut trainer, mut history, mut steps, mut best) = match &opts.resume {
        Some(p) => {
            let trainer = Trainer::load_checkpoint(p, Some(config.clone()))?;
            let done = trainer.epoch;
            let keep_h = |h: &HistoryRecord| h.epoch <= done;
            let history: Vec<_> = if history_path.is_file() {
                read_history(&history_path)?.into_iter().filter(keep_h).collect()
            } else {
                Vec::new()
            };
            let steps: Vec<_> = if steps_path.is_file() {
                read_steps(&steps_path)?.into_iter().filter(|s| s.epoch <= done).collect()
            } else {
                Vec::new()
            };
            let best = if best_path.is_file() {
                Checkpoint::read(&best_path)?.val_dsc
            } else {
                None
            };
            log::info!("resuming after epoch {done} (step {})", trainer.step);
            (trainer, history, steps, best)
        }
        None => (Trainer::new(config.clone())?, Vec::new(), Vec::new(), None),
    };
    fs::write(run.join("config.json"), serde_json::to_string_pretty(trainer.config())?)?;

    let dtype = trainer.dtype();
    let device = trainer.device().clone();
    let train: Vec<PairTensors> = splits
        .train
        .records
        .iter()
        .map(|r| PairTensors::new(&r.source, &r.target, dtype, &device))
        .collect::<Result<_>>()?;

    let identity = |r: &PairRecord| DeformationField::identity(r.source.height(), r.source.width());
    let baseline_val_dsc = mean_scores(&evaluate_with(&splits.val, identity)?.0).0;
    if let Some(b) = baseline_val_dsc {
        log::info!("unregistered validation DSC {b:.4}");
    }
    let sample_record = splits.val.records.first().unwrap_or(&splits.train.records[0]);

    let cfg = trainer.config().clone();
    for epoch in trainer.epoch + 1..=cfg.epochs {
        let lr = lr_at_epoch(epoch, &cfg)?;
        let order = epoch_permutation(cfg.seed, epoch, train.len());
        let mut sums: BTreeMap<LossTerm, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        let mut n_steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PairTensors> = chunk.iter().map(|&i| &train[i]).collect();
            let mut rng = step_rng(cfg.seed, trainer.step + 1);
            let report = trainer.train_step(&batch, lr, &mut rng).inspect_err(|e| {
                log::error!("epoch {epoch} step {}: {e}; keeping {}", trainer.step + 1, last_path.display());
            })?;
            for (t, v) in &report.loss_terms {
                *sums.entry(*t).or_insert(0.0) += v;
            }
            total_sum += report.total;
            n_steps += 1;
            steps.push(StepRecord {
                epoch,
                step: trainer.step,
                terms: report.loss_terms,
                total: report.total,
            });
        }
        trainer.epoch = epoch;
        let n = n_steps as f64;
        let evaluate_now = epoch % cfg.checkpoint_interval == 0 || epoch == cfg.epochs;
        let (val_dsc, val_hd95) = if evaluate_now {
            mean_scores(&trainer.evaluate(&splits.val)?.0)
        } else {
            (None, None)
        };
        let record = HistoryRecord {
            epoch,
            step: trainer.step,
            terms: sums.into_iter().map(|(t, v)| (t, v / n)).collect(),
            total: total_sum / n,
            lr,
            val_dsc,
            val_hd95,
        };
        log::info!(
            "epoch {epoch}/{} total {:.4} lr {lr:.2e}{}",
            cfg.epochs,
            record.total,
            val_dsc.map(|d| format!(" val_dsc {d:.4}")).unwrap_or_default()
        );
        history.push(record);
        trainer.save_checkpoint(&last_path, val_dsc)?;
        if let Some(d) = val_dsc {
            if best.is_none_or(|b| d > b) {
                best = Some(d);
                trainer.save_checkpoint(&best_path, val_dsc)?;
            }
        }
        if evaluate_now && opts.write_samples {
            write_sample(&trainer, sample_record, &sample_dir.join(format!("epoch_{epoch:03}.png")))?;
        }
        write_history(&history_path, &history)?;
        write_steps(&steps_path, &steps)?;
    }
    if !last_path.is_file() {
        trainer.save_checkpoint(&last_path, None)?;
        write_history(&history_path, &history)?;
        write_steps(&steps_path, &steps)?;
    }
    let best_checkpoint = best_path.is_file().then(|| best_path.clone());
    Ok(FitOutcome {
        checkpoint_path: best_checkpoint.clone().unwrap_or_else(|| last_path.clone()),
        last_checkpoint: last_path,
        best_checkpoint,
        history,
        steps,
        baseline_val_dsc,
        trainer,
    })
}
