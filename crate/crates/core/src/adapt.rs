//! Stage-1 training: only adapter parameters move, against an alignment
//! loss over batches of catalog items.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{site_name, EncoderConfig, FrozenEncoder, Modality};
use crate::cmsa::{cmsa_loss_on_tape, infonce_loss_on_tape, CmsaConfig, TeacherTempMode};
use crate::data::ItemCatalog;
use crate::error::{Result, SdaError};
use crate::moda::{AdapterKind, AdapterSet, ModaConfig};
use crate::numerics::{Matrix, ParamSet, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cmsa,
    Infonce,
}

impl FromStr for LossKind {
    type Err = SdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmsa" => Ok(Self::Cmsa),
            "infonce" => Ok(Self::Infonce),
            other => Err(SdaError::Config(format!("unknown loss `{other}` (expected cmsa, infonce)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cmsa => "cmsa",
            Self::Infonce => "infonce",
        })
    }
}

/// Which adapter family stage 1 trains, or none at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterChoice {
    Moda,
    Lora,
    None,
}

impl AdapterChoice {
    pub fn kind(self) -> Option<AdapterKind> {
        match self {
            Self::Moda => Some(AdapterKind::Moda),
            Self::Lora => Some(AdapterKind::Lora),
            Self::None => None,
        }
    }
}

impl FromStr for AdapterChoice {
    type Err = SdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moda" => Ok(Self::Moda),
            "lora" => Ok(Self::Lora),
            "none" => Ok(Self::None),
            other => Err(SdaError::Config(format!(
                "unknown adapter `{other}` (expected moda, lora, none)"
            ))),
        }
    }
}

impl fmt::Display for AdapterChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Moda => "moda",
            Self::Lora => "lora",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub loss: LossKind,
    pub adapter: AdapterChoice,
    pub batch_size: usize,
    /// Optimizer steps, one batch each.
    pub steps: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub teacher_temp_mode: TeacherTempMode,
    pub detach_teacher: bool,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub moda: ModaConfig,
    pub encoder: EncoderConfig,
    /// Adapter sites; empty means every `q_proj` and `k_proj`.
    pub sites: Vec<String>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Cmsa,
            adapter: AdapterChoice::Moda,
            batch_size: 32,
            steps: 1000,
            learning_rate: 1e-3,
            tau: 0.07,
            teacher_temp_mode: TeacherTempMode::Divide,
            detach_teacher: true,
            clip_norm: 5.0,
            seed: 7,
            moda: ModaConfig::default(),
            encoder: EncoderConfig::default(),
            sites: Vec::new(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(SdaError::Config(format!(
                "adapt.batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SdaError::Config("adapt.learning_rate must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(SdaError::Config("adapt.clip_norm must be >= 0".into()));
        }
        self.cmsa().validate()?;
        self.moda.validate()?;
        self.encoder.validate()
    }

    pub fn cmsa(&self) -> CmsaConfig {
        CmsaConfig {
            tau: self.tau,
            teacher_temp_mode: self.teacher_temp_mode,
            detach_teacher: self.detach_teacher,
        }
    }

    /// The configured sites, or every `q_proj`/`k_proj` when none are listed.
    pub fn resolved_sites(&self) -> Vec<String> {
        if !self.sites.is_empty() {
            return self.sites.clone();
        }
        (0..self.encoder.layers)
            .flat_map(|k| [site_name(k, "q_proj"), site_name(k, "k_proj")])
            .collect()
    }
}

/// One epoch of shuffled index batches. A short final batch is dropped.
pub fn epoch_batches(n_items: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Index batch drawn from the catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemBatch {
    pub epoch: u64,
    pub indices: Vec<usize>,
}

impl ItemBatch {
    /// `(len * token_count) x feature_width` stack of one modality's tokens.
    pub fn tokens(&self, catalog: &ItemCatalog, modality: Modality) -> Result<Matrix> {
        stacked_tokens(catalog, &self.indices, modality)
    }
}

pub fn stacked_tokens(catalog: &ItemCatalog, indices: &[usize], modality: Modality) -> Result<Matrix> {
    let parts: Vec<&Matrix> = indices
        .iter()
        .map(|&i| {
            let item = catalog.get(i);
            match modality {
                Modality::Text => &item.text_features,
                Modality::Image => &item.image_features,
            }
        })
        .collect();
    Matrix::vstack(&parts)
}

/// Endless stream of batches, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n_items: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchStream {
    type Item = ItemBatch;

    fn next(&mut self) -> Option<ItemBatch> {
        loop {
            if let Some(indices) = self.pending.next() {
                return Some(ItemBatch {
                    epoch: self.epoch,
                    indices,
                });
            }
            if self.n_items < self.batch_size {
                return None;
            }
            self.epoch += 1;
            self.pending = epoch_batches(self.n_items, self.batch_size, self.seed, self.epoch).into_iter();
        }
    }
}

pub fn make_batches(catalog: &ItemCatalog, batch_size: usize, seed: u64) -> Result<BatchStream> {
    if batch_size < 2 || batch_size > catalog.len() {
        return Err(SdaError::Config(format!(
            "batch size {batch_size} must lie in [2, {}]",
            catalog.len()
        )));
    }
    Ok(BatchStream {
        n_items: catalog.len(),
        batch_size,
        seed,
        epoch: 0,
        pending: epoch_batches(catalog.len(), batch_size, seed, 0).into_iter(),
    })
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every slot that has an entry in `grads`.
    pub fn step(&mut self, params: Vec<(String, &mut Matrix)>, grads: &ParamSet, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, value) in params {
            let Some(g) = grads.get(&name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name)
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((p, gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Euclidean norm over every entry of every matrix.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Matrix>) -> f64 {
    grads
        .into_iter()
        .flat_map(|m| m.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = global_norm(grads.values());
    if max_norm > 0.0 && norm > max_norm {
        let f = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(f);
        }
    }
    norm
}

/// Telemetry group of a parameter name: `B`, `A`, `gate` or `emb`.
pub fn param_group(name: &str) -> &'static str {
    if name.ends_with(".B") {
        "B"
    } else if name.ends_with(".A") {
        "A"
    } else if name.contains(".gate.") {
        "gate"
    } else {
        "emb"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Pre-clipping gradient norm per parameter group.
    pub grad_norms: BTreeMap<String, f64>,
    pub global_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub wall_time_secs: f64,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Mean loss over the first and last `window` steps.
    pub fn loss_drop(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.steps.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..w]), mean(&self.steps[self.steps.len() - w..])))
    }
}

/// Records both towers on `tape` for the items in `indices`; returns
/// `(text, image)` embedding nodes.
pub fn encode_batch_on_tape(
    tape: &Tape,
    encoder: &FrozenEncoder,
    catalog: &ItemCatalog,
    indices: &[usize],
    adapters: Option<&AdapterSet>,
) -> Result<(Var, Var)> {
    let xt = tape.constant(stacked_tokens(catalog, indices, Modality::Text)?);
    let xv = tape.constant(stacked_tokens(catalog, indices, Modality::Image)?);
    let e_t = encoder.encode_on_tape(tape, xt, Modality::Text, adapters)?;
    let e_v = encoder.encode_on_tape(tape, xv, Modality::Image, adapters)?;
    Ok((e_t, e_v))
}

/// The configured alignment loss on two embedding nodes.
pub fn alignment_loss_on_tape(tape: &Tape, e_t: Var, e_v: Var, config: &AdaptConfig) -> Result<Var> {
    match config.loss {
        LossKind::Cmsa => cmsa_loss_on_tape(tape, e_t, e_v, &config.cmsa(), None),
        LossKind::Infonce => infonce_loss_on_tape(tape, e_t, e_v, config.tau),
    }
}

/// Fresh adapters for `config`; empty when the adapter choice is `none`.
pub fn init_adapters(encoder: &FrozenEncoder, config: &AdaptConfig) -> Result<AdapterSet> {
    let kind = config.adapter.kind().unwrap_or(AdapterKind::Moda);
    let sites = match config.adapter {
        AdapterChoice::None => Vec::new(),
        _ => config.resolved_sites(),
    };
    AdapterSet::init(encoder, &sites, kind, &config.moda, config.seed)
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub adapters: AdapterSet,
    pub log: TrainLog,
    /// Frozen-weight hash, identical before and after training.
    pub encoder_hash: String,
}

/// Builds the frozen encoder from `config.encoder` and trains adapters.
pub fn run_stage1(catalog: &ItemCatalog, config: &AdaptConfig) -> Result<Stage1Output> {
    let encoder = FrozenEncoder::new(config.encoder.clone())?;
    run_stage1_with(&encoder, catalog, config)
}

pub fn run_stage1_with(encoder: &FrozenEncoder, catalog: &ItemCatalog, config: &AdaptConfig) -> Result<Stage1Output> {
    config.validate()?;
    if catalog.is_empty() {
        return Err(SdaError::Degenerate("stage 1 needs a nonempty catalog".into()));
    }
    let before = encoder.weight_hash();
    let mut adapters = init_adapters(encoder, config)?;
    encoder.validate_adapters(&adapters)?;
    let mut log = TrainLog::default();
    if adapters.is_empty() {
        return Ok(Stage1Output {
            adapters,
            log,
            encoder_hash: before,
        });
    }
    let start = Instant::now();
    let mut adam = Adam::default();
    let batches = make_batches(catalog, config.batch_size, config.seed)?;
    for (step, batch) in batches.take(config.steps).enumerate() {
        let tape = Tape::new();
        let (e_t, e_v) = encode_batch_on_tape(&tape, encoder, catalog, &batch.indices, Some(&adapters))?;
        let loss = alignment_loss_on_tape(&tape, e_t, e_v, config)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(SdaError::Divergence { step });
        }
        let grads = tape.backward(loss)?;
        let mut named: ParamSet = adapters
            .params()
            .keys()
            .map(|k| (k.clone(), grads.get(k).unwrap_or_else(|| Matrix::zeros(0, 0))))
            .filter(|(_, g)| !g.is_empty())
            .collect();
        if !named.values().all(Matrix::is_finite) {
            return Err(SdaError::Divergence { step });
        }
        let mut groups: BTreeMap<String, f64> = BTreeMap::new();
        for (name, g) in &named {
            *groups.entry(param_group(name).to_string()).or_default() += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        groups.values_mut().for_each(|v| *v = v.sqrt());
        let norm = clip_global_norm(&mut named, config.clip_norm);
        adam.step(adapters.slots_mut(), &named, config.learning_rate);
        log.steps.push(StepRecord {
            step,
            loss: value,
            grad_norms: groups,
            global_grad_norm: norm,
        });
    }
    log.wall_time_secs = start.elapsed().as_secs_f64();
    let after = encoder.weight_hash();
    debug_assert_eq!(before, after);
    Ok(Stage1Output {
        adapters,
        log,
        encoder_hash: after,
    })
}
