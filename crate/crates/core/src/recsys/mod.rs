//! Downstream recommenders over precomputed item embeddings.
//!
//! Both models keep their weights in a [`ParamSet`] under fixed names so
//! checkpoints are generic. Item content enters through a trainable
//! [`FusionMode`] projection of the text and image embedding tables.

mod bpr;
mod seq;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdaError};
use crate::numerics::{Matrix, ParamSet, Tape, Var};

pub use bpr::{bpr_loss_on_tape, bpr_train, BprModel, Triple};
pub use seq::{seq_loss_on_tape, seq_train, SeqExample, SeqModel};

pub const FUSION_PARAM: &str = "fusion.proj";
pub const ITEM_EMB_PARAM: &str = "item.emb";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    ConcatLinear,
    TextOnly,
    ImageOnly,
    IdOnly,
}

impl FusionMode {
    /// Input width of the projection, or `None` for `id_only`.
    pub fn input_dim(self, d_m: usize) -> Option<usize> {
        match self {
            Self::ConcatLinear => Some(2 * d_m),
            Self::TextOnly | Self::ImageOnly => Some(d_m),
            Self::IdOnly => None,
        }
    }
}

impl FromStr for FusionMode {
    type Err = SdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat_linear" => Ok(Self::ConcatLinear),
            "text_only" => Ok(Self::TextOnly),
            "image_only" => Ok(Self::ImageOnly),
            "id_only" => Ok(Self::IdOnly),
            other => Err(SdaError::Config(format!(
                "unknown fusion `{other}` (expected concat_linear, text_only, image_only, id_only)"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ConcatLinear => "concat_linear",
            Self::TextOnly => "text_only",
            Self::ImageOnly => "image_only",
            Self::IdOnly => "id_only",
        })
    }
}

/// Text and image embedding tables with matching row order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentFeatures {
    pub text: Matrix,
    pub image: Matrix,
}

impl ContentFeatures {
    pub fn new(text: Matrix, image: Matrix) -> Result<Self> {
        text.ensure_same_shape(&image, "content tables")?;
        Ok(Self { text, image })
    }

    /// Zero tables, for models that ignore content.
    pub fn empty(n_items: usize) -> Self {
        Self {
            text: Matrix::zeros(n_items, 0),
            image: Matrix::zeros(n_items, 0),
        }
    }

    pub fn n_items(&self) -> usize {
        self.text.rows()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    /// The matrix the projection multiplies, per mode.
    pub fn input(&self, mode: FusionMode) -> Option<Matrix> {
        match mode {
            FusionMode::ConcatLinear => {
                let mut out = Matrix::zeros(self.n_items(), 2 * self.dim());
                for r in 0..self.n_items() {
                    let row = out.row_mut(r);
                    row[..self.dim()].copy_from_slice(self.text.row(r));
                    row[self.dim()..].copy_from_slice(self.image.row(r));
                }
                Some(out)
            }
            FusionMode::TextOnly => Some(self.text.clone()),
            FusionMode::ImageOnly => Some(self.image.clone()),
            FusionMode::IdOnly => None,
        }
    }
}

/// Projection from an item's embedding pair to the recommender space.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionAdapter {
    pub mode: FusionMode,
    /// `input_dim x d_r`; empty for `id_only`.
    pub projection: Matrix,
    pub d_r: usize,
}

impl FusionAdapter {
    pub fn new(mode: FusionMode, projection: Matrix, d_m: usize, d_r: usize) -> Result<Self> {
        let want = mode.input_dim(d_m).map(|i| (i, d_r)).unwrap_or((0, d_r));
        if projection.shape() != want {
            return Err(SdaError::Shape(format!(
                "{mode} projection is {:?}, expected {want:?}",
                projection.shape()
            )));
        }
        Ok(Self { mode, projection, d_r })
    }

    /// Fused content vector of one item.
    pub fn fuse(&self, e_t: &[f64], e_v: &[f64]) -> Result<Vec<f64>> {
        if e_t.len() != e_v.len() {
            return Err(SdaError::Shape(format!(
                "embedding pair of widths {} and {}",
                e_t.len(),
                e_v.len()
            )));
        }
        let input: Vec<f64> = match self.mode {
            FusionMode::IdOnly => return Ok(vec![0.0; self.d_r]),
            FusionMode::ConcatLinear => e_t.iter().chain(e_v).copied().collect(),
            FusionMode::TextOnly => e_t.to_vec(),
            FusionMode::ImageOnly => e_v.to_vec(),
        };
        if input.len() != self.projection.rows() {
            return Err(SdaError::Dimension {
                layer: FUSION_PARAM.into(),
                expected: self.projection.rows(),
                got: input.len(),
            });
        }
        Ok(Matrix::row_vector(&input).matmul(&self.projection)?.into_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bpr,
    Seq,
}

impl FromStr for ModelKind {
    type Err = SdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpr" => Ok(Self::Bpr),
            "seq" => Ok(Self::Seq),
            other => Err(SdaError::Config(format!("unknown model `{other}` (expected bpr, seq)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bpr => "bpr",
            Self::Seq => "seq",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecConfig {
    pub model: ModelKind,
    pub fusion: FusionMode,
    pub d_r: usize,
    pub steps: usize,
    /// Triples per BPR step, sequences per sequential step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Sampled negatives per position for the sequential model.
    pub negatives: usize,
    pub max_len: usize,
    /// Std of the ID embeddings at init.
    pub id_init_std: f64,
    /// Std of every other weight at init, scaled by `1/sqrt(fan_in)`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Seq,
            fusion: FusionMode::ConcatLinear,
            d_r: 64,
            steps: 400,
            batch_size: 16,
            learning_rate: 5e-3,
            l2: 0.0,
            negatives: 100,
            max_len: 50,
            id_init_std: 0.01,
            init_scale: 1.0,
            seed: 3,
        }
    }
}

impl RecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_r == 0 || self.batch_size == 0 || self.max_len == 0 || self.negatives == 0 {
            return Err(SdaError::Config(
                "rec.d_r, batch_size, max_len and negatives must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.l2 < 0.0 || self.id_init_std < 0.0 || self.init_scale < 0.0 {
            return Err(SdaError::Config("rec rates and scales must be nonnegative".into()));
        }
        if self.max_len > 50 {
            return Err(SdaError::Config("rec.max_len is capped at 50".into()));
        }
        Ok(())
    }
}

fn glorot(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::randn(rows, cols, scale / (rows.max(1) as f64).sqrt(), rng)
}

/// Adds the fusion projection to `params` when the mode uses content.
fn init_fusion(params: &mut ParamSet, content: &ContentFeatures, config: &RecConfig, rng: &mut ChaCha8Rng) {
    if let Some(d_in) = config.fusion.input_dim(content.dim()) {
        params.insert(FUSION_PARAM.into(), glorot(d_in, config.d_r, config.init_scale, rng));
    }
}

/// `|I| x d_r` fused content on the tape, or `None` for `id_only`.
fn fused_on_tape(tape: &Tape, params: &ParamSet, content: &ContentFeatures, mode: FusionMode) -> Option<Var> {
    let input = content.input(mode)?;
    let proj = tape.param(FUSION_PARAM, params.get(FUSION_PARAM)?);
    let x = tape.constant(input);
    Some(tape.matmul(x, proj))
}

/// The model-facing fusion adapter held in `params`.
fn fusion_adapter(params: &ParamSet, mode: FusionMode, d_m: usize, d_r: usize) -> Result<FusionAdapter> {
    let proj = params.get(FUSION_PARAM).cloned().unwrap_or_else(|| Matrix::zeros(0, d_r));
    FusionAdapter::new(mode, proj, d_m, d_r)
}

/// Uniform item index different from everything in `exclude` (falls back to
/// any item when all are excluded).
fn sample_other(n_items: usize, exclude: &std::collections::HashSet<usize>, rng: &mut ChaCha8Rng) -> usize {
    if exclude.len() >= n_items {
        return rng.random_range(0..n_items);
    }
    loop {
        let j = rng.random_range(0..n_items);
        if !exclude.contains(&j) {
            return j;
        }
    }
}

/// Every trainable slot of `params` by name.
fn slots(params: &mut ParamSet) -> Vec<(String, &mut Matrix)> {
    params.iter_mut().map(|(k, v)| (k.clone(), v)).collect()
}

/// Gradients for every name in `params`, zero where unreached.
fn named_grads(tape: &Tape, grads: &crate::numerics::Gradients, params: &ParamSet) -> ParamSet {
    params
        .iter()
        .map(|(k, v)| {
            let g = tape
                .param_var(k)
                .map(|var| grads.wrt(var))
                .unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols()));
            (k.clone(), g)
        })
        .collect()
}
