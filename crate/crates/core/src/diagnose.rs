//! Modality-isolated gradients on adapter `B` matrices and their cosine.
//!
//! Blocking a modality means its embedding enters the loss as a constant,
//! so only the other tower's path carries gradient to the shared adapter.

use serde::{Deserialize, Serialize};

use crate::adapt::{alignment_loss_on_tape, encode_batch_on_tape, AdaptConfig};
use crate::backbone::FrozenEncoder;
use crate::data::ItemCatalog;
use crate::error::{Result, SdaError};
use crate::moda::AdapterSet;
use crate::numerics::{cosine, l2_norm, Matrix, Tape, Var};

/// Gradient norms below this make the cosine undefined.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Neither,
    Text,
    Image,
    Both,
}

/// Gradient of `loss_fn(e_t, e_v)` w.r.t. the parameter `param`, with the
/// embeddings named by `block` detached.
#[allow(clippy::too_many_arguments)]
pub fn branch_gradient_with(
    encoder: &FrozenEncoder,
    catalog: &ItemCatalog,
    indices: &[usize],
    adapters: &AdapterSet,
    param: &str,
    block: Block,
    loss_fn: impl Fn(&Tape, Var, Var) -> Result<Var>,
) -> Result<Matrix> {
    let tape = Tape::new();
    let (mut e_t, mut e_v) = encode_batch_on_tape(&tape, encoder, catalog, indices, Some(adapters))?;
    if matches!(block, Block::Text | Block::Both) {
        e_t = tape.detach(e_t);
    }
    if matches!(block, Block::Image | Block::Both) {
        e_v = tape.detach(e_v);
    }
    let loss = loss_fn(&tape, e_t, e_v)?;
    let var = tape
        .param_var(param)
        .ok_or_else(|| SdaError::NotFound(format!("parameter `{param}`")))?;
    let grads = tape.backward(loss)?;
    Ok(grads.wrt(var))
}

/// The tape name of the `B` matrix probed at `site` (first expert for MoDA).
pub fn probe_param(adapters: &AdapterSet, site: &str) -> Result<String> {
    adapters
        .get(site)
        .map(|a| a.probe_b_name(site))
        .ok_or_else(|| SdaError::NotFound(format!("adapter at site `{site}`")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolatedGradients {
    /// Image branch blocked.
    pub text: Matrix,
    /// Text branch blocked.
    pub image: Matrix,
    pub full: Matrix,
}

impl IsolatedGradients {
    /// Largest absolute entry of `text + image - full`.
    pub fn decomposition_error(&self) -> f64 {
        self.text
            .add(&self.image)
            .and_then(|s| s.sub(&self.full))
            .map(|d| d.max_abs())
            .unwrap_or(f64::INFINITY)
    }
}

pub fn modality_isolated_gradients(
    encoder: &FrozenEncoder,
    catalog: &ItemCatalog,
    indices: &[usize],
    adapters: &AdapterSet,
    site: &str,
    config: &AdaptConfig,
) -> Result<IsolatedGradients> {
    let param = probe_param(adapters, site)?;
    let loss = |t: &Tape, a: Var, b: Var| alignment_loss_on_tape(t, a, b, config);
    let grad = |block| branch_gradient_with(encoder, catalog, indices, adapters, &param, block, loss);
    Ok(IsolatedGradients {
        text: grad(Block::Image)?,
        image: grad(Block::Text)?,
        full: grad(Block::Neither)?,
    })
}

/// Cosine of two flattened gradients, absent when either is near zero.
pub fn gradient_cosine(a: &Matrix, b: &Matrix) -> Option<f64> {
    if l2_norm(a.data()) < NORM_FLOOR || l2_norm(b.data()) < NORM_FLOOR {
        return None;
    }
    cosine(a.data(), b.data())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictEntry {
    pub label: String,
    pub site: String,
    pub param: String,
    pub cosine: Option<f64>,
    pub text_norm: f64,
    pub image_norm: f64,
    pub decomposition_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub seed: u64,
    pub probe_items: Vec<String>,
    pub entries: Vec<ConflictEntry>,
}

impl ConflictReport {
    pub fn cosines(&self, label: &str) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.label == label)
            .filter_map(|e| e.cosine)
            .collect()
    }

    /// Rows `label,site,param,cosine,text_norm,image_norm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,site,param,cosine,text_norm,image_norm\n");
        for e in &self.entries {
            let c = e.cosine.map(|c| c.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.label, e.site, e.param, c, e.text_norm, e.image_norm
            ));
        }
        out
    }
}

/// Probe batch of `size` items drawn deterministically from `seed`.
pub fn probe_indices(n_items: usize, size: usize, seed: u64) -> Vec<usize> {
    crate::adapt::epoch_batches(n_items, size.min(n_items), seed ^ 0x5eed_9b0b, 0)
        .into_iter()
        .next()
        .unwrap_or_default()
}

/// Cosines for each labelled adapter set at each of `sites` on one probe
/// batch.
pub fn conflict_report(
    encoder: &FrozenEncoder,
    catalog: &ItemCatalog,
    adapter_sets: &[(String, &AdapterSet)],
    sites: &[String],
    config: &AdaptConfig,
    seed: u64,
) -> Result<ConflictReport> {
    let indices = probe_indices(catalog.len(), config.batch_size, seed);
    if indices.len() < 2 {
        return Err(SdaError::Degenerate("probe batch needs at least two items".into()));
    }
    let mut entries = Vec::new();
    for (label, adapters) in adapter_sets {
        for site in sites {
            let g = modality_isolated_gradients(encoder, catalog, &indices, adapters, site, config)?;
            entries.push(ConflictEntry {
                label: label.clone(),
                site: site.clone(),
                param: probe_param(adapters, site)?,
                cosine: gradient_cosine(&g.text, &g.image),
                text_norm: g.text.frobenius_norm(),
                image_norm: g.image.frobenius_norm(),
                decomposition_error: g.decomposition_error(),
            });
        }
    }
    Ok(ConflictReport {
        seed,
        probe_items: indices.iter().map(|&i| catalog.get(i).item_id.clone()).collect(),
        entries,
    })
}
