//! Next-item model with one causal self-attention block.
//!
//! ```text
//! x_i  = id_i + f_i                       (item input, f_i fused content)
//! H    = x[seq] + pos[0..L]
//! Z    = H + softmax(H Wq (H Wk)ᵀ / sqrt(d) + causal mask) H Wv
//! O    = Z + tanh(Z W1) W2
//! s_pj = O_p · x_j
//! ```

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    fused_on_tape, fusion_adapter, glorot, init_fusion, named_grads, sample_other, slots, ContentFeatures,
    FusionAdapter, RecConfig, ITEM_EMB_PARAM,
};
use crate::adapt::Adam;
use crate::error::{Result, SdaError};
use crate::eval::{LooSplit, Query, Scorer};
use crate::numerics::{Matrix, ParamSet, Tape, Var};

pub const POS_EMB: &str = "pos.emb";
const WEIGHTS: [&str; 5] = ["attn.q", "attn.k", "attn.v", "ffn.w1", "ffn.w2"];

/// Additive mask value for blocked attention entries.
const BLOCKED: f64 = -1e9;

/// A training sequence with its sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqExample {
    /// Inputs are `items[..n-1]`, targets `items[1..]`.
    pub items: Vec<usize>,
    /// Negatives for each target position.
    pub negatives: Vec<Vec<usize>>,
}

impl SeqExample {
    /// Draws `k` negatives per position uniformly from items other than
    /// that position's target.
    pub fn sample(items: Vec<usize>, n_items: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let negatives = items
            .iter()
            .skip(1)
            .map(|&target| {
                let exclude = HashSet::from([target]);
                (0..k).map(|_| sample_other(n_items, &exclude, rng)).collect()
            })
            .collect();
        Self { items, negatives }
    }

    pub fn positions(&self) -> usize {
        self.items.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    pub config: RecConfig,
    pub params: ParamSet,
    content: ContentFeatures,
}

struct Layout {
    /// `(first row, real length, padded length)` per sequence.
    blocks: Vec<(usize, usize, usize)>,
    rows: usize,
}

impl SeqModel {
    pub fn init(content: ContentFeatures, config: &RecConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_r;
        let mut params = ParamSet::new();
        params.insert(
            ITEM_EMB_PARAM.into(),
            Matrix::randn(content.n_items(), d, config.id_init_std, &mut rng),
        );
        params.insert(POS_EMB.into(), Matrix::randn(config.max_len, d, config.id_init_std, &mut rng));
        for w in WEIGHTS {
            params.insert(w.into(), glorot(d, d, config.init_scale, &mut rng));
        }
        init_fusion(&mut params, &content, config, &mut rng);
        Self::from_parts(config.clone(), params, content)
    }

    pub fn from_parts(config: RecConfig, params: ParamSet, content: ContentFeatures) -> Result<Self> {
        let item = params
            .get(ITEM_EMB_PARAM)
            .ok_or_else(|| SdaError::NotFound(format!("parameter `{ITEM_EMB_PARAM}`")))?;
        if item.rows() != content.n_items() {
            return Err(SdaError::Shape(format!(
                "{} item embeddings for {} content rows",
                item.rows(),
                content.n_items()
            )));
        }
        for w in WEIGHTS.iter().chain(&[POS_EMB]) {
            if !params.contains_key(*w) {
                return Err(SdaError::NotFound(format!("parameter `{w}`")));
            }
        }
        Ok(Self { config, params, content })
    }

    pub fn n_items(&self) -> usize {
        self.content.n_items()
    }

    pub fn fusion(&self) -> Result<FusionAdapter> {
        fusion_adapter(&self.params, self.config.fusion, self.content.dim(), self.config.d_r)
    }

    /// Item input table `id + fused content` on the tape.
    fn item_table(&self, tape: &Tape) -> Var {
        let ids = tape.param(ITEM_EMB_PARAM, &self.params[ITEM_EMB_PARAM]);
        match fused_on_tape(tape, &self.params, &self.content, self.config.fusion) {
            Some(f) => tape.add(ids, f),
            None => ids,
        }
    }

    /// Hidden states for the concatenated, right-padded input sequences.
    fn hidden(&self, tape: &Tape, table: Var, seqs: &[&[usize]], pad_to: Option<usize>) -> Result<(Var, Layout)> {
        let d = self.config.d_r;
        let mut blocks = Vec::with_capacity(seqs.len());
        let (mut idx, mut pos) = (Vec::new(), Vec::new());
        for s in seqs {
            let padded = pad_to.unwrap_or(s.len()).max(s.len());
            if padded > self.config.max_len || s.is_empty() {
                return Err(SdaError::Shape(format!(
                    "input of length {padded} outside [1, {}]",
                    self.config.max_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&i| i >= self.n_items()) {
                return Err(SdaError::UnknownItem(format!("index {bad}")));
            }
            blocks.push((idx.len(), s.len(), padded));
            idx.extend_from_slice(s);
            idx.extend(std::iter::repeat_n(0, padded - s.len()));
            pos.extend(0..padded);
        }
        let rows = idx.len();
        let mut mask = Matrix::filled(rows, rows, BLOCKED);
        for &(start, len, padded) in &blocks {
            for r in 0..padded {
                for c in 0..=r.min(len.saturating_sub(1)) {
                    mask.set(start + r, start + c, 0.0);
                }
            }
        }
        let p = |name: &str| tape.param(name, &self.params[name]);
        let pos_emb = p(POS_EMB);
        let h = tape.add(tape.gather_rows(table, &idx), tape.gather_rows(pos_emb, &pos));
        let q = tape.matmul(h, p("attn.q"));
        let k = tape.matmul(h, p("attn.k"));
        let v = tape.matmul(h, p("attn.v"));
        let kt = tape.transpose(k);
        let scores = tape.scale(tape.matmul(q, kt), 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(tape.add(scores, tape.constant(mask)));
        let z = tape.add(h, tape.matmul(attn, v));
        let ff = tape.matmul(tape.tanh(tape.matmul(z, p("ffn.w1"))), p("ffn.w2"));
        Ok((tape.add(z, ff), Layout { blocks, rows }))
    }

    /// Scores of every item after each position of `history` (last
    /// `max_len` items), one row per position.
    pub fn position_logits(&self, history: &[usize]) -> Result<Matrix> {
        let window = &history[history.len().saturating_sub(self.config.max_len)..];
        let tape = Tape::new();
        let table = self.item_table(&tape);
        let (out, _) = self.hidden(&tape, table, &[window], None)?;
        let tt = tape.transpose(table);
        let logits = tape.matmul(out, tt);
        let m = tape.value(logits).clone();
        Ok(m)
    }

    /// Scores of every item as the successor of `history`.
    pub fn score_history(&self, history: &[usize]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(SdaError::Degenerate("empty history".into()));
        }
        let logits = self.position_logits(history)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

impl Scorer for SeqModel {
    fn score_all(&self, query: &Query<'_>) -> Result<Vec<f64>> {
        self.score_history(query.history)
    }
}

/// Mean sampled-softmax cross-entropy over every real target position;
/// sequences are right-padded to `pad_to` when given.
pub fn seq_loss_on_tape(tape: &Tape, model: &SeqModel, examples: &[SeqExample], pad_to: Option<usize>) -> Result<Var> {
    let usable: Vec<&SeqExample> = examples.iter().filter(|e| e.positions() > 0).collect();
    if usable.is_empty() {
        return Err(SdaError::Degenerate("no sequence with at least two items".into()));
    }
    let k = usable[0].negatives.first().map_or(0, Vec::len);
    for e in &usable {
        if e.negatives.len() != e.positions() || e.negatives.iter().any(|n| n.len() != k) {
            return Err(SdaError::Shape("negatives must be given per position, equally many".into()));
        }
    }
    let table = model.item_table(tape);
    let inputs: Vec<&[usize]> = usable.iter().map(|e| &e.items[..e.positions()]).collect();
    let (out, layout) = model.hidden(tape, table, &inputs, pad_to)?;
    let width = k + 1;
    let mut cand = vec![0usize; layout.rows * width];
    let mut select = Matrix::zeros(layout.rows, width);
    let mut real = 0usize;
    for (e, &(start, len, _)) in usable.iter().zip(&layout.blocks) {
        for p in 0..len {
            let row = start + p;
            cand[row * width] = e.items[p + 1];
            cand[row * width + 1..(row + 1) * width].copy_from_slice(&e.negatives[p]);
            select.set(row, 0, 1.0);
            real += 1;
        }
    }
    let logits = tape.group_dot(out, tape.gather_rows(table, &cand), width);
    let picked = tape.mul(tape.log_softmax_rows(logits), tape.constant(select));
    Ok(tape.scale(tape.sum(picked), -1.0 / real as f64))
}

/// Trains on the train portion of each user's sequence.
pub fn seq_train(split: &LooSplit, content: &ContentFeatures, config: &RecConfig) -> Result<SeqModel> {
    let mut model = SeqModel::init(content.clone(), config)?;
    let n_items = content.n_items();
    let eligible: Vec<usize> = (0..split.users.len()).filter(|&u| split.users[u].train.len() >= 2).collect();
    if eligible.is_empty() {
        return Ok(model);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e9);
    let mut adam = Adam::default();
    for step in 0..config.steps {
        let examples: Vec<SeqExample> = (0..config.batch_size)
            .map(|_| {
                let u = eligible[rng.random_range(0..eligible.len())];
                let train = &split.users[u].train;
                let window = train[train.len().saturating_sub(config.max_len + 1)..].to_vec();
                SeqExample::sample(window, n_items, config.negatives, &mut rng)
            })
            .collect();
        let tape = Tape::new();
        let loss = seq_loss_on_tape(&tape, &model, &examples, None)?;
        if !tape.scalar(loss).is_finite() {
            return Err(SdaError::Divergence { step });
        }
        let grads = tape.backward(loss)?;
        let named = named_grads(&tape, &grads, &model.params);
        adam.step(slots(&mut model.params), &named, config.learning_rate);
    }
    Ok(model)
}
