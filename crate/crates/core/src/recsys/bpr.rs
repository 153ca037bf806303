//! Pairwise matrix factorisation with a content term:
//! `score(u, i) = γ_u·γ_i + θ_u·f_i + β_i`, where `f_i` is the fused content
//! vector of item `i`.

use std::collections::{HashMap, HashSet};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    fused_on_tape, fusion_adapter, init_fusion, named_grads, sample_other, slots, ContentFeatures,
    FusionAdapter, FusionMode, RecConfig, ITEM_EMB_PARAM,
};
use crate::adapt::Adam;
use crate::error::{Result, SdaError};
use crate::eval::{LooSplit, Query, Scorer};
use crate::numerics::{Matrix, ParamSet, Tape, Var};

pub const USER_EMB: &str = "user.emb";
pub const USER_CONTENT: &str = "user.content";
pub const ITEM_BIAS: &str = "item.bias";

/// `(user row, positive item, negative item)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprModel {
    pub config: RecConfig,
    pub params: ParamSet,
    users: Vec<String>,
    user_index: HashMap<String, usize>,
    content: ContentFeatures,
}

impl BprModel {
    /// Fresh parameters for `users` over `content.n_items()` items.
    pub fn init(users: Vec<String>, content: ContentFeatures, config: &RecConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (nu, ni, d) = (users.len(), content.n_items(), config.d_r);
        let mut params = ParamSet::new();
        params.insert(USER_EMB.into(), Matrix::randn(nu, d, config.id_init_std, &mut rng));
        params.insert(ITEM_EMB_PARAM.into(), Matrix::randn(ni, d, config.id_init_std, &mut rng));
        params.insert(ITEM_BIAS.into(), Matrix::zeros(ni, 1));
        if config.fusion != FusionMode::IdOnly {
            params.insert(USER_CONTENT.into(), Matrix::randn(nu, d, config.id_init_std, &mut rng));
            init_fusion(&mut params, &content, config, &mut rng);
        }
        Self::from_parts(config.clone(), params, users, content)
    }

    pub fn from_parts(config: RecConfig, params: ParamSet, users: Vec<String>, content: ContentFeatures) -> Result<Self> {
        let user_index: HashMap<String, usize> = users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        if user_index.len() != users.len() {
            return Err(SdaError::Config("duplicate user ids".into()));
        }
        for (name, rows) in [(USER_EMB, users.len()), (ITEM_EMB_PARAM, content.n_items()), (ITEM_BIAS, content.n_items())] {
            let m = params.get(name).ok_or_else(|| SdaError::NotFound(format!("parameter `{name}`")))?;
            if m.rows() != rows {
                return Err(SdaError::Shape(format!("`{name}` has {} rows, expected {rows}", m.rows())));
            }
        }
        Ok(Self {
            config,
            params,
            users,
            user_index,
            content,
        })
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn n_items(&self) -> usize {
        self.content.n_items()
    }

    pub fn fusion(&self) -> Result<FusionAdapter> {
        fusion_adapter(&self.params, self.config.fusion, self.content.dim(), self.config.d_r)
    }

    pub fn user_row(&self, user_id: &str) -> Result<usize> {
        self.user_index
            .get(user_id)
            .copied()
            .ok_or_else(|| SdaError::UnknownUser(user_id.to_string()))
    }

    /// Scores of every item for one user.
    pub fn score_user(&self, user: usize) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let (u, theta) = self.user_vars(&tape, &[user]);
        let items = tape.param(ITEM_EMB_PARAM, &self.params[ITEM_EMB_PARAM]);
        let bias = tape.param(ITEM_BIAS, &self.params[ITEM_BIAS]);
        let it = tape.transpose(items);
        let mut s = tape.matmul(u, it);
        if let (Some(theta), Some(f)) = (theta, fused_on_tape(&tape, &self.params, &self.content, self.config.fusion)) {
            let ft = tape.transpose(f);
            s = tape.add(s, tape.matmul(theta, ft));
        }
        let bt = tape.transpose(bias);
        let s = tape.add(s, bt);
        let out = tape.value(s).row(0).to_vec();
        Ok(out)
    }

    fn user_vars(&self, tape: &Tape, users: &[usize]) -> (Var, Option<Var>) {
        let u = tape.gather_rows(tape.param(USER_EMB, &self.params[USER_EMB]), users);
        let theta = self
            .params
            .get(USER_CONTENT)
            .map(|m| tape.gather_rows(tape.param(USER_CONTENT, m), users));
        (u, theta)
    }
}

impl Scorer for BprModel {
    fn score_all(&self, query: &Query<'_>) -> Result<Vec<f64>> {
        self.score_user(self.user_row(query.user_id)?)
    }
}

/// Mean `-ln σ(s(u,i⁺) - s(u,i⁻))` over `triples`, plus `l2` times the mean
/// squared norm of the touched embedding rows.
pub fn bpr_loss_on_tape(tape: &Tape, model: &BprModel, triples: &[Triple]) -> Result<Var> {
    if triples.is_empty() {
        return Err(SdaError::Degenerate("BPR loss over zero triples".into()));
    }
    let users: Vec<usize> = triples.iter().map(|t| t.user).collect();
    let pos: Vec<usize> = triples.iter().map(|t| t.pos).collect();
    let neg: Vec<usize> = triples.iter().map(|t| t.neg).collect();
    let (u, theta) = model.user_vars(tape, &users);
    let items = tape.param(ITEM_EMB_PARAM, &model.params[ITEM_EMB_PARAM]);
    let bias = tape.param(ITEM_BIAS, &model.params[ITEM_BIAS]);
    let (ip, in_) = (tape.gather_rows(items, &pos), tape.gather_rows(items, &neg));
    let mut diff = tape.sub(tape.group_dot(u, ip, 1), tape.group_dot(u, in_, 1));
    diff = tape.add(diff, tape.sub(tape.gather_rows(bias, &pos), tape.gather_rows(bias, &neg)));
    if let (Some(theta), Some(f)) = (theta, fused_on_tape(tape, &model.params, &model.content, model.config.fusion)) {
        let content = tape.sub(
            tape.group_dot(theta, tape.gather_rows(f, &pos), 1),
            tape.group_dot(theta, tape.gather_rows(f, &neg), 1),
        );
        diff = tape.add(diff, content);
    }
    let mut loss = tape.scale(tape.mean(tape.log_sigmoid(diff)), -1.0);
    if model.config.l2 > 0.0 {
        let sq = |v: Var| tape.sum(tape.mul(v, v));
        let reg = tape.add(tape.add(sq(u), sq(ip)), sq(in_));
        loss = tape.add(loss, tape.scale(reg, model.config.l2 / triples.len() as f64));
    }
    Ok(loss)
}

/// Trains on the train portion of `split` with uniformly sampled unseen
/// negatives.
pub fn bpr_train(split: &LooSplit, content: &ContentFeatures, config: &RecConfig) -> Result<BprModel> {
    let users: Vec<String> = split.users.iter().map(|u| u.user_id.clone()).collect();
    let mut model = BprModel::init(users, content.clone(), config)?;
    let n_items = content.n_items();
    let seen: Vec<HashSet<usize>> = split.users.iter().map(|u| u.train.iter().copied().collect()).collect();
    let active: Vec<usize> = (0..split.users.len())
        .filter(|&u| {
            let ok = !split.users[u].train.is_empty();
            if !ok {
                warn!("user `{}` has no training items; skipped", split.users[u].user_id);
            }
            ok
        })
        .collect();
    if active.is_empty() {
        return Ok(model);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xb9b);
    let mut adam = Adam::default();
    for step in 0..config.steps {
        let triples: Vec<Triple> = (0..config.batch_size)
            .map(|_| {
                let user = active[rng.random_range(0..active.len())];
                let train = &split.users[user].train;
                let pos = train[rng.random_range(0..train.len())];
                let neg = sample_other(n_items, &seen[user], &mut rng);
                Triple { user, pos, neg }
            })
            .collect();
        let tape = Tape::new();
        let loss = bpr_loss_on_tape(&tape, &model, &triples)?;
        if !tape.scalar(loss).is_finite() {
            return Err(SdaError::Divergence { step });
        }
        let grads = tape.backward(loss)?;
        let named = named_grads(&tape, &grads, &model.params);
        adam.step(slots(&mut model.params), &named, config.learning_rate);
    }
    Ok(model)
}
