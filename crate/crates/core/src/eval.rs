//! Leave-one-out evaluation with full ranking, Hit@K and NDCG@K, and a
//! long-tail breakdown.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionLog, ItemCatalog, DEFAULT_TAIL_THRESHOLD};
use crate::error::{Result, SdaError};

/// One user's held-out portions, as catalog indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LooSplit {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three interactions.
    pub excluded_users: usize,
}

impl LooSplit {
    /// Train-split interaction count of every item.
    pub fn train_counts(&self, n_items: usize) -> Vec<usize> {
        let mut counts = vec![0; n_items];
        for u in &self.users {
            for &i in &u.train {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.users.iter().position(|u| u.user_id == user_id)
    }
}

/// Last item to test, second-to-last to validation, the rest to train.
pub fn split_loo(log: &InteractionLog, catalog: &ItemCatalog) -> Result<LooSplit> {
    let mut split = LooSplit::default();
    for (user_id, seq) in log.sequences() {
        if seq.len() < 3 {
            split.excluded_users += 1;
            continue;
        }
        let idx = seq
            .iter()
            .map(|id| catalog.position(id).ok_or_else(|| SdaError::UnknownItem(id.clone())))
            .collect::<Result<Vec<_>>>()?;
        let n = idx.len();
        split.users.push(UserSplit {
            user_id,
            train: idx[..n - 2].to_vec(),
            valid: idx[n - 2],
            test: idx[n - 1],
        });
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailSpec {
    /// Items with strictly fewer train interactions are tail.
    pub threshold: usize,
}

impl Default for TailSpec {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_TAIL_THRESHOLD,
        }
    }
}

impl TailSpec {
    pub fn new(threshold: usize) -> Result<Self> {
        if threshold == 0 {
            return Err(SdaError::Config("tail threshold must be >= 1".into()));
        }
        Ok(Self { threshold })
    }
}

pub fn tail_items(split: &LooSplit, n_items: usize, spec: TailSpec) -> BTreeSet<usize> {
    split
        .train_counts(n_items)
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c < spec.threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Which held-out item a query targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Valid,
    Test,
}

/// What a model sees when asked to score the catalog for one user.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub user_index: usize,
    pub user_id: &'a str,
    /// Interactions preceding the target, oldest first.
    pub history: &'a [usize],
}

/// Anything that scores every catalog item for a query.
pub trait Scorer: Sync {
    fn score_all(&self, query: &Query<'_>) -> Result<Vec<f64>>;
}

/// Pessimistic 1-based rank: every non-excluded item scoring at least the
/// target's score is placed ahead of it.
pub fn pessimistic_rank(scores: &[f64], target: usize, excluded: &BTreeSet<usize>) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && !excluded.contains(&j) && s >= st)
        .count()
}

pub fn hit_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user_id: String,
    pub target_item: usize,
    pub rank: usize,
    pub hit: f64,
    pub ndcg: f64,
    pub tail: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub hit: f64,
    pub ndcg: f64,
    pub users: usize,
}

impl MetricPair {
    fn mean_of<'a>(rows: impl Iterator<Item = &'a RankingResult>) -> Option<Self> {
        let (mut h, mut n, mut c) = (0.0, 0.0, 0usize);
        for r in rows {
            h += r.hit;
            n += r.ndcg;
            c += 1;
        }
        (c > 0).then(|| Self {
            hit: h / c as f64,
            ndcg: n / c as f64,
            users: c,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub target: Target,
    pub tail_threshold: usize,
    pub overall: MetricPair,
    /// Absent when no evaluated user has a tail target.
    pub tail: Option<MetricPair>,
    pub excluded_users: usize,
    pub n_items: usize,
    #[serde(skip)]
    pub per_user: Vec<RankingResult>,
}

impl EvalReport {
    /// `user_id,target_item,rank,hit,ndcg,tail` rows.
    pub fn per_user_csv(&self, catalog: &ItemCatalog) -> String {
        let mut out = String::from("user_id,target_item,rank,hit,ndcg,tail\n");
        for r in &self.per_user {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.user_id,
                catalog.get(r.target_item).item_id,
                r.rank,
                r.hit,
                r.ndcg,
                r.tail
            ));
        }
        out
    }

    /// Overall/Tail H@K and N@K as a fixed-width table.
    pub fn table(&self) -> String {
        let fmt = |m: Option<MetricPair>| match m {
            Some(m) => format!("{:>8.4} {:>8.4} {:>6}", m.hit, m.ndcg, m.users),
            None => format!("{:>8} {:>8} {:>6}", "-", "-", 0),
        };
        format!(
            "{:<8} {:>8} {:>8} {:>6}\n{:<8} {}\n{:<8} {}\n",
            "split",
            format!("H@{}", self.k),
            format!("N@{}", self.k),
            "users",
            "overall",
            fmt(Some(self.overall)),
            "tail",
            fmt(self.tail)
        )
    }
}

/// Ranks each user's target against every item except those in the
/// user's history (train, plus validation when targeting test).
pub fn evaluate(
    scorer: &dyn Scorer,
    split: &LooSplit,
    n_items: usize,
    k: usize,
    tail: TailSpec,
    target: Target,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(SdaError::Config("K must be >= 1".into()));
    }
    let tail_set = tail_items(split, n_items, tail);
    let per_user = split
        .users
        .par_iter()
        .enumerate()
        .map(|(ui, u)| {
            let mut history = u.train.clone();
            let item = match target {
                Target::Valid => u.valid,
                Target::Test => {
                    history.push(u.valid);
                    u.test
                }
            };
            let scores = scorer.score_all(&Query {
                user_index: ui,
                user_id: &u.user_id,
                history: &history,
            })?;
            if scores.len() != n_items {
                return Err(SdaError::Shape(format!(
                    "scorer returned {} scores for {n_items} items",
                    scores.len()
                )));
            }
            if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
                return Err(SdaError::Degenerate(format!(
                    "non-finite score for item {j} (user `{}`)",
                    u.user_id
                )));
            }
            let excluded: BTreeSet<usize> = history.iter().copied().filter(|&j| j != item).collect();
            let rank = pessimistic_rank(&scores, item, &excluded);
            Ok(RankingResult {
                user_id: u.user_id.clone(),
                target_item: item,
                rank,
                hit: hit_at(rank, k),
                ndcg: ndcg_at(rank, k),
                tail: tail_set.contains(&item),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let overall = MetricPair::mean_of(per_user.iter()).unwrap_or(MetricPair {
        hit: 0.0,
        ndcg: 0.0,
        users: 0,
    });
    let tail_metrics = MetricPair::mean_of(per_user.iter().filter(|r| r.tail));
    Ok(EvalReport {
        k,
        target,
        tail_threshold: tail.threshold,
        overall,
        tail: tail_metrics,
        excluded_users: split.excluded_users,
        n_items,
        per_user,
    })
}
