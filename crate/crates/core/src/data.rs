//! Item catalogs, interaction logs and the synthetic generator.
//!
//! Synthetic items live in a low-dimensional latent space around cluster
//! centres. Text features are an orthonormal linear map of the latent plus
//! noise; image features apply the same map to the latent after a rotation
//! by `misalignment_angle` in each consecutive coordinate pair, so at `π/2`
//! an item's own image is orthogonal (in expectation) to its text.
//! Users prefer a couple of clusters and tend to stay in the cluster of
//! their previous item; within a cluster items are drawn by Zipf popularity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdaError};
use crate::numerics::{cosine, Matrix};

/// Items with fewer train interactions than this count as tail.
pub const DEFAULT_TAIL_THRESHOLD: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub item_id: String,
    /// `token_count x feature_width`.
    pub text_features: Matrix,
    pub image_features: Matrix,
    pub latent_cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ItemCatalog {
    items: Vec<Item>,
    index: HashMap<String, usize>,
}

impl ItemCatalog {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        let shape = items.first().map(|i| i.text_features.shape());
        for (i, item) in items.iter().enumerate() {
            if index.insert(item.item_id.clone(), i).is_some() {
                return Err(SdaError::DuplicateItem(item.item_id.clone()));
            }
            let s = Some(item.text_features.shape());
            if s != shape || Some(item.image_features.shape()) != shape {
                return Err(SdaError::Shape(format!(
                    "item `{}` has feature shapes {:?}/{:?}, expected {:?}",
                    item.item_id,
                    item.text_features.shape(),
                    item.image_features.shape(),
                    shape.expect("nonempty")
                )));
            }
        }
        Ok(Self { items, index })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn item_ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.item_id.clone()).collect()
    }

    /// `(token_count, feature_width)` of every feature matrix.
    pub fn feature_shape(&self) -> Option<(usize, usize)> {
        self.items.first().map(|i| i.text_features.shape())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionLog {
    records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(records: Vec<Interaction>) -> Self {
        Self { records }
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-user item ids ordered by timestamp, ties kept in input order.
    pub fn sequences(&self) -> BTreeMap<String, Vec<String>> {
        let mut by_user: BTreeMap<String, Vec<(i64, usize, &str)>> = BTreeMap::new();
        for (pos, r) in self.records.iter().enumerate() {
            by_user
                .entry(r.user_id.clone())
                .or_default()
                .push((r.timestamp, pos, &r.item_id));
        }
        by_user
            .into_iter()
            .map(|(u, mut v)| {
                v.sort_by_key(|&(t, pos, _)| (t, pos));
                (u, v.into_iter().map(|(_, _, i)| i.to_string()).collect())
            })
            .collect()
    }

    pub fn check_items(&self, catalog: &ItemCatalog) -> Result<()> {
        match self.records.iter().find(|r| catalog.position(&r.item_id).is_none()) {
            Some(r) => Err(SdaError::UnknownItem(r.item_id.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_clusters: usize,
    pub latent_dim: usize,
    pub token_count: usize,
    pub feature_width: usize,
    /// Radians in `[0, π]` between the text and image latent maps.
    pub misalignment_angle: f64,
    /// Zipf exponent of item popularity; raised until `target_tail_fraction`
    /// is met.
    pub tail_exponent: f64,
    pub target_tail_fraction: f64,
    pub noise_scale: f64,
    /// Spread of item latents around their cluster centre.
    pub cluster_spread: f64,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    /// Probability that the next item stays in the previous item's cluster.
    pub stay_prob: f64,
    /// Bandwidth of the latent-distance kernel that weights a within-cluster
    /// step towards items near the previous one; 0 disables it.
    pub locality: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 500,
            n_users: 200,
            n_clusters: 10,
            latent_dim: 8,
            token_count: 8,
            feature_width: 16,
            misalignment_angle: std::f64::consts::FRAC_PI_2,
            tail_exponent: 1.0,
            target_tail_fraction: 0.3,
            noise_scale: 0.3,
            cluster_spread: 0.5,
            min_seq_len: 6,
            max_seq_len: 20,
            stay_prob: 0.7,
            locality: 0.5,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_items", self.n_items),
            ("n_users", self.n_users),
            ("n_clusters", self.n_clusters),
            ("latent_dim", self.latent_dim),
            ("token_count", self.token_count),
            ("feature_width", self.feature_width),
            ("min_seq_len", self.min_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SdaError::Config(format!("data.{name} must be >= 1")));
            }
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.misalignment_angle) {
            return Err(SdaError::Config(format!(
                "data.misalignment_angle must lie in [0, π], got {}",
                self.misalignment_angle
            )));
        }
        if self.max_seq_len < self.min_seq_len {
            return Err(SdaError::Config("data.max_seq_len < data.min_seq_len".into()));
        }
        if self.min_seq_len > self.n_items {
            return Err(SdaError::Config("data.min_seq_len exceeds n_items".into()));
        }
        if self.latent_dim > self.token_count * self.feature_width {
            return Err(SdaError::Config("data.latent_dim exceeds the feature size".into()));
        }
        if !(0.0..=1.0).contains(&self.stay_prob) || !(0.0..=1.0).contains(&self.target_tail_fraction) {
            return Err(SdaError::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.noise_scale < 0.0 || self.cluster_spread < 0.0 || self.tail_exponent < 0.0 || self.locality < 0.0 {
            return Err(SdaError::Config("scales and exponents must be >= 0".into()));
        }
        Ok(())
    }
}

fn round_f32(m: Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

/// `rows x cols` matrix with orthonormal columns (Gram-Schmidt).
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = Matrix::randn(cols, rows, 1.0, rng);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut v = g.row(c).to_vec();
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    Matrix::from_rows(&basis).expect("uniform rows").transpose()
}

/// Rotates each consecutive coordinate pair of `z` by `angle`.
fn rotate_pairs(z: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = z.to_vec();
    for k in (0..z.len().saturating_sub(1)).step_by(2) {
        out[k] = c * z[k] - s * z[k + 1];
        out[k + 1] = s * z[k] + c * z[k + 1];
    }
    out
}

/// Synthetic catalog and interactions, deterministic per `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<(ItemCatalog, InteractionLog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let feat = config.token_count * config.feature_width;
    let noise = Normal::new(0.0, config.noise_scale.max(0.0)).expect("finite");

    let centres: Vec<Vec<f64>> = (0..config.n_clusters)
        .map(|_| Matrix::randn(1, config.latent_dim, 1.0, &mut rng).into_vec())
        .collect();
    // Columns orthonormal, scaled so entries have unit variance per unit
    // latent variance.
    let map = orthonormal_columns(feat, config.latent_dim, &mut rng)
        .scale((feat as f64 / config.latent_dim as f64).sqrt());

    let mut items = Vec::with_capacity(config.n_items);
    let mut clusters = Vec::with_capacity(config.n_items);
    let mut latents = Vec::with_capacity(config.n_items);
    for i in 0..config.n_items {
        let k = rng.random_range(0..config.n_clusters);
        let z: Vec<f64> = centres[k]
            .iter()
            .map(|c| c + config.cluster_spread * Normal::new(0.0, 1.0).expect("finite").sample(&mut rng))
            .collect();
        let zr = rotate_pairs(&z, config.misalignment_angle);
        let embed = |latent: &[f64], rng: &mut ChaCha8Rng| -> Matrix {
            let col = Matrix::from_vec(config.latent_dim, 1, latent.to_vec()).expect("len");
            let flat = map.matmul_unchecked(&col).into_vec();
            let noisy: Vec<f64> = flat.iter().map(|v| v + noise.sample(rng)).collect();
            round_f32(Matrix::from_vec(config.token_count, config.feature_width, noisy).expect("len"))
        };
        let text_features = embed(&z, &mut rng);
        let image_features = embed(&zr, &mut rng);
        clusters.push(k);
        latents.push(z);
        items.push(Item {
            item_id: format!("item{i:04}"),
            text_features,
            image_features,
            latent_cluster: Some(k),
        });
    }
    let catalog = ItemCatalog::new(items)?;

    // Popularity ranks are a random permutation so popularity is independent
    // of cluster membership.
    let mut ranks: Vec<usize> = (0..config.n_items).collect();
    ranks.shuffle(&mut rng);
    let user_seed: u64 = rng.random();

    let mut exponent = config.tail_exponent;
    let mut log = simulate_users(config, &catalog, &clusters, &latents, &ranks, exponent, user_seed);
    for _ in 0..40 {
        if tail_fraction(&log, config.n_items) >= config.target_tail_fraction {
            break;
        }
        exponent += 0.1;
        log = simulate_users(config, &catalog, &clusters, &latents, &ranks, exponent, user_seed);
    }
    Ok((catalog, log))
}

fn simulate_users(
    config: &SynthConfig,
    catalog: &ItemCatalog,
    clusters: &[usize],
    latents: &[Vec<f64>],
    ranks: &[usize],
    exponent: f64,
    seed: u64,
) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight: Vec<f64> = ranks.iter().map(|&r| ((r + 1) as f64).powf(-exponent)).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.n_clusters];
    for (i, &k) in clusters.iter().enumerate() {
        members[k].push(i);
    }
    let mut records = Vec::new();
    for u in 0..config.n_users {
        let user_id = format!("user{u:04}");
        // Affinity concentrated on two clusters, with a little mass elsewhere.
        let mut affinity = vec![0.2 / config.n_clusters as f64; config.n_clusters];
        let primary = rng.random_range(0..config.n_clusters);
        let secondary = rng.random_range(0..config.n_clusters);
        affinity[primary] += 0.55;
        affinity[secondary] += 0.25;
        let len = rng.random_range(config.min_seq_len..=config.max_seq_len);
        let mut seen: HashSet<usize> = HashSet::new();
        let mut prev: Option<usize> = None;
        for t in 0..len {
            let stay = match prev {
                Some(p) if rng.random::<f64>() < config.stay_prob => Some(p),
                _ => None,
            };
            let choice = match stay {
                Some(p) if config.locality > 0.0 => {
                    let h2 = 2.0 * config.locality * config.locality;
                    let local: Vec<f64> = weight
                        .iter()
                        .zip(latents)
                        .map(|(w, z)| {
                            let d2: f64 = z.iter().zip(&latents[p]).map(|(a, b)| (a - b) * (a - b)).sum();
                            w * (-d2 / h2).exp()
                        })
                        .collect();
                    pick_unseen(&members[clusters[p]], &local, &seen, &mut rng)
                }
                Some(p) => pick_unseen(&members[clusters[p]], &weight, &seen, &mut rng),
                None => pick_unseen(&members[sample_index(&affinity, &mut rng)], &weight, &seen, &mut rng),
            }
                .or_else(|| {
                    let all: Vec<usize> = (0..catalog.len()).collect();
                    pick_unseen(&all, &weight, &seen, &mut rng)
                });
            let Some(item) = choice else { break };
            seen.insert(item);
            prev = Some(item);
            records.push(Interaction {
                user_id: user_id.clone(),
                item_id: catalog.get(item).item_id.clone(),
                timestamp: t as i64,
            });
        }
    }
    InteractionLog::new(records)
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.random_range(0..weights.len());
    }
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn pick_unseen(pool: &[usize], weight: &[f64], seen: &HashSet<usize>, rng: &mut ChaCha8Rng) -> Option<usize> {
    let candidates: Vec<usize> = pool.iter().copied().filter(|i| !seen.contains(i)).collect();
    if candidates.is_empty() {
        return None;
    }
    let w: Vec<f64> = candidates.iter().map(|&i| weight[i]).collect();
    Some(candidates[sample_index(&w, rng)])
}

/// Fraction of catalog items with fewer than [`DEFAULT_TAIL_THRESHOLD`]
/// interactions in the leave-one-out train portion.
pub fn tail_fraction(log: &InteractionLog, n_items: usize) -> f64 {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for seq in log.sequences().values() {
        if seq.len() < 3 {
            continue;
        }
        for item in &seq[..seq.len() - 2] {
            *counts.entry(item.clone()).or_default() += 1;
        }
    }
    let heavy = counts.values().filter(|&&c| c >= DEFAULT_TAIL_THRESHOLD).count();
    (n_items - heavy) as f64 / n_items as f64
}

/// Recall@1 of text-to-image retrieval by cosine over raw flattened
/// features: the fraction of items whose own image row is the nearest.
pub fn raw_retrieval_accuracy(catalog: &ItemCatalog) -> f64 {
    let text: Vec<&[f64]> = catalog.items().iter().map(|i| i.text_features.data()).collect();
    let image: Vec<&[f64]> = catalog.items().iter().map(|i| i.image_features.data()).collect();
    retrieval_at_1(&text, &image)
}

/// Fraction of queries `q[i]` whose highest-cosine key is `keys[i]`; ties
/// count against the query.
pub fn retrieval_at_1(queries: &[&[f64]], keys: &[&[f64]]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let hits = queries
        .iter()
        .enumerate()
        .filter(|(i, q)| {
            let own = cosine(q, keys[*i]).unwrap_or(f64::NEG_INFINITY);
            keys.iter()
                .enumerate()
                .all(|(j, k)| j == *i || cosine(q, k).unwrap_or(f64::NEG_INFINITY) < own)
        })
        .count();
    hits as f64 / queries.len() as f64
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    item_id: String,
    text_features: Vec<Vec<f32>>,
    image_features: Vec<Vec<f32>>,
    latent_cluster: Option<usize>,
}

fn to_rows_f32(m: &Matrix) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|&v| v as f32).collect()).collect()
}

fn from_rows_f32(rows: &[Vec<f32>]) -> std::result::Result<Matrix, SdaError> {
    let rows64: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    Matrix::from_rows(&rows64)
}

/// Writes one JSON object per item.
pub fn save_catalog(catalog: &ItemCatalog, path: &Path) -> Result<()> {
    let mut w = Vec::new();
    for item in catalog.items() {
        let rec = ItemRecord {
            item_id: item.item_id.clone(),
            text_features: to_rows_f32(&item.text_features),
            image_features: to_rows_f32(&item.image_features),
            latent_cluster: item.latent_cluster,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.push(b'\n');
    }
    crate::store::write_atomic(path, &w)
}

pub fn load_catalog(path: &Path) -> Result<ItemCatalog> {
    let file = File::open(path).map_err(|e| SdaError::io(path, e))?;
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SdaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| SdaError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: ItemRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(rec.item_id.clone()) {
            return Err(SdaError::DuplicateItem(rec.item_id));
        }
        let text_features = from_rows_f32(&rec.text_features).map_err(|e| parse_err(e.to_string()))?;
        let image_features = from_rows_f32(&rec.image_features).map_err(|e| parse_err(e.to_string()))?;
        items.push(Item {
            item_id: rec.item_id,
            text_features,
            image_features,
            latent_cluster: rec.latent_cluster,
        });
    }
    ItemCatalog::new(items)
}

pub const INTERACTION_HEADER: [&str; 3] = ["user_id", "item_id", "timestamp"];

pub fn save_interactions(log: &InteractionLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(INTERACTION_HEADER)?;
    for r in log.records() {
        w.write_record([r.user_id.as_str(), r.item_id.as_str(), &r.timestamp.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| SdaError::io(path, e.into_error()))?;
    crate::store::write_atomic(path, &bytes)
}

/// Reads `user_id,item_id,timestamp` rows; every item must exist in
/// `catalog`. An empty file yields an empty log.
pub fn load_interactions(path: &Path, catalog: &ItemCatalog) -> Result<InteractionLog> {
    let file = File::open(path).map_err(|e| SdaError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut records = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let line = n + 1;
        let parse_err = |message: String| SdaError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        if n == 0 {
            if row.iter().map(str::trim).eq(INTERACTION_HEADER) {
                continue;
            }
            return Err(parse_err(format!(
                "expected header `{}`",
                INTERACTION_HEADER.join(",")
            )));
        }
        if row.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", row.len())));
        }
        let timestamp = row[2]
            .trim()
            .parse::<i64>()
            .map_err(|e| parse_err(format!("bad timestamp `{}`: {e}", &row[2])))?;
        let item_id = row[1].trim().to_string();
        if catalog.position(&item_id).is_none() {
            return Err(SdaError::UnknownItem(item_id));
        }
        records.push(Interaction {
            user_id: row[0].trim().to_string(),
            item_id,
            timestamp,
        });
    }
    Ok(InteractionLog::new(records))
}
