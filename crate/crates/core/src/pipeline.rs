//! The unified run configuration and the stage compositions shared by the
//! command line and the acceptance suite.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::{run_stage1_with, AdaptConfig, AdapterChoice, LossKind, Stage1Output};
use crate::backbone::FrozenEncoder;
use crate::data::{generate, InteractionLog, ItemCatalog, SynthConfig};
use crate::error::{Result, SdaError};
use crate::eval::{evaluate, split_loo, EvalReport, LooSplit, MetricPair, Scorer, TailSpec, Target};
use crate::moda::AdapterSet;
use crate::recsys::{bpr_train, seq_train, BprModel, ContentFeatures, FusionMode, ModelKind, RecConfig, SeqModel};
use crate::store::{embed_catalog, hash_json, Checkpoint, EmbeddingTable, Provenance};

/// Checkpoint kind of stage-1 adapters.
pub const ADAPTER_KIND: &str = "adapters";
const USERS_INDEX: &str = "users";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub tail_threshold: usize,
    pub target: Target,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            tail_threshold: 4,
            target: Target::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Where `generate` writes and later stages read the dataset.
    pub data_dir: String,
    /// Where stage artifacts and reports go.
    pub out_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "runs".into(),
        }
    }
}

/// Every knob of a run in one document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides every per-stage seed (see [`RunConfig::resolved`]).
    pub seed: Option<u64>,
    pub data: SynthConfig,
    pub adapt: AdaptConfig,
    pub rec: RecConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Copy with the master seed pushed into each stage and everything
    /// validated. Stage seeds are `seed`, `seed + 1`, `seed + 2`.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        if let Some(s) = self.seed {
            out.data.seed = s;
            out.adapt.seed = s.wrapping_add(1);
            out.rec.seed = s.wrapping_add(2);
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.adapt.validate()?;
        self.rec.validate()?;
        TailSpec::new(self.eval.tail_threshold)?;
        if self.eval.k == 0 {
            return Err(SdaError::Config("eval.k must be >= 1".into()));
        }
        if (self.data.token_count, self.data.feature_width)
            != (self.adapt.encoder.token_count, self.adapt.encoder.feature_width)
        {
            return Err(SdaError::Config(format!(
                "data features are {}x{} but the encoder expects {}x{}",
                self.data.token_count,
                self.data.feature_width,
                self.adapt.encoder.token_count,
                self.adapt.encoder.feature_width
            )));
        }
        Ok(())
    }

    pub fn data_hash(&self) -> Result<String> {
        hash_json(&self.data)
    }

    /// Hash of everything stage 1 depends on.
    pub fn adapt_hash(&self) -> Result<String> {
        hash_json(&(&self.data, &self.adapt))
    }

    pub fn rec_hash(&self) -> Result<String> {
        hash_json(&(&self.data, &self.adapt, &self.rec))
    }
}

/// The five ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "wo_cmsa")]
    WithoutCmsa,
    #[serde(rename = "wo_moda")]
    WithoutModa,
    #[serde(rename = "wo_both")]
    WithoutBoth,
    #[serde(rename = "wo_soft_target")]
    WithoutSoftTarget,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WithoutCmsa,
        Variant::WithoutModa,
        Variant::WithoutBoth,
        Variant::WithoutSoftTarget,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WithoutCmsa => "wo_cmsa",
            Self::WithoutModa => "wo_moda",
            Self::WithoutBoth => "wo_both",
            Self::WithoutSoftTarget => "wo_soft_target",
        }
    }

    /// Stage-1 configuration of this variant. "Without CMSA" keeps MoDA
    /// adapters at their untrained initialisation.
    pub fn adapt_config(self, base: &AdaptConfig) -> AdaptConfig {
        let mut c = base.clone();
        match self {
            Self::Full => {
                c.adapter = AdapterChoice::Moda;
                c.loss = LossKind::Cmsa;
            }
            Self::WithoutCmsa => {
                c.adapter = AdapterChoice::Moda;
                c.steps = 0;
            }
            Self::WithoutModa => {
                c.adapter = AdapterChoice::Lora;
                c.loss = LossKind::Cmsa;
            }
            Self::WithoutBoth => c.adapter = AdapterChoice::None,
            Self::WithoutSoftTarget => {
                c.adapter = AdapterChoice::Moda;
                c.loss = LossKind::Infonce;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = SdaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| SdaError::Config(format!("unknown variant `{s}`")))
    }
}

/// Synthetic data for a resolved config.
pub fn generate_data(config: &RunConfig) -> Result<(ItemCatalog, InteractionLog)> {
    generate(&config.data)
}

pub fn stage1(encoder: &FrozenEncoder, catalog: &ItemCatalog, config: &AdaptConfig) -> Result<Stage1Output> {
    run_stage1_with(encoder, catalog, config)
}

/// Text and image tables for `catalog` under `adapters`.
pub fn embed(
    encoder: &FrozenEncoder,
    catalog: &ItemCatalog,
    adapters: Option<&AdapterSet>,
    provenance: &Provenance,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    embed_catalog(catalog, encoder, adapters.filter(|a| !a.is_empty()), provenance, true)
}

/// Content features from two tables, checked against the catalog order.
pub fn content_features(catalog: &ItemCatalog, text: &EmbeddingTable, image: &EmbeddingTable) -> Result<ContentFeatures> {
    let ids = catalog.item_ids();
    if text.item_ids != ids || image.item_ids != ids {
        return Err(SdaError::Config(
            "embedding tables do not list the catalog's items in order".into(),
        ));
    }
    ContentFeatures::new(text.matrix.clone(), image.matrix.clone())
}

/// A trained downstream model of either kind.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Bpr(BprModel),
    Seq(SeqModel),
}

impl TrainedModel {
    pub fn scorer(&self) -> &dyn Scorer {
        match self {
            Self::Bpr(m) => m,
            Self::Seq(m) => m,
        }
    }

    pub fn params(&self) -> &crate::numerics::ParamSet {
        match self {
            Self::Bpr(m) => &m.params,
            Self::Seq(m) => &m.params,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Bpr(_) => "bpr",
            Self::Seq(_) => "seq",
        }
    }

    pub fn rec_config(&self) -> &RecConfig {
        match self {
            Self::Bpr(m) => &m.config,
            Self::Seq(m) => &m.config,
        }
    }

    /// Checkpoint holding the parameters; `config` is stored alongside.
    pub fn to_checkpoint<C: Serialize>(&self, config: &C, provenance: Provenance) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.kind(), config, provenance, self.params().clone())?;
        if let Self::Bpr(m) = self {
            ckpt.index.insert(USERS_INDEX.into(), m.users().to_vec());
        }
        Ok(ckpt)
    }

    /// Rebuilds a model saved by [`TrainedModel::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint, rec: RecConfig, content: ContentFeatures) -> Result<Self> {
        let content = if rec.fusion == FusionMode::IdOnly {
            ContentFeatures::empty(content.n_items())
        } else {
            content
        };
        match ckpt.kind.as_str() {
            "bpr" => {
                let users = ckpt
                    .index
                    .get(USERS_INDEX)
                    .cloned()
                    .ok_or_else(|| SdaError::NotFound("user index in bpr checkpoint".into()))?;
                Ok(Self::Bpr(BprModel::from_parts(rec, ckpt.params.clone(), users, content)?))
            }
            "seq" => Ok(Self::Seq(SeqModel::from_parts(rec, ckpt.params.clone(), content)?)),
            other => Err(SdaError::Config(format!("checkpoint holds `{other}` parameters, expected a recommender"))),
        }
    }
}

/// Adapters for `config` with parameters loaded from `ckpt`.
pub fn adapters_from_checkpoint(ckpt: &Checkpoint, encoder: &FrozenEncoder, config: &AdaptConfig) -> Result<AdapterSet> {
    ckpt.expect_kind(ADAPTER_KIND)?;
    let mut adapters = crate::adapt::init_adapters(encoder, config)?;
    adapters.load_params(&ckpt.params)?;
    encoder.validate_adapters(&adapters)?;
    Ok(adapters)
}

pub fn train_rec(split: &LooSplit, content: &ContentFeatures, config: &RecConfig) -> Result<TrainedModel> {
    let content = if config.fusion == FusionMode::IdOnly {
        ContentFeatures::empty(content.n_items())
    } else {
        content.clone()
    };
    Ok(match config.model {
        ModelKind::Bpr => TrainedModel::Bpr(bpr_train(split, &content, config)?),
        ModelKind::Seq => TrainedModel::Seq(seq_train(split, &content, config)?),
    })
}

pub fn eval_model(model: &TrainedModel, split: &LooSplit, n_items: usize, config: &EvalConfig) -> Result<EvalReport> {
    evaluate(
        model.scorer(),
        split,
        n_items,
        config.k,
        TailSpec::new(config.tail_threshold)?,
        config.target,
    )
}

/// Stage 1 for `adapt`, then embedding, training and evaluation with `rec`.
pub fn run_downstream(
    encoder: &FrozenEncoder,
    catalog: &ItemCatalog,
    split: &LooSplit,
    adapt: &AdaptConfig,
    rec: &RecConfig,
    eval: &EvalConfig,
) -> Result<(EvalReport, Stage1Output)> {
    let s1 = stage1(encoder, catalog, adapt)?;
    let (text, image) = embed(encoder, catalog, Some(&s1.adapters), &Provenance::default())?;
    let content = content_features(catalog, &text, &image)?;
    let model = train_rec(split, &content, rec)?;
    Ok((eval_model(&model, split, catalog.len(), eval)?, s1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub overall: MetricPair,
    pub tail: Option<MetricPair>,
    /// Mean relative change of H@K and N@K versus the full row, in percent.
    pub delta_overall_pct: f64,
    pub delta_tail_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub k: usize,
    pub config: RunConfig,
    pub rows: Vec<AblationRow>,
    /// How the "without CMSA" row is realised.
    pub notes: Vec<String>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>8} {:>8} {:>9} {:>8} {:>8} {:>9}\n",
            "variant",
            format!("H@{}", self.k),
            format!("N@{}", self.k),
            "delta",
            "tail H",
            "tail N",
            "delta"
        );
        for r in &self.rows {
            let (th, tn) = r.tail.map_or(("-".to_string(), "-".to_string()), |t| {
                (format!("{:.4}", t.hit), format!("{:.4}", t.ndcg))
            });
            let td = r.delta_tail_pct.map_or("-".to_string(), |d| format!("{d:+.2}%"));
            out.push_str(&format!(
                "{:<16} {:>8.4} {:>8.4} {:>9} {:>8} {:>8} {:>9}\n",
                r.variant.as_str(),
                r.overall.hit,
                r.overall.ndcg,
                format!("{:+.2}%", r.delta_overall_pct),
                th,
                tn,
                td
            ));
        }
        out
    }
}

/// Mean relative change of `(hit, ndcg)` versus `base`, in percent.
pub fn relative_delta(row: MetricPair, base: MetricPair) -> f64 {
    let rel = |a: f64, b: f64| if b == 0.0 { 0.0 } else { (a - b) / b };
    50.0 * (rel(row.hit, base.hit) + rel(row.ndcg, base.ndcg))
}

/// Runs all five variants on one dataset; `on_row` sees each finished row
/// so callers can persist partial results.
pub fn ablate(
    config: &RunConfig,
    catalog: &ItemCatalog,
    log: &InteractionLog,
    mut on_row: impl FnMut(Variant, &EvalReport) -> Result<()>,
) -> Result<AblationReport> {
    let encoder = FrozenEncoder::new(config.adapt.encoder.clone())?;
    let split = split_loo(log, catalog)?;
    let mut reports = Vec::new();
    for v in Variant::ALL {
        let (report, _) = run_downstream(
            &encoder,
            catalog,
            &split,
            &v.adapt_config(&config.adapt),
            &config.rec,
            &config.eval,
        )?;
        on_row(v, &report)?;
        reports.push((v, report));
    }
    let full = reports[0].1.clone();
    let rows = reports
        .into_iter()
        .map(|(variant, r)| AblationRow {
            variant,
            overall: r.overall,
            tail: r.tail,
            delta_overall_pct: relative_delta(r.overall, full.overall),
            delta_tail_pct: r.tail.zip(full.tail).map(|(a, b)| relative_delta(a, b)),
        })
        .collect();
    Ok(AblationReport {
        k: config.eval.k,
        config: config.clone(),
        rows,
        notes: vec![
            "wo_cmsa: MoDA adapters attached but untrained (zero update), so embeddings equal the raw backbone".into(),
            "wo_both: no adapters".into(),
        ],
    })
}
