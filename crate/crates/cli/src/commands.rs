//! One function per subcommand. Each stage reads its inputs, checks their
//! provenance against the current configuration, and writes its artifact
//! together with a JSON report that embeds the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde::Serialize;

use sda_core::adapt::{AdaptConfig, AdapterChoice, LossKind, Stage1Output, TrainLog};
use sda_core::backbone::FrozenEncoder;
use sda_core::data::{load_catalog, load_interactions, save_catalog, save_interactions, InteractionLog, ItemCatalog};
use sda_core::diagnose::{conflict_report, ConflictReport};
use sda_core::eval::{split_loo, EvalReport, MetricPair};
use sda_core::pipeline::{
    ablate as run_ablation, adapters_from_checkpoint, content_features, embed as embed_tables, eval_model,
    generate_data, stage1, train_rec as fit_rec, AblationReport, RunConfig, TrainedModel, Variant, ADAPTER_KIND,
};
use sda_core::store::{
    load_checkpoint, load_embeddings, save_checkpoint, save_embeddings, sha256_hex, write_atomic, Checkpoint,
    EmbeddingTable, Provenance,
};
use sda_core::SdaError;

use crate::settings::Settings;

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ADAPTERS_FILE: &str = "adapters.json";
pub const ADAPT_REPORT_FILE: &str = "adapt_report.json";
pub const TEXT_EMB_FILE: &str = "embeddings.text.bin";
pub const IMAGE_EMB_FILE: &str = "embeddings.image.bin";
pub const EMBED_REPORT_FILE: &str = "embed_report.json";
pub const REC_FILE: &str = "rec.json";
pub const REC_REPORT_FILE: &str = "rec_report.json";
pub const EVAL_FILE: &str = "eval.json";
pub const PER_USER_FILE: &str = "eval_per_user.csv";
pub const DIAGNOSE_FILE: &str = "diagnose.json";
pub const DIAGNOSE_CSV: &str = "diagnose.csv";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_PARTIAL_FILE: &str = "ablation.partial.json";

const CATALOG_INDEX: &str = "catalog_sha256";
const EMBEDDINGS_INDEX: &str = "embeddings_sha256";

fn write_json<T: Serialize>(path: &Path, value: &T) -> sda_core::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| SdaError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(sha256_hex(&bytes))
}

/// Refuses with both hashes when `found` differs from `expected`.
fn ensure_same(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        return Ok(());
    }
    Err(anyhow::Error::new(SdaError::Provenance {
        expected: expected.to_string(),
        found: found.to_string(),
    })
    .context(format!("{what} does not match the current inputs")))
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    data_hash: String,
    catalog_sha256: String,
    interactions_sha256: String,
    items: usize,
    interactions: usize,
}

pub fn generate(s: &Settings) -> Result<()> {
    let catalog_path = s.data_dir.join(CATALOG_FILE);
    let log_path = s.data_dir.join(INTERACTIONS_FILE);
    let manifest_path = s.data_dir.join(MANIFEST_FILE);
    s.check_writable(&[catalog_path.clone(), log_path.clone(), manifest_path.clone()])?;
    let (catalog, log) = generate_data(&s.config)?;
    save_catalog(&catalog, &catalog_path)?;
    save_interactions(&log, &log_path)?;
    write_json(
        &manifest_path,
        &Manifest {
            config: &s.config,
            data_hash: s.config.data_hash()?,
            catalog_sha256: file_sha(&catalog_path)?,
            interactions_sha256: file_sha(&log_path)?,
            items: catalog.len(),
            interactions: log.records().len(),
        },
    )?;
    info!(
        "wrote {} items and {} interactions to {}",
        catalog.len(),
        log.records().len(),
        s.data_dir.display()
    );
    Ok(())
}

struct Dataset {
    catalog: ItemCatalog,
    catalog_sha: String,
}

fn load_dataset(s: &Settings) -> Result<Dataset> {
    let path = s.data_dir.join(CATALOG_FILE);
    let catalog = load_catalog(&path).with_context(|| format!("loading catalog from {}", s.data_dir.display()))?;
    let expected = (s.config.adapt.encoder.token_count, s.config.adapt.encoder.feature_width);
    if let Some(shape) = catalog.feature_shape() {
        if shape != expected {
            return Err(SdaError::Config(format!(
                "catalog features are {}x{} but the encoder expects {}x{}",
                shape.0, shape.1, expected.0, expected.1
            ))
            .into());
        }
    }
    Ok(Dataset {
        catalog_sha: file_sha(&path)?,
        catalog,
    })
}

fn load_log(s: &Settings, catalog: &ItemCatalog) -> Result<InteractionLog> {
    let path = s.data_dir.join(INTERACTIONS_FILE);
    load_interactions(&path, catalog).with_context(|| format!("loading interactions from {}", path.display()))
}

#[derive(Serialize)]
struct AdaptReport<'a> {
    config: &'a RunConfig,
    provenance: &'a Provenance,
    checkpoint_id: String,
    encoder_hash: &'a str,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    log: &'a TrainLog,
}

fn adapter_checkpoint(s: &Settings, data: &Dataset, out: &Stage1Output) -> Result<Checkpoint> {
    let provenance = Provenance {
        config_hash: s.config.adapt_hash()?,
        seed: s.config.adapt.seed,
        checkpoint_id: String::new(),
    };
    let mut ckpt = Checkpoint::new(ADAPTER_KIND, &s.config, provenance, out.adapters.params())?;
    ckpt.index.insert(CATALOG_INDEX.into(), vec![data.catalog_sha.clone()]);
    Ok(ckpt)
}

pub fn adapt(s: &Settings) -> Result<()> {
    let ckpt_path = s.out(ADAPTERS_FILE);
    let report_path = s.out(ADAPT_REPORT_FILE);
    s.check_writable(&[ckpt_path.clone(), report_path.clone()])?;
    let data = load_dataset(s)?;
    let encoder = FrozenEncoder::new(s.config.adapt.encoder.clone())?;
    info!(
        "stage 1: {} + {} for {} steps on {} items",
        s.config.adapt.adapter,
        s.config.adapt.loss,
        s.config.adapt.steps,
        data.catalog.len()
    );
    let out = stage1(&encoder, &data.catalog, &s.config.adapt)?;
    let ckpt = adapter_checkpoint(s, &data, &out)?;
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_json(
        &report_path,
        &AdaptReport {
            config: &s.config,
            provenance: &ckpt.provenance,
            checkpoint_id: ckpt.id()?,
            encoder_hash: &out.encoder_hash,
            initial_loss: out.log.initial_loss(),
            final_loss: out.log.final_loss(),
            log: &out.log,
        },
    )?;
    match (out.log.initial_loss(), out.log.final_loss()) {
        (Some(a), Some(b)) => info!("loss {a:.4} -> {b:.4} in {:.1}s", out.log.wall_time_secs),
        _ => info!("no adapter parameters to train"),
    }
    Ok(())
}

/// Loads `adapters.json` and checks it was trained on this catalog under
/// this configuration.
fn load_adapters(s: &Settings, data: &Dataset, encoder: &FrozenEncoder) -> Result<(Checkpoint, sda_core::moda::AdapterSet)> {
    let path = s.out(ADAPTERS_FILE);
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let trained_on = ckpt
        .index
        .get(CATALOG_INDEX)
        .and_then(|v| v.first())
        .cloned()
        .unwrap_or_default();
    ensure_same("adapter checkpoint catalog hash", &data.catalog_sha, &trained_on)?;
    ensure_same(
        "adapter checkpoint config hash",
        &s.config.adapt_hash()?,
        &ckpt.provenance.config_hash,
    )?;
    let adapters = adapters_from_checkpoint(&ckpt, encoder, &s.config.adapt)?;
    Ok((ckpt, adapters))
}

#[derive(Serialize)]
struct EmbedReport<'a> {
    config: &'a RunConfig,
    provenance: &'a Provenance,
    rows: usize,
    dim: usize,
    text_sha256: String,
    image_sha256: String,
}

pub fn embed(s: &Settings) -> Result<()> {
    let text_path = s.out(TEXT_EMB_FILE);
    let image_path = s.out(IMAGE_EMB_FILE);
    let report_path = s.out(EMBED_REPORT_FILE);
    s.check_writable(&[text_path.clone(), image_path.clone(), report_path.clone()])?;
    let data = load_dataset(s)?;
    let encoder = FrozenEncoder::new(s.config.adapt.encoder.clone())?;
    let (ckpt, adapters) = load_adapters(s, &data, &encoder)?;
    let provenance = Provenance {
        config_hash: s.config.adapt_hash()?,
        seed: s.config.adapt.seed,
        checkpoint_id: ckpt.id()?,
    };
    let (text, image) = embed_tables(&encoder, &data.catalog, Some(&adapters), &provenance)?;
    save_embeddings(&text, &text_path)?;
    save_embeddings(&image, &image_path)?;
    write_json(
        &report_path,
        &EmbedReport {
            config: &s.config,
            provenance: &provenance,
            rows: text.matrix.rows(),
            dim: text.dim(),
            text_sha256: file_sha(&text_path)?,
            image_sha256: file_sha(&image_path)?,
        },
    )?;
    info!("embedded {} items at dimension {}", text.matrix.rows(), text.dim());
    Ok(())
}

/// Both tables, checked against the current config and adapter checkpoint.
fn load_tables(s: &Settings) -> Result<(EmbeddingTable, EmbeddingTable, Vec<String>)> {
    let text_path = s.out(TEXT_EMB_FILE);
    let image_path = s.out(IMAGE_EMB_FILE);
    let text = load_embeddings(&text_path)?;
    let image = load_embeddings(&image_path)?;
    ensure_same(
        "image table provenance",
        &text.provenance.checkpoint_id,
        &image.provenance.checkpoint_id,
    )?;
    ensure_same(
        "embedding table config hash",
        &s.config.adapt_hash()?,
        &text.provenance.config_hash,
    )?;
    let ckpt_path = s.out(ADAPTERS_FILE);
    if ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        ensure_same("embedding tables' adapter checkpoint", &ckpt.id()?, &text.provenance.checkpoint_id)?;
    }
    let shas = vec![file_sha(&text_path)?, file_sha(&image_path)?];
    Ok((text, image, shas))
}

#[derive(Serialize)]
struct RecReport<'a> {
    config: &'a RunConfig,
    provenance: &'a Provenance,
    model: &'a str,
    users: usize,
    embeddings_sha256: &'a [String],
}

pub fn train_rec(s: &Settings) -> Result<()> {
    let ckpt_path = s.out(REC_FILE);
    let report_path = s.out(REC_REPORT_FILE);
    s.check_writable(&[ckpt_path.clone(), report_path.clone()])?;
    let data = load_dataset(s)?;
    let log = load_log(s, &data.catalog)?;
    let (text, image, shas) = load_tables(s)?;
    let content = content_features(&data.catalog, &text, &image)?;
    let split = split_loo(&log, &data.catalog)?;
    info!(
        "training {:?} recommender ({} fusion) on {} users",
        s.config.rec.model,
        s.config.rec.fusion,
        split.users.len()
    );
    let model = fit_rec(&split, &content, &s.config.rec)?;
    let provenance = Provenance {
        config_hash: s.config.rec_hash()?,
        seed: s.config.rec.seed,
        checkpoint_id: text.provenance.checkpoint_id.clone(),
    };
    let mut ckpt = model.to_checkpoint(&s.config, provenance)?;
    ckpt.index.insert(EMBEDDINGS_INDEX.into(), shas.clone());
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_json(
        &report_path,
        &RecReport {
            config: &s.config,
            provenance: &ckpt.provenance,
            model: model.kind(),
            users: split.users.len(),
            embeddings_sha256: &shas,
        },
    )?;
    Ok(())
}

/// What `eval` prints on stdout.
#[derive(Serialize)]
struct EvalSummary {
    k: usize,
    hit: f64,
    ndcg: f64,
    tail_hit: Option<f64>,
    tail_ndcg: Option<f64>,
    users: usize,
    tail_users: usize,
    excluded_users: usize,
    n_items: usize,
}

impl EvalSummary {
    fn of(r: &EvalReport) -> Self {
        Self {
            k: r.k,
            hit: r.overall.hit,
            ndcg: r.overall.ndcg,
            tail_hit: r.tail.map(|t| t.hit),
            tail_ndcg: r.tail.map(|t| t.ndcg),
            users: r.overall.users,
            tail_users: r.tail.map_or(0, |t| t.users),
            excluded_users: r.excluded_users,
            n_items: r.n_items,
        }
    }
}

#[derive(Serialize)]
struct EvalFile<'a> {
    config: &'a RunConfig,
    provenance: &'a Provenance,
    model: &'a str,
    report: &'a EvalReport,
}

pub fn eval(s: &Settings) -> Result<()> {
    let eval_path = s.out(EVAL_FILE);
    let per_user_path = s.out(PER_USER_FILE);
    s.check_writable(&[eval_path.clone(), per_user_path.clone()])?;
    let data = load_dataset(s)?;
    let log = load_log(s, &data.catalog)?;
    let ckpt_path = s.out(REC_FILE);
    let ckpt = load_checkpoint(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    ensure_same("recommender checkpoint config hash", &s.config.rec_hash()?, &ckpt.provenance.config_hash)?;
    let (text, image, shas) = load_tables(s)?;
    let trained_on = ckpt.index.get(EMBEDDINGS_INDEX).cloned().unwrap_or_default();
    ensure_same("recommender's embedding tables", &shas.join(","), &trained_on.join(","))?;
    let content = content_features(&data.catalog, &text, &image)?;
    let model = TrainedModel::from_checkpoint(&ckpt, s.config.rec.clone(), content)?;
    let split = split_loo(&log, &data.catalog)?;
    let report = eval_model(&model, &split, data.catalog.len(), &s.config.eval)?;
    write_json(
        &eval_path,
        &EvalFile {
            config: &s.config,
            provenance: &ckpt.provenance,
            model: model.kind(),
            report: &report,
        },
    )?;
    write_atomic(&per_user_path, report.per_user_csv(&data.catalog).as_bytes())?;
    eprint!("{}", report.table());
    println!("{}", serde_json::to_string(&EvalSummary::of(&report))?);
    Ok(())
}

#[derive(Serialize)]
struct SiteCosine {
    label: String,
    site: String,
    cosine: Option<f64>,
}

#[derive(Serialize)]
struct DiagnoseFile<'a> {
    config: &'a RunConfig,
    final_losses: Vec<(String, Option<f64>)>,
    report: &'a ConflictReport,
}

pub fn diagnose(s: &Settings) -> Result<()> {
    let json_path = s.out(DIAGNOSE_FILE);
    let csv_path = s.out(DIAGNOSE_CSV);
    s.check_writable(&[json_path.clone(), csv_path.clone()])?;
    let data = load_dataset(s)?;
    let encoder = FrozenEncoder::new(s.config.adapt.encoder.clone())?;
    let sites = encoder.last_layer_qk_sites();
    let mut trained = Vec::new();
    for choice in [AdapterChoice::Lora, AdapterChoice::Moda] {
        let cfg = AdaptConfig {
            adapter: choice,
            loss: LossKind::Cmsa,
            ..s.config.adapt.clone()
        };
        info!("training {choice} adapters for {} steps", cfg.steps);
        let out = stage1(&encoder, &data.catalog, &cfg)?;
        trained.push((choice.to_string(), out));
    }
    let sets: Vec<(String, &sda_core::moda::AdapterSet)> =
        trained.iter().map(|(l, o)| (l.clone(), &o.adapters)).collect();
    let report = conflict_report(&encoder, &data.catalog, &sets, &sites, &s.config.adapt, s.config.adapt.seed)?;
    write_json(
        &json_path,
        &DiagnoseFile {
            config: &s.config,
            final_losses: trained.iter().map(|(l, o)| (l.clone(), o.log.final_loss())).collect(),
            report: &report,
        },
    )?;
    write_atomic(&csv_path, report.to_csv().as_bytes())?;
    let rows: Vec<SiteCosine> = report
        .entries
        .iter()
        .map(|e| SiteCosine {
            label: e.label.clone(),
            site: e.site.clone(),
            cosine: e.cosine,
        })
        .collect();
    for r in &rows {
        let c = r.cosine.map_or("undefined".to_string(), |c| format!("{c:+.4}"));
        println!("{:<6} {:<20} {c}", r.label, r.site);
    }
    Ok(())
}

#[derive(Serialize)]
struct PartialRow<'a> {
    variant: Variant,
    overall: MetricPair,
    tail: Option<MetricPair>,
    report: &'a EvalReport,
}

#[derive(Serialize)]
struct PartialAblation<'a> {
    config: &'a RunConfig,
    rows: &'a [serde_json::Value],
}

pub fn ablate(s: &Settings) -> Result<()> {
    let final_path = s.out(ABLATION_FILE);
    let partial_path: PathBuf = s.out(ABLATION_PARTIAL_FILE);
    s.check_writable(&[final_path.clone()])?;
    let data = load_dataset(s)?;
    let log = load_log(s, &data.catalog)?;
    let mut done: Vec<serde_json::Value> = Vec::new();
    let report: AblationReport = run_ablation(&s.config, &data.catalog, &log, |variant, r| {
        info!(
            "{variant}: H@{k} {:.4} N@{k} {:.4}",
            r.overall.hit,
            r.overall.ndcg,
            k = r.k
        );
        done.push(serde_json::to_value(PartialRow {
            variant,
            overall: r.overall,
            tail: r.tail,
            report: r,
        })?);
        write_json(
            &partial_path,
            &PartialAblation {
                config: &s.config,
                rows: &done,
            },
        )
    })
    .with_context(|| format!("ablation aborted; finished rows are in {}", partial_path.display()))?;
    write_json(&final_path, &report)?;
    let _ = fs::remove_file(&partial_path);
    print!("{}", report.table());
    for note in &report.notes {
        println!("note: {note}");
    }
    Ok(())
}
