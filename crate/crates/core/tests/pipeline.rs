//! The two-stage pipeline through its on-disk formats, on a small config.

use sda_core::adapt::AdaptConfig;
use sda_core::backbone::FrozenEncoder;
use sda_core::data::{load_catalog, load_interactions, save_catalog, save_interactions, SynthConfig};
use sda_core::eval::split_loo;
use sda_core::pipeline::{
    adapters_from_checkpoint, content_features, embed, eval_model, generate_data, stage1, train_rec, RunConfig,
    TrainedModel, ADAPTER_KIND,
};
use sda_core::recsys::{ModelKind, RecConfig};
use sda_core::store::{load_checkpoint, load_embeddings, save_checkpoint, save_embeddings, Checkpoint, Provenance};

fn small() -> RunConfig {
    RunConfig {
        seed: Some(11),
        data: SynthConfig { n_items: 60, n_users: 40, ..SynthConfig::default() },
        adapt: AdaptConfig { steps: 20, batch_size: 12, ..AdaptConfig::default() },
        rec: RecConfig { steps: 40, d_r: 16, negatives: 10, ..RecConfig::default() },
        ..RunConfig::default()
    }
    .resolved()
    .unwrap()
}

#[test]
fn staged_run_through_files_matches_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let cfg = small();

    let (catalog, log) = generate_data(&cfg).unwrap();
    save_catalog(&catalog, &p("data/catalog.jsonl")).unwrap();
    save_interactions(&log, &p("data/interactions.csv")).unwrap();
    let catalog2 = load_catalog(&p("data/catalog.jsonl")).unwrap();
    let log2 = load_interactions(&p("data/interactions.csv"), &catalog2).unwrap();
    assert_eq!(catalog2, catalog);
    assert_eq!(log2.records(), log.records());

    let encoder = FrozenEncoder::new(cfg.adapt.encoder.clone()).unwrap();
    let s1 = stage1(&encoder, &catalog, &cfg.adapt).unwrap();
    assert_eq!(s1.encoder_hash, encoder.weight_hash());
    let provenance = Provenance { config_hash: cfg.adapt_hash().unwrap(), seed: cfg.adapt.seed, checkpoint_id: String::new() };
    let ckpt = Checkpoint::new(ADAPTER_KIND, &cfg, provenance.clone(), s1.adapters.params()).unwrap();
    save_checkpoint(&ckpt, &p("run/adapters.json")).unwrap();
    let adapters = adapters_from_checkpoint(&load_checkpoint(&p("run/adapters.json")).unwrap(), &encoder, &cfg.adapt).unwrap();
    assert_eq!(adapters, s1.adapters);

    let (text, image) = embed(&encoder, &catalog, Some(&adapters), &provenance).unwrap();
    save_embeddings(&text, &p("run/text.bin")).unwrap();
    save_embeddings(&image, &p("run/image.bin")).unwrap();
    let (text2, image2) = (load_embeddings(&p("run/text.bin")).unwrap(), load_embeddings(&p("run/image.bin")).unwrap());
    assert_eq!(text2.item_ids, text.item_ids);
    assert_eq!(text2.matrix, text.matrix);
    assert_eq!(image2.matrix, image.matrix);

    let split = split_loo(&log2, &catalog2).unwrap();
    let content = content_features(&catalog2, &text2, &image2).unwrap();
    for model in [ModelKind::Seq, ModelKind::Bpr] {
        let rec = RecConfig { model, ..cfg.rec.clone() };
        let trained = train_rec(&split, &content, &rec).unwrap();
        let report = eval_model(&trained, &split, catalog.len(), &cfg.eval).unwrap();
        assert_eq!(report.overall.users, 40);

        let saved = trained.to_checkpoint(&rec, Provenance::default()).unwrap();
        save_checkpoint(&saved, &p("run/rec.json")).unwrap();
        let restored = TrainedModel::from_checkpoint(&load_checkpoint(&p("run/rec.json")).unwrap(), rec, content.clone()).unwrap();
        let again = eval_model(&restored, &split, catalog.len(), &cfg.eval).unwrap();
        assert_eq!(again.per_user, report.per_user, "{model}");
    }
}

#[test]
fn stage_outputs_are_bit_reproducible() {
    let cfg = small();
    let run = || {
        let (catalog, log) = generate_data(&cfg).unwrap();
        let encoder = FrozenEncoder::new(cfg.adapt.encoder.clone()).unwrap();
        let s1 = stage1(&encoder, &catalog, &cfg.adapt).unwrap();
        let (text, image) = embed(&encoder, &catalog, Some(&s1.adapters), &Provenance::default()).unwrap();
        let split = split_loo(&log, &catalog).unwrap();
        let content = content_features(&catalog, &text, &image).unwrap();
        let model = train_rec(&split, &content, &cfg.rec).unwrap();
        let report = eval_model(&model, &split, catalog.len(), &cfg.eval).unwrap();
        (s1.adapters.params(), text.to_bytes().unwrap(), model.params().clone(), report.per_user)
    };
    assert_eq!(run(), run());
}
