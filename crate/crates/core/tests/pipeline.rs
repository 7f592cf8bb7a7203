//! End-to-end runs of the library on a small synthetic dataset.

use std::collections::HashSet;

use echoclr::datamodel::{load_manifest, titration_count, Outcome, Split};
use echoclr::evaluate::{bootstrap_ci, Metric};
use echoclr::finetune::{
    fit_with_grid, predict_studies, read_results_csv, run_titration, write_results_csv, FinetuneConfig, InitKind,
    TitrationSpec,
};
use echoclr::model::{init_weights, Checkpoint, EchoNet, InitMode, ModelConfig};
use echoclr::pretrain::{pretrain_loop, PretrainConfig, PretrainMode, PretrainSinks};
use echoclr::synthgen::{generate_dataset, generate_in_memory, SynthConfig};
use echoclr::video::{read_video, DiskVideos, VideoFormat};

fn small() -> SynthConfig {
    SynthConfig {
        n_studies: 20,
        n_external_studies: 6,
        videos_per_study: (2, 3),
        frames_per_video: 16,
        height: 32,
        width: 32,
        lvh_prevalence: 0.5,
        as_prevalence: 0.5,
        seed: 5,
        ..SynthConfig::default()
    }
}

fn finetune_config(outcome: Outcome) -> FinetuneConfig {
    FinetuneConfig {
        outcome,
        max_epochs: 2,
        patience: 1,
        batch: 8,
        lr_candidates: vec![1e-3],
        ..FinetuneConfig::default()
    }
}

#[test]
fn disk_dataset_matches_in_memory_generation() {
    let dir = tempfile::tempdir().unwrap();
    let config = small();
    generate_dataset(&config, dir.path(), VideoFormat::Avi).unwrap();
    let m = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    m.validate().unwrap();
    let mem = generate_in_memory(&config).unwrap();
    assert_eq!(m.videos.len(), mem.videos.len());
    assert_eq!(m.studies, mem.manifest.studies);
    for (rec, v) in m.videos.iter().zip(&mem.videos) {
        assert_eq!(&read_video(&rec.path).unwrap(), v, "{}", rec.video_id);
    }
    let external = m.studies_in(Split::ExternalTest).len();
    assert_eq!(external, 6);
}

#[test]
fn pretraining_is_deterministic_and_feeds_finetuning() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_in_memory(&small()).unwrap();
    let m = &ds.manifest;
    let train: HashSet<String> = m.studies_in(Split::Train).into_iter().map(|s| s.study_id).collect();
    let ids: HashSet<&str> = train.iter().map(String::as_str).collect();
    let videos = m.videos_of(&ids);
    let config = PretrainConfig {
        mode: PretrainMode::EchoClr,
        epochs: 2,
        batch_pairs: 4,
        learning_rate: 1e-3,
        seed: 4,
        ..PretrainConfig::default()
    };
    let run = |ckpt: Option<&std::path::Path>| {
        let mut net = EchoNet::<f32>::random(config.model_config(ModelConfig::tiny(8)), 4).unwrap();
        let out = pretrain_loop(
            &mut net,
            m,
            &ds.videos,
            &videos,
            &config,
            PretrainSinks {
                log: None,
                checkpoint_dir: ckpt,
            },
        )
        .unwrap();
        (net, out)
    };
    let (net_a, out_a) = run(Some(dir.path()));
    let (net_b, out_b) = run(None);
    for (a, b) in net_a.store.entries().iter().zip(net_b.store.entries()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
    let losses = |o: &echoclr::pretrain::PretrainOutcome| {
        o.history.iter().map(|e| (e.nt_xent, e.reorder_ce)).collect::<Vec<_>>()
    };
    assert_eq!(losses(&out_a), losses(&out_b));

    let ckpt = dir.path().join("final.ckpt");
    let (ft, report) = init_weights(ModelConfig::tiny(8), &InitMode::SslCheckpoint(ckpt.clone()), 0).unwrap();
    assert!(report.missing.is_empty());
    let saved = Checkpoint::load(&ckpt).unwrap();
    for t in saved.tensors.iter().filter(|t| t.name.starts_with("encoder.")) {
        let id = ft.store.find(&t.name).unwrap();
        assert_eq!(ft.store.get(id).data(), &t.data[..], "{}", t.name);
    }

    let cfg = FinetuneConfig {
        init: InitKind::SslCheckpoint,
        ..finetune_config(Outcome::Lvh)
    };
    let tr = m.studies_in(Split::Train);
    let val = m.studies_in(Split::Val);
    let (fit, grid) = fit_with_grid(
        &ModelConfig::tiny(8),
        &InitMode::SslCheckpoint(ckpt),
        m,
        &ds.videos,
        &tr,
        &val,
        &cfg,
        None,
    )
    .unwrap();
    assert_eq!(grid.len(), 1);
    assert!(fit.best_val_loss.is_finite());
    let test = m.studies_in(Split::InternalTest);
    let preds = predict_studies(&fit.net, m, &ds.videos, &test, &cfg).unwrap();
    assert_eq!(preds.len(), test.len());
    assert!(preds.iter().all(|p| p.study_prob > 0.0 && p.study_prob < 1.0));
    if preds.iter().any(|p| p.label) && preds.iter().any(|p| !p.label) {
        let r = bootstrap_ci(Metric::Auroc, &preds, 200, 0.95, 1).unwrap();
        assert!(r.ci[0] <= r.point && r.point <= r.ci[1]);
    }
}

#[test]
fn titration_rows_follow_counts_and_survive_csv() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(), dir.path(), VideoFormat::Raw).unwrap();
    let m = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    let source = DiskVideos {
        paths: m.videos.iter().map(|v| v.path.clone()).collect(),
    };
    let spec = TitrationSpec {
        init: &InitMode::Random,
        init_label: "random".into(),
        ratios: vec![0.5, 1.0],
        model: ModelConfig::tiny(8),
        finetune: finetune_config(Outcome::SevereAs),
        bootstrap_b: 100,
        baseline: None,
    };
    let out = run_titration(&m, &source, &spec, None).unwrap();
    let n_train = m
        .studies_in(Split::Train)
        .iter()
        .filter(|s| s.severe_as_label.is_some())
        .count();
    assert_eq!(out.rows.len(), 4);
    for row in &out.rows {
        assert_eq!(row.n_studies, titration_count(n_train, row.ratio));
        assert!(row.p_vs_baseline.is_nan());
    }
    let tests: HashSet<&str> = out.rows.iter().map(|r| r.test_set.as_str()).collect();
    assert_eq!(tests, HashSet::from(["internal", "external"]));

    let path = dir.path().join("results.csv");
    write_results_csv(&out.rows, &path).unwrap();
    let back = read_results_csv(&path).unwrap();
    assert_eq!(back.len(), out.rows.len());
    for (a, b) in back.iter().zip(&out.rows) {
        assert_eq!((a.ratio, &a.test_set, a.n_studies), (b.ratio, &b.test_set, b.n_studies));
        assert!(a.auroc == b.auroc || (a.auroc.is_nan() && b.auroc.is_nan()));
    }

    // the same run against itself as baseline gives p = 0.5 wherever defined
    let spec2 = TitrationSpec {
        baseline: Some(&out.predictions),
        ..spec
    };
    let again = run_titration(&m, &source, &spec2, None).unwrap();
    for row in again.rows.iter().filter(|r| r.p_vs_baseline.is_finite()) {
        assert!((row.p_vs_baseline - 0.5).abs() < 1e-9);
    }
}

#[test]
fn explain_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_in_memory(&small()).unwrap();
    let net = EchoNet::<f32>::random(ModelConfig::tiny(8), 2).unwrap();
    let paths = echoclr::explain::explain_video(
        &net,
        &ds.videos[0],
        &ds.manifest.videos[0].video_id,
        false,
        dir.path(),
        3,
    )
    .unwrap();
    let raw = std::fs::read(&paths.raw).unwrap();
    assert_eq!(raw.len(), 32 * 32 * 4);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&paths.json).unwrap()).unwrap();
    assert_eq!(side["height"], 32);
    assert_eq!(side["source_layer"], echoclr::explain::SOURCE_LAYER);
    assert!(side["top_k"].as_array().unwrap().len() <= 3);
    let png = std::fs::read(&paths.png).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}
