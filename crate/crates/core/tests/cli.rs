//! CLI-level contracts: prerequisite errors name the producing command,
//! baselines evaluate without any knowledge-base artifact, commands are
//! idempotent, and the effective config round-trips.

use retrokb::cli::{self, Paths};
use retrokb::config::RunConfig;
use retrokb::error::Error;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.num_samples = 2_000;
    cfg.teacher_epochs = 1;
    cfg.kb_epochs = 2;
    cfg.backbone_epochs = 2;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn build_kb_without_teacher_names_prerequisite() {
    let cfg = small_config();
    let tmp = tempfile::tempdir().unwrap();
    let paths = Paths::new(tmp.path());
    cli::cmd_gen_data(&cfg, &paths).unwrap();
    match cli::cmd_build_kb(&cfg, &paths) {
        Err(Error::MissingArtifact { produced_by: "pretrain-teacher", .. }) => {}
        other => panic!("expected missing-artifact naming pretrain-teacher, got {other:?}"),
    }
}

#[test]
fn anything_without_dataset_names_gen_data() {
    let cfg = small_config();
    let tmp = tempfile::tempdir().unwrap();
    let paths = Paths::new(tmp.path());
    match cli::cmd_pretrain_teacher(&cfg, &paths) {
        Err(Error::MissingArtifact { produced_by: "gen-data", .. }) => {}
        other => panic!("expected missing-artifact naming gen-data, got {other:?}"),
    }
}

#[test]
fn baseline_eval_needs_no_kb_artifact() {
    let mut cfg = small_config();
    cfg.feature_wise = false;
    cfg.instance_wise = false;
    let tmp = tempfile::tempdir().unwrap();
    let paths = Paths::new(tmp.path());
    cli::cmd_gen_data(&cfg, &paths).unwrap();
    cli::cmd_train_backbone(&cfg, &paths).unwrap();
    assert!(!paths.kb_model().exists());
    cli::cmd_eval(&cfg, &paths, None).unwrap();
    assert!(paths.metrics().exists());
}

#[test]
fn integrated_backbone_requires_kb_artifact() {
    let cfg = small_config();
    let tmp = tempfile::tempdir().unwrap();
    let paths = Paths::new(tmp.path());
    cli::cmd_gen_data(&cfg, &paths).unwrap();
    match cli::cmd_train_backbone(&cfg, &paths) {
        Err(Error::MissingArtifact { produced_by: "build-kb", .. }) => {}
        other => panic!("expected missing-artifact naming build-kb, got {other:?}"),
    }
}

#[test]
fn gen_data_is_idempotent() {
    let cfg = small_config();
    let tmp = tempfile::tempdir().unwrap();
    let paths = Paths::new(tmp.path());
    cli::cmd_gen_data(&cfg, &paths).unwrap();
    let first = std::fs::read(paths.dataset()).unwrap();
    cli::cmd_gen_data(&cfg, &paths).unwrap();
    assert_eq!(std::fs::read(paths.dataset()).unwrap(), first);
}

#[test]
fn effective_config_round_trips() {
    let cfg = small_config();
    let tmp = tempfile::tempdir().unwrap();
    let paths = Paths::new(tmp.path());
    cli::cmd_gen_data(&cfg, &paths).unwrap();
    let text = std::fs::read_to_string(paths.effective_config()).unwrap();
    let reloaded = RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(reloaded.to_toml_string().unwrap(), cfg.to_toml_string().unwrap());
}

#[test]
fn sweep_alpha_emits_eleven_rows() {
    let mut cfg = small_config();
    // Keep the eleven stage-1/stage-2 runs quick.
    cfg.num_samples = 600;
    cfg.kb_epochs = 1;
    cfg.backbone_epochs = 1;
    let tmp = tempfile::tempdir().unwrap();
    let paths = Paths::new(tmp.path());
    cli::cmd_gen_data(&cfg, &paths).unwrap();
    cli::cmd_pretrain_teacher(&cfg, &paths).unwrap();
    cli::cmd_sweep_alpha(&cfg, &paths).unwrap();
    let text = std::fs::read_to_string(paths.sweep_alpha()).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "setting,auc,logloss");
    assert_eq!(rows.len(), 1 + 11);
}

#[test]
fn ablate_emits_strategy_rows() {
    let mut cfg = small_config();
    cfg.num_samples = 600;
    cfg.kb_epochs = 1;
    cfg.backbone_epochs = 1;
    let tmp = tempfile::tempdir().unwrap();
    let paths = Paths::new(tmp.path());
    cli::cmd_gen_data(&cfg, &paths).unwrap();
    cli::cmd_pretrain_teacher(&cfg, &paths).unwrap();
    cli::cmd_ablate_strategies(&cfg, &paths).unwrap();
    let text = std::fs::read_to_string(paths.ablate()).unwrap();
    let settings: Vec<&str> =
        text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        settings,
        ["update:fix", "update:upd_g", "update:upd_fg", "positive:random"]
    );
}

#[test]
fn export_knowledge_writes_vector_csvs() {
    let mut cfg = small_config();
    cfg.num_samples = 600;
    cfg.kb_epochs = 1;
    let tmp = tempfile::tempdir().unwrap();
    let paths = Paths::new(tmp.path());
    cli::cmd_gen_data(&cfg, &paths).unwrap();
    cli::cmd_pretrain_teacher(&cfg, &paths).unwrap();
    cli::cmd_build_kb(&cfg, &paths).unwrap();
    cli::cmd_export_knowledge(&cfg, &paths).unwrap();

    let ds = retrokb::data::read_dataset(&paths.dataset()).unwrap();
    let split = retrokb::data::split_temporal(&ds, cfg.cut1, cfg.cut2).unwrap();
    let test_csv =
        std::fs::read_to_string(paths.knowledge_vectors("test")).unwrap();
    assert_eq!(test_csv.lines().count(), 1 + split.test.len());

    // Exported rows reproduce encode() exactly.
    let kb = retrokb::kb::load_kb(&paths.kb_model()).unwrap();
    let first = test_csv.lines().nth(1).unwrap();
    let cells: Vec<&str> = first.split(',').collect();
    let sample = &split.test.samples[0];
    assert_eq!(cells[0], sample.sample_id.to_string());
    assert_eq!(cells[1], sample.label.to_string());
    let z = kb.encode(sample).unwrap();
    for (cell, v) in cells[2..].iter().zip(&z) {
        assert_eq!(cell.parse::<f64>().unwrap(), *v);
    }

    // Re-export is byte-identical.
    let bytes = std::fs::read(paths.knowledge_vectors("test")).unwrap();
    cli::cmd_export_knowledge(&cfg, &paths).unwrap();
    assert_eq!(std::fs::read(paths.knowledge_vectors("test")).unwrap(), bytes);
}

#[test]
fn neighbor_cache_reuse_matches_fresh_run() {
    let cfg = small_config();
    let tmp = tempfile::tempdir().unwrap();
    let paths = Paths::new(tmp.path());
    cli::cmd_gen_data(&cfg, &paths).unwrap();
    cli::cmd_pretrain_teacher(&cfg, &paths).unwrap();
    let first = std::fs::read(paths.teacher_model()).unwrap();
    assert!(paths.neighbor_cache().exists());
    // Second run reads the cache; outputs stay byte-identical.
    cli::cmd_pretrain_teacher(&cfg, &paths).unwrap();
    assert_eq!(std::fs::read(paths.teacher_model()).unwrap(), first);
}
