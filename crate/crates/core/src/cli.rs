//! Pipeline commands behind the CLI: each one reads the run configuration,
//! checks its prerequisite artifacts (naming the producing command when one
//! is missing), does its work, and writes the fully resolved config next to
//! the outputs. Re-running a command with the same config and seeds
//! overwrites its outputs with identical bytes; the latency benchmark is the
//! one exception since its numbers are wall-clock measurements.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{
    load_backbone, save_backbone, train_backbone, BackboneModel, BackboneTrainConfig,
    UpdateStrategy,
};
use crate::config::RunConfig;
use crate::data::{self, Dataset, TemporalSplit};
use crate::error::{Error, Result};
use crate::eval::{self, BenchConfig, LatencyReport, MetricReport};
use crate::kb::{self, construct_knowledge, ConstructionConfig, KnowledgeBase};
use crate::retrieval::{self, build_index, PositiveStrategy, RetrievalResult, SearchPoolIndex};
use crate::teacher::{
    self, load_teacher, read_knowledge_targets, save_teacher, KnowledgeTargets, TeacherModel,
    TeacherTrainConfig,
};

/// Stable relative paths under the artifact directory.
pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Paths { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }
    pub fn neighbor_cache(&self) -> PathBuf {
        self.root.join("neighbors.cache")
    }
    pub fn teacher_model(&self) -> PathBuf {
        self.root.join("teacher.model.json")
    }
    pub fn teacher_trace(&self) -> PathBuf {
        self.root.join("teacher_train.csv")
    }
    pub fn knowledge_targets(&self) -> PathBuf {
        self.root.join("knowledge_targets.bin")
    }
    pub fn kb_model(&self) -> PathBuf {
        self.root.join("kb.model.json")
    }
    pub fn kb_trace(&self) -> PathBuf {
        self.root.join("kb_train.csv")
    }
    pub fn backbone_model(&self) -> PathBuf {
        self.root.join("backbone.model.json")
    }
    pub fn backbone_trace(&self) -> PathBuf {
        self.root.join("backbone_train.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn bench(&self) -> PathBuf {
        self.root.join("bench.csv")
    }
    pub fn knowledge_vectors(&self, slice: &str) -> PathBuf {
        self.root.join(format!("knowledge_vectors_{slice}.csv"))
    }
    pub fn sweep_alpha(&self) -> PathBuf {
        self.root.join("sweep_alpha.csv")
    }
    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate_strategies.csv")
    }
    pub fn effective_config(&self) -> PathBuf {
        self.root.join("config.effective.toml")
    }
}

fn write_effective_config(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    fs::create_dir_all(paths.root())?;
    fs::write(paths.effective_config(), cfg.to_toml_string()?)?;
    Ok(())
}

fn require(path: &Path, produced_by: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.display().to_string(), produced_by })
    }
}

fn load_split(cfg: &RunConfig, paths: &Paths) -> Result<(Dataset, TemporalSplit)> {
    require(&paths.dataset(), "gen-data")?;
    let ds = data::read_dataset(&paths.dataset())?;
    let split = data::split_temporal(&ds, cfg.cut1, cfg.cut2)?;
    Ok((ds, split))
}

fn teacher_train_config(cfg: &RunConfig) -> TeacherTrainConfig {
    TeacherTrainConfig {
        embed_width: cfg.teacher_embed_width,
        hidden: cfg.teacher_hidden,
        k: cfg.k,
        epochs: cfg.teacher_epochs,
        batch_size: cfg.teacher_batch,
        adam: cfg.adam(cfg.teacher_lr),
        seed: cfg.teacher_seed,
    }
}

fn construction_config(cfg: &RunConfig, alpha: f64) -> ConstructionConfig {
    ConstructionConfig {
        full_width: cfg.embed_width,
        alpha,
        epochs: cfg.kb_epochs,
        batch_size: cfg.kb_batch,
        adam: cfg.adam(cfg.kb_lr),
        seed: cfg.kb_seed,
        positive: cfg.positive(),
    }
}

fn backbone_train_config(cfg: &RunConfig, strategy: UpdateStrategy) -> BackboneTrainConfig {
    BackboneTrainConfig {
        epochs: cfg.backbone_epochs,
        batch_size: cfg.backbone_batch,
        adam: cfg.adam(cfg.backbone_lr),
        seed: cfg.backbone_seed,
        strategy,
    }
}

fn new_backbone(cfg: &RunConfig, ds: &Dataset, kb: Option<&KnowledgeBase>) -> Result<BackboneModel> {
    BackboneModel::new(
        cfg.backbone_kind(),
        ds.num_fields(),
        ds.vocab_size as usize,
        cfg.embed_width,
        cfg.backbone_hidden,
        cfg.feature_wise,
        cfg.instance_wise,
        kb.map(|k| &k.dims),
        cfg.backbone_seed,
    )
}

/// Generate the synthetic dataset and write it plus its metadata sidecar.
pub fn cmd_gen_data(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    write_effective_config(cfg, paths)?;
    let ds = data::generate_synthetic(&cfg.synthetic_spec())?;
    data::write_dataset(&ds, &paths.dataset())?;
    println!(
        "wrote {} samples ({} fields, vocab {}) to {}",
        ds.len(),
        ds.num_fields(),
        ds.vocab_size,
        paths.dataset().display()
    );
    Ok(())
}

/// Retrieve (or reuse cached) neighbors for the train slice, pre-train the
/// teacher, and export its knowledge targets.
pub fn cmd_pretrain_teacher(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    write_effective_config(cfg, paths)?;
    let (_, split) = load_split(cfg, paths)?;
    let index = build_index(&split.pool)?;

    let cache_path = paths.neighbor_cache();
    let neighbors: Vec<RetrievalResult> = if cache_path.exists() {
        let cached = retrieval::load_neighbor_cache(&cache_path)?;
        if cached.len() == split.train.len()
            && cached.iter().zip(&split.train.samples).all(|((k, _), s)| *k == s.sample_id)
        {
            cached.into_iter().map(|(_, r)| r).collect()
        } else {
            recompute_and_cache(&index, &split, cfg.k, &cache_path)?
        }
    } else {
        recompute_and_cache(&index, &split, cfg.k, &cache_path)?
    };

    let tcfg = teacher_train_config(cfg);
    let (model, trace) =
        teacher::pretrain_teacher_with_neighbors(&split, &index, &neighbors, &tcfg)?;
    save_teacher(&model, &paths.teacher_model())?;
    let mut csv = String::from("epoch,train_loss\n");
    for (epoch, loss) in trace.iter().enumerate() {
        csv.push_str(&format!("{epoch},{loss}\n"));
    }
    fs::write(paths.teacher_trace(), csv)?;

    teacher::export_knowledge_targets(
        &model,
        &index,
        &split.train,
        &neighbors,
        cfg.positive(),
        cfg.kb_seed,
        &paths.knowledge_targets(),
    )?;
    println!(
        "teacher trained ({} epochs); targets for {} samples at {}",
        cfg.teacher_epochs,
        split.train.len(),
        paths.knowledge_targets().display()
    );
    Ok(())
}

fn recompute_and_cache(
    index: &SearchPoolIndex,
    split: &TemporalSplit,
    k: usize,
    cache_path: &Path,
) -> Result<Vec<RetrievalResult>> {
    let neighbors = teacher::compute_train_neighbors(index, &split.train, k)?;
    let keys: Vec<u64> = split.train.samples.iter().map(|s| s.sample_id).collect();
    retrieval::save_neighbor_cache(cache_path, &keys, &neighbors)?;
    Ok(neighbors)
}

fn load_targets(paths: &Paths) -> Result<KnowledgeTargets> {
    require(&paths.knowledge_targets(), "pretrain-teacher")?;
    read_knowledge_targets(&paths.knowledge_targets())
}

/// Stage 1: build the knowledge base from the exported targets.
pub fn cmd_build_kb(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    write_effective_config(cfg, paths)?;
    let (_, split) = load_split(cfg, paths)?;
    let targets = load_targets(paths)?;
    let ccfg = construction_config(cfg, cfg.alpha);
    let (kb, trace) = construct_knowledge(&targets, &split.pool, &split.train, &ccfg)?;
    kb::save_kb(&kb, cfg.alpha, cfg.kb_seed, &paths.kb_model())?;
    let mut csv = String::from("epoch,loss,imit,contra\n");
    for row in &trace {
        csv.push_str(&format!("{},{},{},{}\n", row.epoch, row.loss, row.imit, row.contra));
    }
    fs::write(paths.kb_trace(), csv)?;
    println!(
        "knowledge base built (alpha={}, {} epochs) at {}",
        cfg.alpha,
        cfg.kb_epochs,
        paths.kb_model().display()
    );
    Ok(())
}

/// Stage 2: train the configured backbone, integrated when flags are on.
pub fn cmd_train_backbone(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    write_effective_config(cfg, paths)?;
    let (_, split) = load_split(cfg, paths)?;
    let integrated = cfg.feature_wise || cfg.instance_wise;
    let mut kb = if integrated {
        require(&paths.kb_model(), "build-kb")?;
        Some(kb::load_kb(&paths.kb_model())?)
    } else {
        None
    };
    let mut model = new_backbone(cfg, &split.train, kb.as_ref())?;
    let bcfg = backbone_train_config(cfg, cfg.strategy());
    let trace = train_backbone(&mut model, kb.as_mut(), &split, &bcfg)?;
    save_backbone(&model, &paths.backbone_model())?;
    if let Some(kb) = &kb {
        // Stage-2 updates may have touched live groups; persist the result.
        kb::save_kb(kb, cfg.alpha, cfg.kb_seed, &paths.kb_model())?;
    }
    let mut csv = String::from("epoch,train_loss,valid_auc,valid_logloss\n");
    for row in &trace {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.valid_auc, row.valid_logloss
        ));
    }
    fs::write(paths.backbone_trace(), csv)?;
    println!(
        "backbone `{}` trained ({} epochs, strategy {}) at {}",
        cfg.backbone,
        cfg.backbone_epochs,
        cfg.update_strategy,
        paths.backbone_model().display()
    );
    Ok(())
}

fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut csv = String::from("model,auc,logloss,n,rel_impr\n");
    for r in reports {
        let rel = r.rel_impr.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{},{}\n", r.model, r.auc, r.logloss, r.n, rel));
    }
    csv
}

/// Metric reports for the trained backbone (and the teacher, when present)
/// on the test slice. The knowledge base is loaded only when integration
/// flags are on; a baseline evaluates with no KB artifact on disk at all.
pub fn compute_eval_reports(
    cfg: &RunConfig,
    paths: &Paths,
    base_auc: Option<f64>,
) -> Result<Vec<MetricReport>> {
    let (_, split) = load_split(cfg, paths)?;
    require(&paths.backbone_model(), "train-backbone")?;
    let model = load_backbone(&paths.backbone_model())?;
    let integrated = model.dims.feature_wise || model.dims.instance_wise;
    let kb = if integrated {
        require(&paths.kb_model(), "build-kb")?;
        Some(kb::load_kb(&paths.kb_model())?)
    } else {
        None
    };

    let labels = split.test.labels();
    let mut reports = Vec::new();
    let scores = model.scores(kb.as_ref(), &split.test)?;
    let tag = format!("backbone_{}", model.dims.kind);
    let mut report = MetricReport::from_scores(&tag, &scores, &labels)?;
    if let Some(base) = base_auc {
        report.rel_impr = Some(eval::rel_impr(report.auc, base)?);
    }
    reports.push(report);

    if paths.teacher_model().exists() {
        let teacher = load_teacher(&paths.teacher_model())?;
        let index = build_index(&split.pool)?;
        let scores = teacher::teacher_scores(&teacher, &index, &split.test, cfg.k)?;
        reports.push(MetricReport::from_scores("teacher", &scores, &labels)?);
    }
    Ok(reports)
}

pub fn cmd_eval(cfg: &RunConfig, paths: &Paths, base_auc: Option<f64>) -> Result<()> {
    write_effective_config(cfg, paths)?;
    let reports = compute_eval_reports(cfg, paths, base_auc)?;
    fs::write(paths.metrics(), metrics_csv(&reports))?;
    for r in &reports {
        println!("{}: auc={:.4} logloss={:.4} (n={})", r.model, r.auc, r.logloss, r.n);
    }
    Ok(())
}

/// Export knowledge vectors for the train and test slices (the inputs an
/// external embedding/visualization tool would consume).
pub fn cmd_export_knowledge(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    write_effective_config(cfg, paths)?;
    let (_, split) = load_split(cfg, paths)?;
    require(&paths.kb_model(), "build-kb")?;
    let kb = kb::load_kb(&paths.kb_model())?;
    eval::export_vectors(&kb, &split.train, &paths.knowledge_vectors("train"))?;
    eval::export_vectors(&kb, &split.test, &paths.knowledge_vectors("test"))?;
    println!(
        "exported {} train and {} test knowledge vectors",
        split.train.len(),
        split.test.len()
    );
    Ok(())
}

/// Latency benchmark across the configured pool sizes, single-threaded by
/// default plus a parallel pass when requested. Uses freshly initialized
/// models of the configured shapes; timing does not depend on weights.
pub fn cmd_bench(cfg: &RunConfig, paths: &Paths, parallel: bool) -> Result<()> {
    write_effective_config(cfg, paths)?;
    let mut report = LatencyReport::default();
    for &pool_size in &cfg.bench_pool_sizes {
        let bench_test = 256;
        let spec = data::SyntheticSpec {
            num_samples: pool_size + bench_test,
            seed: cfg.data_seed.wrapping_add(pool_size as u64),
            ..cfg.synthetic_spec()
        };
        let ds = data::generate_synthetic(&spec)?;
        let pool = Dataset {
            samples: ds.samples[..pool_size].to_vec(),
            field_cardinalities: ds.field_cardinalities.clone(),
            vocab_size: ds.vocab_size,
        };
        let test = Dataset {
            samples: ds.samples[pool_size..].to_vec(),
            field_cardinalities: ds.field_cardinalities.clone(),
            vocab_size: ds.vocab_size,
        };
        let index = build_index(&pool)?;
        let (teacher, kb, backbone) = bench_models(cfg, &ds)?;
        let bcfg = BenchConfig {
            warmup: cfg.bench_warmup,
            samples: cfg.bench_samples,
            k: cfg.k,
            parallel_threads: parallel.then_some(cfg.bench_threads),
        };
        eval::bench_latency(&bcfg, &test, &index, &teacher, &kb, &backbone, &mut report)?;
    }
    let echo = format!(
        "d={};d_t={};k={};alpha={};backbone={}",
        cfg.embed_width, cfg.teacher_embed_width, cfg.k, cfg.alpha, cfg.backbone
    );
    report.write_csv(&paths.bench(), &echo)?;
    for row in &report.rows {
        let retr = row
            .retrieval_mean_ms
            .map(|v| format!(" (retrieval {v:.4} ms)"))
            .unwrap_or_default();
        println!(
            "{} pool={} threads={}: mean {:.4} ms p50 {:.4} p99 {:.4}{}",
            row.path, row.pool_size, row.threads, row.mean_ms, row.p50_ms, row.p99_ms, retr
        );
    }
    Ok(())
}

/// Fresh, seeded models of the configured shapes for benchmarking.
pub fn bench_models(
    cfg: &RunConfig,
    ds: &Dataset,
) -> Result<(TeacherModel, KnowledgeBase, BackboneModel)> {
    let teacher = TeacherModel::new(
        teacher::TeacherDims {
            num_fields: ds.num_fields(),
            vocab_size: ds.vocab_size as usize,
            embed_width: cfg.teacher_embed_width,
            hidden: cfg.teacher_hidden,
        },
        cfg.teacher_seed,
    )?;
    let kb = KnowledgeBase::new(
        kb::KbDims::with_defaults(
            ds.num_fields(),
            ds.vocab_size as usize,
            cfg.embed_width / 2,
            teacher.dims.agg_width(),
        ),
        cfg.kb_seed,
    )?;
    let backbone = new_backbone(cfg, ds, Some(&kb))?;
    Ok((teacher, kb, backbone))
}

/// One (setting, auc, logloss) row per sweep point.
fn sweep_csv(rows: &[(String, f64, f64)]) -> String {
    let mut csv = String::from("setting,auc,logloss\n");
    for (setting, auc, logloss) in rows {
        csv.push_str(&format!("{setting},{auc},{logloss}\n"));
    }
    csv
}

/// Build a KB at the given alpha and train a fresh backbone on it; returns
/// test AUC and logloss. The workhorse for sweeps and ablations.
pub fn run_stage12(
    cfg: &RunConfig,
    split: &TemporalSplit,
    targets: &KnowledgeTargets,
    alpha: f64,
    strategy: UpdateStrategy,
) -> Result<(f64, f64)> {
    let ccfg = construction_config(cfg, alpha);
    let (mut kb, _) = construct_knowledge(targets, &split.pool, &split.train, &ccfg)?;
    let mut model = new_backbone(cfg, &split.train, Some(&kb))?;
    let bcfg = backbone_train_config(cfg, strategy);
    train_backbone(&mut model, Some(&mut kb), split, &bcfg)?;
    let scores = model.scores(Some(&kb), &split.test)?;
    let labels = split.test.labels();
    Ok((eval::auc(&scores, &labels)?, eval::logloss(&scores, &labels)?))
}

/// Alpha sweep over {0.0, 0.1, ..., 1.0}: stage 1 + stage 2 + eval per value.
pub fn cmd_sweep_alpha(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    write_effective_config(cfg, paths)?;
    let (_, split) = load_split(cfg, paths)?;
    let targets = load_targets(paths)?;
    let mut rows = Vec::new();
    for tenth in 0..=10u32 {
        let alpha = f64::from(tenth) / 10.0;
        let (auc, logloss) = run_stage12(cfg, &split, &targets, alpha, cfg.strategy())?;
        println!("alpha={alpha:.1}: auc={auc:.4} logloss={logloss:.4}");
        rows.push((format!("{alpha:.1}"), auc, logloss));
    }
    fs::write(paths.sweep_alpha(), sweep_csv(&rows))?;
    Ok(())
}

/// Update-strategy ablation (fix / upd_g / upd_fg) plus the random
/// positive-sample variant, one row each.
pub fn cmd_ablate_strategies(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    write_effective_config(cfg, paths)?;
    let (_, split) = load_split(cfg, paths)?;
    let targets = load_targets(paths)?;
    let mut rows = Vec::new();
    for strategy in [UpdateStrategy::Fix, UpdateStrategy::UpdG, UpdateStrategy::UpdFG] {
        let (auc, logloss) = run_stage12(cfg, &split, &targets, cfg.alpha, strategy)?;
        println!("strategy={strategy}: auc={auc:.4} logloss={logloss:.4}");
        rows.push((format!("update:{strategy}"), auc, logloss));
    }

    // Random positive selection: re-export targets with the random strategy
    // against the saved teacher, then run the fixed pipeline on them.
    require(&paths.teacher_model(), "pretrain-teacher")?;
    let teacher_model = load_teacher(&paths.teacher_model())?;
    let index = build_index(&split.pool)?;
    let neighbors = teacher::compute_train_neighbors(&index, &split.train, cfg.k)?;
    let tmp = paths.root().join("knowledge_targets.random.bin");
    teacher::export_knowledge_targets(
        &teacher_model,
        &index,
        &split.train,
        &neighbors,
        PositiveStrategy::Random,
        cfg.kb_seed,
        &tmp,
    )?;
    let random_targets = read_knowledge_targets(&tmp)?;
    let (auc, logloss) =
        run_stage12(cfg, &split, &random_targets, cfg.alpha, UpdateStrategy::Fix)?;
    println!("positive=random: auc={auc:.4} logloss={logloss:.4}");
    rows.push(("positive:random".to_string(), auc, logloss));

    fs::write(paths.ablate(), sweep_csv(&rows))?;
    Ok(())
}

/// The full pipeline in order; used by determinism checks and the Python
/// bindings.
pub fn run_pipeline(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    cmd_gen_data(cfg, paths)?;
    cmd_pretrain_teacher(cfg, paths)?;
    cmd_build_kb(cfg, paths)?;
    cmd_train_backbone(cfg, paths)?;
    cmd_eval(cfg, paths, None)?;
    Ok(())
}
