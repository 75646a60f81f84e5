use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use retrokb::cli::{self, Paths};
use retrokb::config::{default_config_toml, RunConfig};

#[derive(Parser)]
#[command(
    name = "retrokb",
    about = "CTR lab: retrieval teacher, distilled knowledge base, backbone integration",
    version
)]
struct Cli {
    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set alpha=0.3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Artifact directory; overrides the config's artifact_dir.
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and metadata sidecar.
    GenData,
    /// Pre-train the retrieval teacher and export knowledge targets.
    PretrainTeacher,
    /// Stage 1: build the knowledge base from exported targets.
    BuildKb,
    /// Stage 2: train the configured backbone.
    TrainBackbone,
    /// Evaluate the trained model(s) on the test slice.
    Eval {
        /// Base AUC for the relative-improvement column.
        #[arg(long)]
        base_auc: Option<f64>,
    },
    /// Per-sample inference latency: knowledge-base path vs retrieval path.
    Bench {
        /// Also measure with the configured thread count.
        #[arg(long)]
        parallel: bool,
    },
    /// Export knowledge vectors for external visualization.
    ExportKnowledge,
    /// Stage 1 + 2 + eval for alpha in {0.0, 0.1, ..., 1.0}.
    SweepAlpha,
    /// Update-strategy and positive-selection ablations.
    AblateStrategies,
    /// Print the fully commented default configuration.
    PrintConfig,
}

fn run() -> retrokb::Result<()> {
    let args = Cli::parse();
    let base = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&args.overrides)?;
    let root = args.artifacts.clone().unwrap_or_else(|| PathBuf::from(&cfg.artifact_dir));
    let paths = Paths::new(root);

    match args.command {
        Command::GenData => cli::cmd_gen_data(&cfg, &paths),
        Command::PretrainTeacher => cli::cmd_pretrain_teacher(&cfg, &paths),
        Command::BuildKb => cli::cmd_build_kb(&cfg, &paths),
        Command::TrainBackbone => cli::cmd_train_backbone(&cfg, &paths),
        Command::Eval { base_auc } => cli::cmd_eval(&cfg, &paths, base_auc),
        Command::Bench { parallel } => cli::cmd_bench(&cfg, &paths, parallel),
        Command::ExportKnowledge => cli::cmd_export_knowledge(&cfg, &paths),
        Command::SweepAlpha => cli::cmd_sweep_alpha(&cfg, &paths),
        Command::AblateStrategies => cli::cmd_ablate_strategies(&cfg, &paths),
        Command::PrintConfig => {
            print!("{}", default_config_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
