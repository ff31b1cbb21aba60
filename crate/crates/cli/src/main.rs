//! `grounded-audit`: command-line driver for the audit pipeline.
//!
//! Stages exchange files only. Every JSON artifact has the shape
//! `{"provenance": {...}, "result": {...}}`; on failure the process prints
//! `{"error": {...}}` to stderr and exits with status 1.

mod settings;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "grounded-audit", version, about = "Slice discovery, keyword description and mitigation for image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset with a planted spurious correlation.
    Synth,
    /// Train the classifier under audit (ERM, final model).
    Train,
    /// Compute heatmaps and grounded images.
    Ground,
    /// Overlap of thresholded heatmaps with core / spurious masks.
    AuditOverlap,
    /// Discover underperforming slices.
    Discover,
    /// Rank bias keywords from captions of misclassified images.
    Keywords,
    /// Train a debiased model.
    Mitigate,
    /// Grouped metrics of a model or a zero-shot prompting strategy.
    Evaluate,
    /// Assemble stage artifacts into a report.
    Report,
    /// Sweep the heatmap threshold.
    AblateTau,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Ground => "ground",
            Command::AuditOverlap => "audit-overlap",
            Command::Discover => "discover",
            Command::Keywords => "keywords",
            Command::Mitigate => "mitigate",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
            Command::AblateTau => "ablate-tau",
        }
    }
}

/// Every setting. Values not given here come from `--config`, then defaults.
#[derive(Args, Debug)]
struct Flags {
    /// Flat TOML file whose keys mirror these flag names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Heatmap threshold [default: 0.7].
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// gradcam | scorecam | gradcam++ | fullgrad [default: gradcam].
    #[arg(long, global = true)]
    cam_method: Option<String>,
    /// Classifier model file.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Precomputed heatmap container; overrides --explainer.
    #[arg(long, global = true)]
    heatmaps: Option<PathBuf>,
    /// model | planted-spurious | planted-core [default: model].
    #[arg(long, global = true)]
    explainer: Option<String>,
    /// Segmentation mask root [default: <manifest dir>/masks].
    #[arg(long, global = true)]
    masks: Option<PathBuf>,
    /// Planted heatmap sharpness [default: 2].
    #[arg(long, global = true)]
    sharpness: Option<f64>,
    /// on | off [default: on].
    #[arg(long, global = true)]
    grounding: Option<String>,
    /// discover: domino | facts; mitigate: erm | jtt | groupdro.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Mixture components [default: twice the number of groups].
    #[arg(long, global = true)]
    k_slices: Option<usize>,
    #[arg(long, global = true)]
    gamma_y: Option<f64>,
    #[arg(long, global = true)]
    gamma_yhat: Option<f64>,
    /// Precision@k cut-off [default: 10].
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// Amplified weight decay for facts [default: 100x --weight-decay].
    #[arg(long, global = true)]
    lambda_high: Option<f64>,
    /// train | val | test.
    #[arg(long, global = true)]
    split: Option<String>,
    /// Restrict keyword ranking to one class.
    #[arg(long, global = true)]
    class: Option<String>,
    /// Keywords kept per class [default: 5].
    #[arg(long, global = true)]
    top_n: Option<usize>,
    /// ground-truth | inferred | file [default: ground-truth].
    #[arg(long, global = true)]
    groups: Option<String>,
    /// JSON object mapping sample id to group name, for --groups file.
    #[arg(long, global = true)]
    groups_file: Option<PathBuf>,
    /// keywords.json artifact.
    #[arg(long, global = true)]
    keywords: Option<PathBuf>,
    /// Group step size [default: 0.01].
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// JTT upweight factor [default: 20].
    #[arg(long, global = true)]
    lambda_up: Option<f64>,
    /// Zero-shot prompting: base | group_informed | keyword_augmented.
    #[arg(long, global = true)]
    strategy: Option<String>,
    /// Artifact directories for the report (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    inputs: Option<Vec<PathBuf>>,
    /// Threshold grid (comma separated) [default: 0.5 to 0.9 by 0.05].
    #[arg(long, global = true, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    /// Ablation stages: discover, mitigate [default: both].
    #[arg(long, global = true, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// Training samples (validation and test get half each).
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    classes: Option<usize>,
    #[arg(long, global = true)]
    noise: Option<f64>,
    #[arg(long, global = true)]
    image_size: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
}

fn error_json(command: &str, err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<grounded_audit::Error>())
        .map_or("cli", |e| e.kind());
    let causes: Vec<String> = err.chain().skip(1).map(|e| e.to_string()).collect();
    serde_json::json!({
        "error": {
            "command": command,
            "kind": kind,
            "message": err.to_string(),
            "causes": causes,
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cmd = Cli::command();
    let known: Vec<String> = cmd.get_arguments().map(|a| a.get_id().to_string()).collect();
    let matches = cmd.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let command = cli.command.name();
    let sub = matches.subcommand().map(|(_, m)| m).unwrap_or(&matches);
    let result = Settings::from_matches(sub, &known).and_then(|settings| {
        if let Some(jobs) = settings.get::<usize>("jobs")? {
            rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
        }
        stages::run(command, &settings)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", error_json(command, &e));
            ExitCode::FAILURE
        }
    }
}
