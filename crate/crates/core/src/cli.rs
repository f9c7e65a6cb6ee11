//! Command-line entry point: training runs, checkpoint fusion,
//! hyperparameter sweeps, analysis exports, gradient checks, and
//! standalone pseudo-label filtering.
//!
//! Exit codes partition failure classes: 1 for configuration problems
//! (bad flags, malformed or invalid configs, misaligned checkpoints),
//! 2 for numeric failures (non-finite losses, gradient checks above
//! tolerance), 3 for file-system errors.

use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{
    a_mmd, ammd_csv, dim_sweep_csv, fusion_grid, fusion_sweep_csv, heatmap_csv, heatmap_inputs,
    hidden_dim_grid, lambda_grid, lambda_sweep_csv, prompt_samples_per_layer, run_sweep,
    AnalysisError, MmdConfig, SweepGrid,
};
use crate::checkpoint::{self, Checkpoint, CheckpointError, Stage};
use crate::detector::eval::{pseudo_label, similarity_heatmap};
use crate::detector::Detection;
use crate::gradcheck::run_suite;
use crate::incremental::{run_incremental, IncrementalError, RunConfig};
use crate::params::{fuse, FusionConfig, ParamError};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_IO: i32 = 3;

// ── error classification ─────────────────────────────────────────────

/// A failure bucketed into one of the three exit-code classes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io(_) => EXIT_IO,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

impl From<IncrementalError> for CliError {
    fn from(e: IncrementalError) -> Self {
        match e {
            IncrementalError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            IncrementalError::Tensor(_) => CliError::Numeric(e.to_string()),
            IncrementalError::Io { .. } => CliError::Io(e.to_string()),
            IncrementalError::Checkpoint(c) => c.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ParamError> for CliError {
    fn from(e: ParamError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Incremental(inner) => inner.into(),
            AnalysisError::Tensor(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

// ── argument grammar ─────────────────────────────────────────────────

#[derive(Parser, Debug)]
#[command(
    name = "prompt-evolve",
    version,
    about = "Continual-learning engine: generated prompts, parameter fusion, incremental detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the incremental protocol: train per task, fuse, write checkpoints and metrics.csv
    Train(TrainArgs),
    /// Fuse a current trained checkpoint into the previous fused one
    Fuse(FuseArgs),
    /// Re-run the protocol over a hyperparameter grid and write the study CSV
    Sweep(SweepArgs),
    /// Export prompt-similarity and prompt-diversity CSVs for a config
    Analyze(AnalyzeArgs),
    /// Finite-difference checks for every differentiable op
    Gradcheck(GradcheckArgs),
    /// Filter a detections JSON into pseudo-labels by score threshold
    PseudoLabel(PseudoLabelArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration JSON (model, training, tasks)
    #[arg(long)]
    config: PathBuf,

    /// Override the config's RNG seed
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for checkpoints and metrics.csv
    #[arg(long, default_value = "run")]
    out: PathBuf,

    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,

    /// Override the pseudo-label confidence threshold
    #[arg(long)]
    tau: Option<f64>,

    /// Override the sparse-loss weight
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Previous fused (or first-task trained) checkpoint
    #[arg(long)]
    prev: PathBuf,

    /// Checkpoint trained on the current task
    #[arg(long)]
    current: PathBuf,

    /// Shared initialization checkpoint
    #[arg(long)]
    init: PathBuf,

    /// Fraction of previous-task parameters preserved verbatim
    #[arg(long, default_value_t = 0.7)]
    top_k: f64,

    /// Fraction of current-task parameters preserved verbatim
    #[arg(long, default_value_t = 0.3)]
    top_l: f64,

    /// Output checkpoint path; the branch-count audit lands next to it
    #[arg(long)]
    out: PathBuf,

    /// Overwrite an existing output file
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Base run configuration JSON
    #[arg(long)]
    config: PathBuf,

    /// Grid to sweep: fusion (alias table7), lambda (table8), or hidden-dim (fig3)
    #[arg(long)]
    grid: String,

    /// Override the config's RNG seed
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for the study CSV
    #[arg(long, default_value = "sweep")]
    out: PathBuf,

    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Run configuration JSON; the run is recomputed deterministically
    #[arg(long)]
    config: PathBuf,

    /// Override the config's RNG seed
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for fig1_heatmap.csv and fig6_ammd.csv
    #[arg(long, default_value = "analysis")]
    out: PathBuf,

    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,

    /// Held-out scenes per task feeding the similarity and diversity estimates
    #[arg(long, default_value_t = 8)]
    max_scenes: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// RNG seed for the random check points
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Random points per op
    #[arg(long, default_value_t = 20)]
    points: usize,
}

#[derive(Args, Debug)]
struct PseudoLabelArgs {
    /// Detections JSON: an array of {class_id, score, bbox}
    input: PathBuf,

    /// Confidence threshold; only detections with score strictly above survive
    #[arg(long, default_value_t = 0.65)]
    tau: f64,

    /// Output JSON path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Overwrite an existing output file
    #[arg(long)]
    force: bool,
}

// ── shared plumbing ──────────────────────────────────────────────────

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Parse a run config; serde_json errors carry line and column.
fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = read_file(path)?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed {
        cfg.training.seed = seed;
    }
    Ok(cfg)
}

/// Create the output directory, refusing to write into a non-empty one
/// unless forced.
fn prepare_out_dir(path: &Path, force: bool) -> Result<(), CliError> {
    if path.is_dir() && !force {
        let occupied = path
            .read_dir()
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?
            .next()
            .is_some();
        if occupied {
            return Err(CliError::Config(format!(
                "{}: output directory is not empty (pass --force to reuse it)",
                path.display()
            )));
        }
    }
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn refuse_existing_file(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config(format!(
            "{}: output exists (pass --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    checkpoint::write_atomic(path, text.as_bytes())
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Cap the rayon pool from PROMPT_EVOLVE_THREADS. Building the global
/// pool can only happen once per process; later calls are no-ops.
fn apply_thread_cap() {
    if let Ok(raw) = std::env::var("PROMPT_EVOLVE_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

// ── subcommands ──────────────────────────────────────────────────────

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config, args.seed)?;
    if let Some(tau) = args.tau {
        cfg.training.tau_pseudo = tau;
    }
    if let Some(lambda) = args.lambda {
        cfg.training.lambda_sparse = lambda;
    }
    prepare_out_dir(&args.out, args.force)?;

    let manifest = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write_text(&args.out.join("config.json"), &manifest)?;

    let report = run_incremental(&cfg, Some(&args.out))?;
    for row in &report.metrics {
        println!(
            "task {} {} {} ap50 {:.4}",
            row.task, row.stage, row.class_group, row.ap50
        );
    }
    println!("frozen backbone {}", report.frozen_hash);
    println!("wrote {}", args.out.join("metrics.csv").display());
    Ok(())
}

fn cmd_fuse(args: &FuseArgs) -> Result<(), CliError> {
    let prev = checkpoint::load(&args.prev)?;
    let current = checkpoint::load(&args.current)?;
    let init = checkpoint::load(&args.init)?;
    let cfg = FusionConfig {
        top_k: args.top_k,
        top_l: args.top_l,
    };
    let (fused, audit) = fuse(&current.params, &prev.params, &init.params, &cfg)?;

    refuse_existing_file(&args.out, args.force)?;
    checkpoint::save(
        &args.out,
        &Checkpoint {
            task_id: current.task_id,
            stage: Stage::Fused,
            params: fused,
        },
    )?;

    let stem = args
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "fused".to_string());
    let audit_path = args.out.with_file_name(format!("{stem}_audit.json"));
    let audit_json = serde_json::to_string_pretty(&audit).expect("audit serializes");
    write_text(&audit_path, &audit_json)?;

    println!(
        "preserved_prev {} preserved_curr {} averaged {} fallback {}",
        audit.preserved_prev, audit.preserved_curr, audit.averaged, audit.fallback
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn parse_grid(name: &str) -> Result<(SweepGrid, &'static str), CliError> {
    match name {
        "fusion" | "table7" => Ok((fusion_grid(), "table7_fusion.csv")),
        "lambda" | "table8" => Ok((lambda_grid(), "table8_lambda.csv")),
        "hidden-dim" | "fig3" => Ok((hidden_dim_grid(), "fig3_dim_sweep.csv")),
        other => Err(CliError::Config(format!(
            "unknown sweep grid {other:?} (expected fusion, lambda, or hidden-dim)"
        ))),
    }
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.seed)?;
    let (grid, filename) = parse_grid(&args.grid)?;
    prepare_out_dir(&args.out, args.force)?;

    let rows = run_sweep(&cfg, &grid)?;
    let csv = match grid {
        SweepGrid::Fusion(_) => fusion_sweep_csv(&rows),
        SweepGrid::LambdaSparse(_) => lambda_sweep_csv(&rows),
        SweepGrid::HiddenDim(_) => dim_sweep_csv(&rows),
    };
    let path = args.out.join(filename);
    write_text(&path, &csv)?;
    println!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.seed)?;
    prepare_out_dir(&args.out, args.force)?;

    let report = run_incremental(&cfg, None)?;
    let (queries, prompts) = heatmap_inputs(&report, args.max_scenes)?;
    let heat = similarity_heatmap(&queries, &prompts);
    let heat_path = args.out.join("fig1_heatmap.csv");
    write_text(&heat_path, &heatmap_csv(&heat))?;

    let samples = prompt_samples_per_layer(&report, args.max_scenes)?;
    let mmd_cfg = MmdConfig::default();
    let per_layer = samples
        .iter()
        .map(|layer| a_mmd(layer, &mmd_cfg))
        .collect::<Result<Vec<f64>, AnalysisError>>()?;
    let ammd_path = args.out.join("fig6_ammd.csv");
    write_text(&ammd_path, &ammd_csv(&per_layer))?;

    for (layer, v) in per_layer.iter().enumerate() {
        println!("layer {layer} ammd {v:.6}");
    }
    println!("wrote {}", heat_path.display());
    println!("wrote {}", ammd_path.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let results = run_suite(args.seed, args.points);
    let mut failing = Vec::new();
    for r in &results {
        match &r.outcome {
            Ok(worst) => println!(
                "{:<20} max rel err {:.3e} (tol {:.0e}, {} points)",
                r.name, worst, r.tol, r.points
            ),
            Err(e) => {
                println!("{:<20} FAILED: {e}", r.name);
                failing.push(r.name);
            }
        }
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient checks failed: {}",
            failing.join(", ")
        )))
    }
}

fn cmd_pseudo_label(args: &PseudoLabelArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.tau) {
        return Err(CliError::Config(format!(
            "tau must lie in [0, 1], got {}",
            args.tau
        )));
    }
    let text = read_file(&args.input)?;
    let detections: Vec<Detection> = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.input.display())))?;
    let labels = pseudo_label(&detections, args.tau);
    let json = serde_json::to_string_pretty(&labels).expect("labels serialize");
    match &args.out {
        Some(path) => {
            refuse_existing_file(path, args.force)?;
            write_text(path, &json)?;
            println!(
                "kept {} of {} detections -> {}",
                labels.len(),
                detections.len(),
                path.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

// ── entry point ──────────────────────────────────────────────────────

/// Parse arguments, dispatch, and map failures to exit codes. Returned
/// instead of calling process::exit so tests can drive it in-process.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here as non-error renders
            if e.use_stderr() {
                eprint!("{e}");
                return EXIT_CONFIG;
            }
            print!("{e}");
            return 0;
        }
    };
    apply_thread_cap();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::PseudoLabel(a) => cmd_pseudo_label(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_distinct_exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 1);
        assert_eq!(CliError::Numeric(String::new()).exit_code(), 2);
        assert_eq!(CliError::Io(String::new()).exit_code(), 3);
    }

    #[test]
    fn incremental_errors_partition_by_class() {
        let non_finite = IncrementalError::NonFiniteLoss { step: 3, task_id: 1 };
        assert_eq!(CliError::from(non_finite).exit_code(), EXIT_NUMERIC);

        let config = IncrementalError::Config {
            reason: "bad".into(),
        };
        assert_eq!(CliError::from(config).exit_code(), EXIT_CONFIG);

        let io = IncrementalError::Io {
            path: "x".into(),
            source: std::io::Error::new(std::io::ErrorKind::Other, "disk"),
        };
        assert_eq!(CliError::from(io).exit_code(), EXIT_IO);
    }

    #[test]
    fn grid_names_and_aliases_resolve() {
        for (name, file) in [
            ("fusion", "table7_fusion.csv"),
            ("table7", "table7_fusion.csv"),
            ("lambda", "table8_lambda.csv"),
            ("table8", "table8_lambda.csv"),
            ("hidden-dim", "fig3_dim_sweep.csv"),
            ("fig3", "fig3_dim_sweep.csv"),
        ] {
            let (_, f) = parse_grid(name).unwrap();
            assert_eq!(f, file);
        }
        assert!(parse_grid("bogus").is_err());
    }

    #[test]
    fn missing_config_message_names_the_path() {
        let err = load_config(Path::new("/no/such/config.json"), None).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_IO);
        assert!(err.message().contains("/no/such/config.json"));
    }

    #[test]
    fn malformed_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        fs::write(&path, "{ not json").unwrap();
        let err = load_config(&path, None).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn occupied_out_dir_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("present.txt"), "x").unwrap();
        let err = prepare_out_dir(dir.path(), false).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        prepare_out_dir(dir.path(), true).unwrap();
    }
}
