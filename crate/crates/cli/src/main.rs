use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kinebench::body::{load_body_model, toy_model, toy_subset, VertexSubset};
use kinebench::formats::{parse_mot, write_atomic};
use kinebench::metrics::{joint_angle_rmse, leaderboard_aggregate, pck_from_coco, RmseReport, DEFAULT_PCK_THRESHOLDS};
use kinebench::pipeline::{run_many, PipelineConfig, PipelineContext, PipelineError, TrialBundle};
use kinebench::skeletal::SkeletalModel;
use kinebench::synth::{
    annotate_manifest, balanced_batch_schedule, write_coco_annotations, DatasetManifest, KeypointSchema,
    DEFAULT_BBOX_MARGIN,
};

#[derive(Parser)]
#[command(name = "kinebench", version, about = "Markerless motion-capture benchmarking toolkit")]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project body-model vertex subsets into COCO keypoint annotations.
    Annotate(AnnotateArgs),
    /// Run keypoints -> triangulation -> scaling -> IK -> RMSE on trial bundles.
    Pipeline(PipelineArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Rank models from per-trial RMSE reports.
    Leaderboard(LeaderboardArgs),
    /// Emit a balanced multi-dataset batch schedule as CSV.
    Schedule(ScheduleArgs),
}

#[derive(clap::Args)]
struct AnnotateArgs {
    /// Frames to label: cameras plus per-frame body parameters.
    #[arg(long)]
    manifest: PathBuf,
    /// Body-model archive; the bundled toy model when omitted.
    #[arg(long)]
    body_model: Option<PathBuf>,
    /// Vertex-subset file; the toy subset when omitted.
    #[arg(long)]
    subset: Option<PathBuf>,
    /// Prefix the 17 COCO keypoints (as unlabeled) ahead of the subset.
    #[arg(long)]
    coco: bool,
    #[arg(long, default_value_t = DEFAULT_BBOX_MARGIN)]
    margin: f64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PipelineArgs {
    /// Trial bundle JSON files.
    #[arg(required = true)]
    bundles: Vec<PathBuf>,
    /// JSON configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cutoff_hz: Option<f64>,
    #[arg(long)]
    filter_order: Option<usize>,
    #[arg(long)]
    max_gap: Option<usize>,
    #[arg(long)]
    confidence_threshold: Option<f64>,
    #[arg(long)]
    keypoint_schema: Option<PathBuf>,
    #[arg(long)]
    skeletal_model: Option<PathBuf>,
    #[arg(long)]
    static_window_s: Option<f64>,
    #[arg(long)]
    allow_extreme_scales: bool,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    /// Joint-angle RMSE between two MOT files.
    Rmse,
    /// PCK between two COCO keypoint files.
    Pck,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long, value_enum, default_value = "rmse")]
    kind: EvalKind,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Trial label for RMSE rows; the prediction's file stem by default.
    #[arg(long)]
    trial: Option<String>,
    /// Restrict RMSE to these coordinates (comma separated).
    #[arg(long, value_delimiter = ',')]
    coordinates: Option<Vec<String>>,
    /// PCK thresholds as fractions of the bbox size.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Skeletal model used to tell rotational from translational MOT columns.
    #[arg(long)]
    skeletal_model: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Md,
    Csv,
}

#[derive(clap::Args)]
struct LeaderboardArgs {
    /// `model=report.csv` pairs, or bare report paths named by file stem.
    #[arg(required = true)]
    reports: Vec<String>,
    /// Keep left and right coordinates as separate columns.
    #[arg(long)]
    no_lr_average: bool,
    #[arg(long, value_enum, default_value = "md")]
    format: TableFormat,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ScheduleArgs {
    /// Dataset sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long)]
    batch_size: usize,
    #[arg(long)]
    num_batches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Message plus process exit code (2 validation, 3 runtime).
struct Failure {
    code: u8,
    message: String,
}

fn invalid(e: impl Display) -> Failure {
    Failure { code: 2, message: e.to_string() }
}

fn runtime(e: impl Display) -> Failure {
    Failure { code: 3, message: e.to_string() }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

type CliResult = Result<(), Failure>;

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
            }
            write_atomic(p, text.as_bytes()).map_err(|e| runtime(format!("{}: {e}", p.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn annotate(a: AnnotateArgs) -> CliResult {
    let model = match &a.body_model {
        Some(p) => load_body_model(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => toy_model(),
    };
    let subset = match &a.subset {
        Some(p) => VertexSubset::load(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => toy_subset(),
    };
    let (schema, lead) = if a.coco {
        (KeypointSchema::coco_with_subset(&subset).map_err(invalid)?, 17)
    } else {
        (KeypointSchema::from_subset(&subset), 0)
    };
    let manifest = DatasetManifest::load(&a.manifest).map_err(invalid)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let cameras = manifest.load_cameras(base).map_err(invalid)?;
    let set = annotate_manifest(&model, &subset, &manifest, &cameras, a.margin, lead).map_err(invalid)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    write_coco_annotations(&set.records, &schema, &set.images, &a.out).map_err(runtime)?;
    log::info!("{} annotations written, {} frames skipped", set.records.len(), set.skipped.len());
    Ok(())
}

fn pipeline(a: PipelineArgs) -> CliResult {
    let mut config = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field.clone() { config.$field = v; })* };
    }
    set!(cutoff_hz, filter_order, max_gap, confidence_threshold, static_window_s, max_iterations, output_dir, workers);
    if let Some(p) = &a.keypoint_schema {
        config.keypoint_schema = Some(p.clone());
    }
    if let Some(p) = &a.skeletal_model {
        config.skeletal_model = Some(p.clone());
    }
    config.allow_extreme_scales |= a.allow_extreme_scales;
    config.plots &= !a.no_plots;

    let ctx = PipelineContext::new(config)?;
    let bundles = a.bundles.iter().map(TrialBundle::load).collect::<Result<Vec<_>, _>>()?;
    for b in &bundles {
        b.validate()?;
    }
    let batch = run_many(&bundles, &ctx)?;

    let mut worst: Option<Failure> = None;
    for r in batch.trials {
        match r {
            Ok(t) => {
                if !t.not_converged.is_empty() {
                    log::warn!("{}: {} frames did not converge", t.trial, t.not_converged.len());
                }
                match &t.rmse {
                    Some(r) => println!("{}\tmean RMSE {:.3} deg", t.trial, r.overall_mean()),
                    None => println!("{}\tdone", t.trial),
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                let f = Failure::from(e);
                if worst.as_ref().is_none_or(|w| f.code > w.code) {
                    worst = Some(f);
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())));
    let text = match a.kind {
        EvalKind::Rmse => {
            let model = match &a.skeletal_model {
                Some(p) => SkeletalModel::load(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
                None => SkeletalModel::default_benchmark(),
            };
            let pred = parse_mot(&a.pred, Some(&model)).map_err(invalid)?;
            let gt = parse_mot(&a.gt, Some(&model)).map_err(invalid)?;
            let trial = a
                .trial
                .unwrap_or_else(|| a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            joint_angle_rmse(&trial, &pred, &gt, a.coordinates.as_deref()).map_err(invalid)?.to_csv()
        }
        EvalKind::Pck => {
            let thresholds = a.thresholds.unwrap_or_else(|| DEFAULT_PCK_THRESHOLDS.to_vec());
            pck_from_coco(&read(&a.pred)?, &read(&a.gt)?, &thresholds).map_err(invalid)?.to_csv()
        }
    };
    emit(a.out.as_deref(), &text)
}

fn leaderboard(a: LeaderboardArgs) -> CliResult {
    let mut reports = Vec::new();
    for spec in &a.reports {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), p)
            }
        };
        let text = std::fs::read_to_string(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let report = RmseReport::from_csv(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        reports.push((name, report));
    }
    let board = leaderboard_aggregate(&reports, !a.no_lr_average).map_err(invalid)?;
    let text = match a.format {
        TableFormat::Md => board.to_markdown(),
        TableFormat::Csv => board.to_csv(),
    };
    emit(a.out.as_deref(), &text)
}

fn schedule(a: ScheduleArgs) -> CliResult {
    let s = balanced_batch_schedule(&a.sizes, a.batch_size, a.seed, a.num_batches).map_err(invalid)?;
    emit(a.out.as_deref(), &s.to_csv())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Annotate(a) => annotate(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Leaderboard(a) => leaderboard(a),
        Command::Schedule(a) => schedule(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
