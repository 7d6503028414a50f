//! Command-line surface: dataset generation, training, evaluation, baseline
//! reports, sequence export, and the gradient self-check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use slidelab::baselines::{train_simnet, SimNet, SimNetConfig, POLYFIT_FRAMES};
use slidelab::datagen::{generate_dataset, Dataset, RecordingProtocol, ScenarioConfig, Split};
use slidelab::eval::{evaluate_model, evaluate_polyfit, evaluate_simnet, MetricsReport};
use slidelab::gradcheck;
use slidelab::models::{self, HeatmapDecode, Model, ModelConfig, OutputKind, TrainConfig, Variant, T0};
use slidelab::physics::Scenario;
use slidelab::render::{write_pgm, write_ppm, CameraModel};

#[derive(Parser)]
#[command(
    name = "slidelab",
    version,
    about = "Simulate sliding-block videos, train recurrent predictors, evaluate them"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset of rendered sliding-block sequences.
    Gen(GenArgs),
    /// Train a predictor and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split and write a report.
    Eval(EvalArgs),
    /// Evaluate a polynomial extrapolation baseline on the test split.
    Baseline(BaselineArgs),
    /// Export one stored sequence as PPM frames, optionally with predicted
    /// heatmaps as PGM.
    Export(ExportArgs),
    /// Check all gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    S0,
    S1,
    S2,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Scenario {
        match s {
            ScenarioArg::S0 => Scenario::S0,
            ScenarioArg::S1 => Scenario::S1,
            ScenarioArg::S2 => Scenario::S2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Mn1,
    Mn2,
    Mn3,
    Mn4,
    Simnet,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Linear,
    Quadratic,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    image_size: u32,
    #[arg(long, default_value_t = 240)]
    frames_max: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long)]
    t_train: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    epochs_max: usize,
    #[arg(long, default_value_t = 40)]
    patience: usize,
    #[arg(long, default_value_t = 50)]
    batch: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated prediction horizons, e.g. 20,40.
    #[arg(long)]
    horizons: String,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    report: PathBuf,
    /// Comma-separated prediction horizons.
    #[arg(long, default_value = "20,40")]
    horizons: String,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    /// Record index within the dataset.
    #[arg(long)]
    index: usize,
    /// Output directory for P6 PPM frames (and P5 PGM heatmaps).
    #[arg(long)]
    ppm: PathBuf,
    /// Heatmap checkpoint whose predictions to export alongside the frames.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Prediction horizon for exported heatmaps.
    #[arg(long, default_value_t = 20)]
    horizon: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => run_gen(args),
        Cmd::Train(args) => run_train(args),
        Cmd::Eval(args) => run_eval(args),
        Cmd::Baseline(args) => run_baseline(args),
        Cmd::Export(args) => run_export(args),
        Cmd::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// The single dataset manifest inside `dir`.
fn find_manifest(dir: &Path) -> Result<PathBuf> {
    let mut found = Vec::new();
    for entry in
        std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?
    {
        let path = entry?.path();
        if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".manifest.json"))
        {
            found.push(path);
        }
    }
    match found.len() {
        0 => bail!("no .manifest.json in {}", dir.display()),
        1 => Ok(found.pop().unwrap()),
        _ => {
            found.sort();
            bail!(
                "{} holds {} datasets ({}); point --data at a directory with one",
                dir.display(),
                found.len(),
                found.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
            )
        }
    }
}

fn parse_horizons(text: &str) -> Result<Vec<usize>> {
    let horizons: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad horizon {s:?}")))
        .collect::<Result<_>>()?;
    if horizons.is_empty() || horizons.iter().any(|&h| h == 0) {
        bail!("horizons must be positive, got {text:?}");
    }
    let max = *horizons.iter().max().unwrap();
    if max < T0 {
        bail!("largest horizon {max} is shorter than the {T0} observed frames");
    }
    Ok(horizons)
}

fn run_gen(args: GenArgs) -> Result<()> {
    let cam = CameraModel::with_size(args.image_size);
    let mut protocol = RecordingProtocol::for_camera(&cam);
    protocol.frames_max = args.frames_max;
    let cfg = ScenarioConfig::new(args.scenario.into(), args.count, args.seed);
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = generate_dataset(&cfg, &cam, &protocol, &args.out)?;
    let kept: usize = manifest.records.iter().map(|r| r.n_frames as usize).sum();
    println!(
        "wrote {} sequences ({} frames) to {}",
        manifest.records.len(),
        kept,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let manifest = find_manifest(&args.data)?;
    let dataset = Dataset::load(&manifest, Some(T0))?;
    let size = dataset.manifest.camera.width as usize;
    let mut tcfg = TrainConfig::new(args.t_train, args.seed);
    tcfg.max_epochs = args.epochs_max;
    tcfg.patience = args.patience;
    tcfg.batch_size = args.batch;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    let log = args.out.with_extension("train.csv");

    match args.model {
        ModelArg::Simnet => {
            let cfg = SimNetConfig::new(size);
            let (net, summary) = train_simnet(&cfg, &tcfg, &dataset, Some(&log))?;
            net.save(&args.out, &tcfg, &summary)?;
            println!(
                "simnet: {} epochs, best val loss {:.6} at epoch {}, wrote {}",
                summary.epochs_run,
                summary.best_val_metric,
                summary.best_epoch,
                args.out.display()
            );
        }
        m => {
            let variant = match m {
                ModelArg::Mn1 => Variant::Mn1,
                ModelArg::Mn2 => Variant::Mn2,
                ModelArg::Mn3 => Variant::Mn3,
                ModelArg::Mn4 => Variant::Mn4,
                ModelArg::Simnet => unreachable!(),
            };
            let cfg = ModelConfig::new(variant, size);
            let outcome = models::train(&cfg, &tcfg, &dataset, Some(&log))?;
            outcome.model.save(&args.out, &tcfg, &outcome.summary)?;
            println!(
                "{variant}: {} epochs, best val loss {:.6} at epoch {}, wrote {}",
                outcome.summary.epochs_run,
                outcome.summary.best_val_metric,
                outcome.summary.best_epoch,
                args.out.display()
            );
        }
    }
    Ok(())
}

/// Decode policy recorded at training time, if any.
fn stored_decode(header: &serde_json::Value) -> HeatmapDecode {
    header
        .get("train")
        .and_then(|t| t.get("decode"))
        .and_then(|d| serde_json::from_value(d.clone()).ok())
        .unwrap_or_default()
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let manifest = find_manifest(&args.data)?;
    let horizons = parse_horizons(&args.horizons)?;
    let (header, _) = slidelab::tensor::load_checkpoint(&args.ckpt)?;
    let kind = header.get("kind").and_then(|k| k.as_str()).unwrap_or("?").to_string();
    let echo = serde_json::json!({
        "data": args.data.display().to_string(),
        "ckpt": args.ckpt.display().to_string(),
        "horizons": horizons,
        "split": "test",
        "checkpoint": header,
    });
    let report = match kind.as_str() {
        "predictor" => {
            let (model, header) = Model::load(&args.ckpt)?;
            let dataset = Dataset::load(&manifest, Some(T0))?;
            evaluate_model(&model, &dataset, Split::Test, &horizons, stored_decode(&header), echo)?
        }
        "simnet" => {
            let (net, _) = SimNet::load(&args.ckpt)?;
            let dataset = Dataset::load(&manifest, Some(T0))?;
            evaluate_simnet(&net, &dataset, Split::Test, &horizons, echo)?
        }
        other => bail!("{} is not a known checkpoint kind ({other})", args.ckpt.display()),
    };
    report.write(&args.report)?;
    print_headline(&report);
    Ok(())
}

fn run_baseline(args: BaselineArgs) -> Result<()> {
    let manifest = find_manifest(&args.data)?;
    let horizons = parse_horizons(&args.horizons)?;
    let degree = match args.method {
        MethodArg::Linear => 1,
        MethodArg::Quadratic => 2,
    };
    let dataset = Dataset::load(&manifest, Some(POLYFIT_FRAMES))?;
    let echo = serde_json::json!({
        "data": args.data.display().to_string(),
        "horizons": horizons,
        "split": "test",
    });
    let report = evaluate_polyfit(degree, &dataset, Split::Test, &horizons, echo)?;
    report.write(&args.report)?;
    print_headline(&report);
    Ok(())
}

fn print_headline(report: &MetricsReport) {
    for h in &report.horizons {
        let lp = match h.ln_perplexity {
            Some(x) if x.is_finite() => format!(", ln perplexity {x:.4}"),
            Some(_) => ", ln perplexity inf".to_string(),
            None => String::new(),
        };
        println!(
            "{} @ {}: mean L2 {:.4} px (p25 {:.4}, p75 {:.4}{}) over {} sequences",
            report.predictor, h.horizon, h.mean_l2, h.p25_l2, h.p75_l2, lp, h.sequences
        );
    }
}

fn run_export(args: ExportArgs) -> Result<()> {
    let manifest = find_manifest(&args.data)?;
    let dataset = Dataset::load(&manifest, None)?;
    let Some(rec) = dataset.records.get(args.index) else {
        bail!("index {} out of range ({} records)", args.index, dataset.records.len());
    };
    std::fs::create_dir_all(&args.ppm)
        .with_context(|| format!("creating {}", args.ppm.display()))?;
    for (k, frame) in rec.frames.iter().enumerate() {
        let path = args.ppm.join(format!("frame_{k:03}.ppm"));
        write_ppm(frame, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} frames to {}", rec.frames.len(), args.ppm.display());

    if let Some(ckpt) = &args.ckpt {
        let (model, _) = Model::load(ckpt)?;
        if model.cfg.variant.output_kind() != OutputKind::Heatmap {
            bail!("{} is not a heatmap model", ckpt.display());
        }
        let preds = model.forward_predict(&rec.frames, args.horizon)?;
        let mut written = 0;
        for (k, pred) in preds.iter().enumerate() {
            if let models::Prediction::Heatmap { probs, side } = pred {
                let values: Vec<f32> = probs.iter().map(|&p| p as f32).collect();
                let path = args.ppm.join(format!("heatmap_{k:03}.pgm"));
                write_pgm(&values, *side as u32, *side as u32, &path)
                    .with_context(|| format!("writing {}", path.display()))?;
                written += 1;
            }
        }
        println!("wrote {written} heatmaps to {}", args.ppm.display());
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports = gradcheck::full_suite(args.tol);
    let mut failures = 0;
    for r in &reports {
        let status = if r.pass() { "ok" } else { "FAIL" };
        println!("{:28} max rel err {:.3e} over {:3} probes  {status}", r.name, r.max_rel_err, r.checked);
        if !r.pass() {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} of {} gradient checks exceeded tol {:.1e}", reports.len(), args.tol);
    }
    println!("all {} gradient checks within {:.1e}", reports.len(), args.tol);
    Ok(())
}
