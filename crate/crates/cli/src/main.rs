//! `latentood`: fit, score, evaluate, sweep and gate from the command line.
//!
//! Exit codes: 0 success or gate accept, 1 usage error, 2 data or model
//! error, 3 gate reject.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use latentood::detector::{evaluate_pair, load_detector, OodDetector};
use latentood::diffusion::{train_observer, DiffusionObserver, TrainConfig};
use latentood::gatekeeper::{calibrate_threshold, gate_sequence, Decision, DetectorKind, GateConfig};
use latentood::latent_io::{load_latents, parse_mask, read_header, TokenSequence};
use latentood::mahalanobis::{fit_global, fit_global_standardized};
use latentood::metrics::{BootstrapConfig, PairReport};
use latentood::mlp::{Activation, MlpConfig};
use latentood::sweep::{run_sweep, select_sigma, KdeRefit, SweepConfig, SweepGrid, SweepPair};
use latentood::typicality::{self, TypicalityConfig, TypicalityScorer};
use latentood::LatentDataset;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_REJECT: u8 = 3;

#[derive(Parser)]
#[command(name = "latentood", version, about = "Label-free OOD detection on frozen latents")]
struct Cli {
    /// Worker threads for batch scoring and sweeps (default: logical CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a detector on unlabeled ID training latents.
    Fit(FitArgs),
    /// Score every row of a latent file.
    Score(ScoreArgs),
    /// Evaluate a detector on an ID test / OOD test pair.
    Eval(EvalArgs),
    /// AUROC across a grid of observation noise levels.
    Sweep(SweepArgs),
    /// Gate a per-token sequence prefix by prefix.
    Gate(GateArgs),
    /// Print a latent file's header without reading the payload.
    Info(InfoArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Maha,
    Rescoped,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ActivationArg {
    Silu,
    Identity,
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[arg(value_enum)]
    kind: Kind,
    /// ID training latents (LTNT or CSV).
    #[arg(long)]
    train: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Covariance ridge.
    #[arg(long, default_value_t = 1e-4)]
    ridge: f64,
    /// Standardize each dimension before the Mahalanobis fit.
    #[arg(long)]
    standardize: bool,
    /// Observer file for rescoped (default: the model path with extension .edmo).
    #[arg(long)]
    observer_out: Option<PathBuf>,
    #[arg(long, default_value_t = 150_000)]
    steps: u64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = MlpConfig::DEFAULT_WIDTH)]
    width: usize,
    #[arg(long, default_value_t = MlpConfig::DEFAULT_DEPTH)]
    depth: usize,
    #[arg(long, default_value_t = MlpConfig::DEFAULT_TIME_DIM)]
    time_dim: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Silu)]
    activation: ActivationArg,
    /// Periodically overwrite this file with the current observer.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    typicality: TypicalityArgs,
    #[arg(long, env = "LATENTOOD_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct TypicalityArgs {
    /// Observation noise level.
    #[arg(long, default_value_t = typicality::DEFAULT_SIGMA)]
    sigma: f64,
    /// Hutchinson probes per point.
    #[arg(long, default_value_t = typicality::DEFAULT_PROBES)]
    probes: usize,
    #[arg(long, default_value_t = typicality::DEFAULT_EPSILON)]
    epsilon: f64,
    /// KDE bandwidth.
    #[arg(long, default_value_t = typicality::DEFAULT_BANDWIDTH)]
    bandwidth: f64,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    id: PathBuf,
    #[arg(long)]
    ood: PathBuf,
    /// Pairing name for the report (default: "<id tag or stem>/<ood tag or stem>").
    #[arg(long)]
    pair: Option<String>,
    /// Include the raw ID and OOD score arrays.
    #[arg(long)]
    raw_scores: bool,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    /// Trained observer (.edmo).
    #[arg(long)]
    observer: PathBuf,
    /// ID training latents for the KDE.
    #[arg(long)]
    train: PathBuf,
    /// Pairing as NAME=ID_PATH,OOD_PATH; repeatable.
    #[arg(long = "pair", required = true, value_parser = parse_pair)]
    pairs: Vec<(String, PathBuf, PathBuf)>,
    /// Explicit comma-separated sigma grid; overrides the log-spaced grid.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.01)]
    grid_min: f64,
    #[arg(long, default_value_t = 10.0)]
    grid_max: f64,
    #[arg(long, default_value_t = 11)]
    grid_points: usize,
    #[arg(long, value_enum, default_value_t = RefitArg::PerSigma)]
    kde_refit: RefitArg,
    #[command(flatten)]
    typicality: TypicalityArgs,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    #[arg(long, default_value_t = 2000)]
    resamples: usize,
    /// Also write the curves as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, env = "LATENTOOD_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RefitArg {
    PerSigma,
    Fixed,
}

#[derive(Args, Serialize)]
#[command(group = clap::ArgGroup::new("calib").required(true).args(["calibration", "threshold"]))]
struct GateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Per-token hidden states of one sequence.
    #[arg(long)]
    sequence: PathBuf,
    /// 0/1 mask, one value per token (default: "<sequence>.mask" if present).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// ID latents whose scores set the threshold (the training latents by default protocol).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Use this threshold instead of calibrating.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 99.0)]
    percentile: f64,
    #[arg(long, default_value_t = 3)]
    min_prefix: usize,
}

#[derive(Args)]
struct InfoArgs {
    path: PathBuf,
}

fn parse_pair(s: &str) -> Result<(String, PathBuf, PathBuf), String> {
    let (name, paths) = s.split_once('=').ok_or("expected NAME=ID_PATH,OOD_PATH")?;
    let (id, ood) = paths.split_once(',').ok_or("expected NAME=ID_PATH,OOD_PATH")?;
    if name.is_empty() || id.is_empty() || ood.is_empty() {
        return Err("expected NAME=ID_PATH,OOD_PATH".into());
    }
    Ok((name.to_string(), id.into(), ood.into()))
}

fn read(path: &Path) -> Result<LatentDataset> {
    load_latents(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<Box<dyn OodDetector>> {
    load_detector(path).with_context(|| format!("loading model {}", path.display()))
}

fn label(ds: &LatentDataset, path: &Path) -> String {
    if ds.tag.is_empty() {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        ds.tag.clone()
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn typicality_config(t: &TypicalityArgs, seed: u64) -> TypicalityConfig {
    TypicalityConfig {
        sigma: t.sigma,
        probes: t.probes,
        epsilon: t.epsilon,
        seed,
    }
}

/// Path stored in the scorer file: bare name when both files share a
/// directory, absolute otherwise.
fn observer_reference(model: &Path, observer: &Path) -> Result<String> {
    let parent = |p: &Path| p.parent().map(Path::to_path_buf).unwrap_or_default();
    if parent(model) == parent(observer) {
        if let Some(name) = observer.file_name() {
            return Ok(name.to_string_lossy().into_owned());
        }
    }
    let abs = fs::canonicalize(observer).with_context(|| format!("resolving {}", observer.display()))?;
    Ok(abs.to_string_lossy().into_owned())
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let train = read(&a.train)?;
    match a.kind {
        Kind::Maha => {
            let model = if a.standardize {
                fit_global_standardized(&train, a.ridge)
            } else {
                fit_global(&train, a.ridge)
            }
            .with_context(|| format!("fitting on {}", a.train.display()))?;
            model.save(&a.out)?;
            println!(
                "mahalanobis: N={} dim={} lambda={:e} (requested {:e}, {} escalations) -> {}",
                model.fit_count(),
                model.dim(),
                model.ridge(),
                model.requested_ridge(),
                model.escalations(),
                a.out.display()
            );
        }
        Kind::Rescoped => {
            let arch = MlpConfig {
                dim: train.dim(),
                width: a.width,
                depth: a.depth,
                time_dim: a.time_dim,
                activation: match a.activation {
                    ActivationArg::Silu => Activation::Silu,
                    ActivationArg::Identity => Activation::Identity,
                },
            };
            let cfg = TrainConfig {
                steps: a.steps,
                batch: a.batch,
                lr: a.lr,
                seed: a.seed,
                checkpoint: a.checkpoint.clone(),
                ..TrainConfig::default()
            };
            let mut observer = if a.steps == 0 {
                DiffusionObserver::initialize(&train, arch, &cfg)?
            } else {
                train_observer(&train, arch, &cfg)
                    .with_context(|| format!("training on {}", a.train.display()))?
                    .0
            };
            // The KDE must describe the observer as it will be reloaded.
            observer.round_to_storage_precision();
            let obs_path = a.observer_out.clone().unwrap_or_else(|| a.out.with_extension("edmo"));
            observer.save(&obs_path)?;
            let loss = observer.final_loss();
            let scorer = TypicalityScorer::fit(
                Arc::new(observer),
                &train,
                typicality_config(&a.typicality, a.seed),
                a.typicality.bandwidth,
            )?;
            scorer.save(&a.out, &observer_reference(&a.out, &obs_path)?)?;
            println!(
                "rescoped: N={} dim={} steps={} final_loss={} sigma={} probes={} -> {} (observer {})",
                train.count(),
                train.dim(),
                a.steps,
                loss,
                a.typicality.sigma,
                a.typicality.probes,
                a.out.display(),
                obs_path.display()
            );
        }
    }
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = read(&a.input)?;
    let scores = model
        .score_batch(&ds)
        .with_context(|| format!("scoring {}", a.input.display()))?;
    print_json(&json!({
        "detector": model.name(),
        "count": scores.len(),
        "scores": scores,
    }))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let id = read(&a.id)?;
    let ood = read(&a.ood)?;
    let pair_name = a
        .pair
        .clone()
        .unwrap_or_else(|| format!("{}/{}", label(&id, &a.id), label(&ood, &a.ood)));
    let (metrics, scored) = evaluate_pair(model.as_ref(), &id, &ood)
        .with_context(|| format!("evaluating {} against {}", a.id.display(), a.ood.display()))?;
    let report = PairReport::new(pair_name, model.name(), metrics);
    let mut value = serde_json::to_value(&report)?;
    value["config"] = serde_json::to_value(a)?;
    if a.raw_scores {
        value["id_scores"] = json!(scored.id_scores);
        value["ood_scores"] = json!(scored.ood_scores);
    }
    print_json(&value)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let observer = DiffusionObserver::load(&a.observer)
        .with_context(|| format!("loading observer {}", a.observer.display()))?;
    let train = read(&a.train)?;
    let pairs = a
        .pairs
        .iter()
        .map(|(name, id, ood)| {
            Ok(SweepPair {
                name: name.clone(),
                id: read(id)?,
                ood: read(ood)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = match &a.grid {
        Some(sigmas) => SweepGrid::new(sigmas.clone())?,
        None => SweepGrid::log_spaced(a.grid_min, a.grid_max, a.grid_points)?,
    };
    let cfg = SweepConfig {
        grid,
        typicality: typicality_config(&a.typicality, a.seed),
        bandwidth: a.typicality.bandwidth,
        refit: match a.kde_refit {
            RefitArg::PerSigma => KdeRefit::PerSigma,
            RefitArg::Fixed => KdeRefit::Fixed,
        },
        bootstrap: BootstrapConfig {
            level: a.ci_level,
            resamples: a.resamples,
            seed: a.seed,
        },
    };
    let result = run_sweep(&Arc::new(observer), &train, &pairs, &cfg)?;
    if let Some(csv) = &a.csv {
        fs::write(csv, result.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    }
    let mut value = serde_json::to_value(&result)?;
    value["selected_sigma"] = json!(select_sigma(&result)?);
    value["config"] = serde_json::to_value(a)?;
    print_json(&value)
}

fn cmd_gate(a: &GateArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let hidden = read(&a.sequence)?;
    let default_mask = {
        let mut p = a.sequence.clone().into_os_string();
        p.push(".mask");
        PathBuf::from(p)
    };
    let mask_path = a.mask.clone().or_else(|| default_mask.exists().then_some(default_mask));
    let seq = match mask_path {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            TokenSequence::new(hidden, parse_mask(&text)?)?
        }
        None => TokenSequence::unmasked(hidden)?,
    };
    let threshold = match (a.threshold, &a.calibration) {
        (Some(t), _) => t,
        (None, Some(path)) => {
            let scores = model.score_batch(&read(path)?)?;
            calibrate_threshold(&scores, a.percentile)?
        }
        (None, None) => bail!("either --calibration or --threshold is required"),
    };
    let cfg = GateConfig {
        detector: if model.name() == "mahalanobis" {
            DetectorKind::Mahalanobis
        } else {
            DetectorKind::Rescoped
        },
        percentile: a.percentile,
        min_prefix: a.min_prefix,
    };
    let trace = gate_sequence(&seq, model.as_ref(), threshold, &cfg)?;
    let mut out = io::stdout().lock();
    for step in &trace.steps {
        // Latency is left out so that output is reproducible.
        let line = json!({
            "token_index": step.token_index,
            "score": step.score,
            "over_threshold": step.over_threshold,
            "advisory": step.advisory,
        });
        writeln!(out, "{line}")?;
    }
    let decision = trace.decision;
    let summary = json!({
        "decision": decision,
        "threshold": trace.threshold,
        "final_score": trace.final_score(),
        "detector": model.name(),
    });
    writeln!(out, "{summary}")?;
    Ok(match decision {
        Decision::Accept => ExitCode::SUCCESS,
        Decision::Reject => ExitCode::from(EXIT_REJECT),
    })
}

fn cmd_info(a: &InfoArgs) -> Result<()> {
    let is_csv = a.path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let ds = read(&a.path)?;
        println!("count={} dim={} format=csv", ds.count(), ds.dim());
    } else {
        let h = read_header(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
        println!("count={} dim={}", h.count, h.dim);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.command {
        Command::Fit(a) => cmd_fit(a)?,
        Command::Score(a) => cmd_score(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Sweep(a) => cmd_sweep(a)?,
        Command::Gate(a) => return cmd_gate(a),
        Command::Info(a) => cmd_info(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
