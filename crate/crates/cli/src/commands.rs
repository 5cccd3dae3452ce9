//! Subcommands of the `xsect` binary.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use xsect_core::evaluation::{evaluate, Evaluation, EvaluationConfig};
use xsect_core::network::{checkpoint, NetworkConfig, NetworkParams};
use xsect_core::optimizer::{train, validation_metrics, write_log, TrainConfig};
use xsect_core::phantom::dataset::{generate_case, read_dataset, write_case, PhantomCase};
use xsect_core::phantom::{OperatorNoise, PhantomRecipe};
use xsect_core::stats::{format_agreement, format_mae, write_agreement_csv, write_mae_csv};
use xsect_core::study::{annotated_planes, run_study, StudyConfig, StudySummary};
use xsect_core::uncertainty::{write_reports_csv, write_reports_json, Strategy};
use xsect_core::{volume, Vec3};

use crate::prediction;
use crate::server;

#[derive(Debug, Parser)]
#[command(
    name = "xsect",
    version,
    about = "Cross-section plane regression on vessel phantoms"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate annotated candy-cane phantom volumes.
    Phantom(PhantomArgs),
    /// Train a network on a phantom dataset.
    Train(TrainArgs),
    /// Predict the cross-section orientation at one point.
    Predict(PredictArgs),
    /// Compare every method against manual annotations and ground truth.
    Evaluate(EvaluateArgs),
    /// Generate, train and evaluate in one run.
    Study(StudyArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
}

#[derive(Debug, clap::Args)]
pub struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of volumes.
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    /// Index of the first volume; volumes with equal index and seed are identical.
    #[arg(long, default_value_t = 0)]
    pub first: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Simulated operators per volume.
    #[arg(long, default_value_t = 3)]
    pub operators: u32,
    /// Phantom recipe (TOML). Defaults to aortic-scale canes at 1 mm.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    /// Operator noise (TOML). Defaults to the calibrated noise.
    #[arg(long)]
    pub noise: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRun {
    pub n: usize,
    pub first: usize,
    pub seed: u64,
    pub operators: u32,
    pub recipe: PhantomRecipe,
    pub noise: OperatorNoise,
}

/// Name of the effective-configuration file written next to generated volumes.
pub const PHANTOM_MANIFEST: &str = "phantoms.toml";

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Dataset directory written by `xsect phantom`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration (TOML); see [`TrainRun`].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path. The epoch log goes next to it with extension `log.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed` of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Share of the volumes (the last ones, by id) held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainRun {
    fn default() -> Self {
        let study = StudyConfig::default();
        Self {
            network: study.network,
            train: study.train,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// ADXV1 volume file.
    #[arg(long)]
    pub volume: PathBuf,
    /// Pivot in mm as `x,y,z`.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub pivot: Vec3,
    /// One of nouq, mcds, ins, mcdbs.
    #[arg(long, value_parser = parse_strategy, default_value = "mcdbs")]
    pub strategy: Strategy,
    /// Number of draws; 1 forces a single deterministic pass.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of annotated test volumes.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for the report tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Draws per sampling strategy.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct StudyArgs {
    /// Study configuration (TOML). Defaults to the phantom-study setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the checkpoint, logs and tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the dataset, training and evaluation seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    #[arg(long, env = "XSECT_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Directory of ADXV1 volumes to serve.
    #[arg(long, env = "XSECT_DATA_DIR")]
    pub data: PathBuf,
    #[arg(long, env = "XSECT_BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}

fn parse_point(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("expected x,y,z in mm: {e}"))?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected three finite coordinates, got {s:?}")),
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: xsect_core::Error| e.to_string())
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn log_effective<T: Serialize>(command: &str, seed: u64, config: &T) -> Result<()> {
    let config = serde_json::to_string(config)?;
    tracing::info!(command, seed, %config, "effective configuration");
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => phantom(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Predict(a) => predict_cmd(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Study(a) => study_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
    }
}

pub fn phantom(a: &PhantomArgs) -> Result<()> {
    let run = PhantomRun {
        n: a.n,
        first: a.first,
        seed: a.seed,
        operators: a.operators,
        recipe: match &a.recipe {
            None => PhantomRecipe::study(),
            Some(p) => PhantomRecipe::from_toml(
                &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )?,
        },
        noise: match &a.noise {
            None => OperatorNoise::calibrated(),
            Some(p) => toml::from_str(
                &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )
            .with_context(|| format!("parsing {}", p.display()))?,
        },
    };
    run.noise.validate()?;
    log_effective("phantom", run.seed, &run)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join(PHANTOM_MANIFEST), toml::to_string(&run)?)?;
    for i in run.first..run.first + run.n {
        let case = generate_case(&run.recipe, &run.noise, run.operators, run.seed, i)?;
        write_case(&a.out, &case)
            .with_context(|| format!("writing {} to {}", case.id, a.out.display()))?;
        tracing::info!(id = %case.id, dims = ?case.volume.dims(), "wrote phantom");
    }
    Ok(())
}

/// Splits cases (sorted by id) into training and validation parts; the
/// last `round(n * val_fraction)` cases, at least one, validate.
pub fn split_cases(
    mut cases: Vec<PhantomCase>,
    val_fraction: f64,
) -> Result<(Vec<PhantomCase>, Vec<PhantomCase>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        bail!("val_fraction must be in [0, 1), got {val_fraction}");
    }
    let n = cases.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).max(1);
    if n_val >= n {
        bail!("{n} volumes cannot be split into nonempty training and validation parts");
    }
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    let val = cases.split_off(n - n_val);
    Ok((cases, val))
}

/// Checkpoint metadata written by `xsect train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub run: TrainRun,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
}

pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.csv")
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut run: TrainRun = read_toml(a.config.as_deref())?;
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    log_effective("train", run.train.seed, &run)?;
    let cases = read_dataset(&a.data)?;
    let (tr, va) = split_cases(cases, run.val_fraction)?;
    let outcome = train(
        &run.network,
        &run.train,
        &annotated_planes(&tr)?,
        &annotated_planes(&va)?,
    )?;
    let best = &outcome.log[outcome.best_epoch - 1];
    let meta = TrainMeta {
        run: run.clone(),
        best_epoch: outcome.best_epoch,
        best_val_loss: best.val_loss,
        epochs_run: outcome.log.len(),
        stopped_early: outcome.stopped_early,
        train_cases: tr.iter().map(|c| c.id.clone()).collect(),
        val_cases: va.iter().map(|c| c.id.clone()).collect(),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(&outcome.params, &serde_json::to_value(&meta)?, &a.out)?;
    write_log(&outcome.log, fs::File::create(log_path(&a.out))?)?;
    tracing::info!(
        best_epoch = meta.best_epoch,
        best_val_loss = meta.best_val_loss,
        epochs_run = meta.epochs_run,
        stopped_early = meta.stopped_early,
        "training finished"
    );
    Ok(())
}

/// Loads a checkpoint written by `xsect train` and recomputes the loss on
/// its validation volumes from `data`.
pub fn reload_val_loss(checkpoint_path: &Path, data: &Path) -> Result<(f64, TrainMeta)> {
    let (params, meta) = checkpoint::load(checkpoint_path)?;
    let meta: TrainMeta =
        serde_json::from_value(meta).context("checkpoint was not written by `xsect train`")?;
    let (_, va) = split_cases(read_dataset(data)?, meta.run.val_fraction)?;
    let (loss, _, _) = validation_metrics(&params, &annotated_planes(&va)?, meta.run.train.delta)?;
    Ok((loss, meta))
}

fn load_params(path: &Path) -> Result<NetworkParams<f32>> {
    let (params, _) =
        checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(params)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

pub fn predict_cmd(a: &PredictArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Effective<'a> {
        checkpoint: &'a Path,
        volume: &'a Path,
        pivot: [f64; 3],
        strategy: Strategy,
        k: usize,
        seed: u64,
    }
    log_effective(
        "predict",
        a.seed,
        &Effective {
            checkpoint: &a.checkpoint,
            volume: &a.volume,
            pivot: a.pivot.into(),
            strategy: a.strategy,
            k: a.k,
            seed: a.seed,
        },
    )?;
    let params = load_params(&a.checkpoint)?;
    let vol = volume::load(&a.volume)
        .with_context(|| format!("loading volume {}", a.volume.display()))?;
    if !vol.contains(&a.pivot) {
        bail!("pivot {:?} lies outside the volume", a.pivot.as_slice());
    }
    let p = prediction::run(&params, &vol, &a.pivot, a.strategy, a.k, a.seed)?;
    let rows = [p.report()];
    let mut w = output(a.out.as_deref())?;
    match a.format {
        Format::Json => {
            write_reports_json(&rows, &mut w)?;
            writeln!(w)?;
        }
        Format::Csv => write_reports_csv(&rows, &mut w)?,
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MeasurementRow<'a> {
    case: &'a str,
    landmark: &'a str,
    operator: u32,
    method: &'a str,
    theta_deg: f64,
    phi_deg: f64,
}

#[derive(Debug, Serialize)]
struct RecommendationRow<'a> {
    case: &'a str,
    landmark: &'a str,
    operator: u32,
    theta: String,
    phi: String,
    ins_std_theta_deg: f64,
    ins_std_phi_deg: f64,
    mcdbs_std_theta_deg: f64,
    mcdbs_std_phi_deg: f64,
}

#[derive(Debug, Serialize)]
struct SpreadRow<'a> {
    method: &'a str,
    mean_std_theta_deg: f64,
    mean_std_phi_deg: f64,
}

/// Report files written by [`write_evaluation`].
pub const REPORT_FILES: [&str; 5] = [
    "agreement.csv",
    "mae.csv",
    "measurements.csv",
    "recommendations.csv",
    "spread.csv",
];

pub fn write_evaluation(ev: &Evaluation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [agreement, mae, measurements, recommendations, spread] = REPORT_FILES.map(|f| dir.join(f));
    write_agreement_csv(&ev.agreement, fs::File::create(agreement)?)?;
    write_mae_csv(&ev.mae, fs::File::create(mae)?)?;
    let mut w = csv::Writer::from_path(measurements)?;
    for (m, rows) in &ev.measurements {
        for r in rows {
            w.serialize(MeasurementRow {
                case: &r.case,
                landmark: r.landmark.name(),
                operator: r.operator,
                method: m.name(),
                theta_deg: r.orientation.theta_deg(),
                phi_deg: r.orientation.phi_deg(),
            })?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(recommendations)?;
    for (case, lm, op, r) in &ev.recommendations {
        w.serialize(RecommendationRow {
            case,
            landmark: lm.name(),
            operator: *op,
            theta: r.theta.to_string(),
            phi: r.phi.to_string(),
            ins_std_theta_deg: r.ins_std_deg[0],
            ins_std_phi_deg: r.ins_std_deg[1],
            mcdbs_std_theta_deg: r.mcdbs_std_deg[0],
            mcdbs_std_phi_deg: r.mcdbs_std_deg[1],
        })?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(spread)?;
    for (m, s) in &ev.mean_std_deg {
        w.serialize(SpreadRow {
            method: m.name(),
            mean_std_theta_deg: s[0],
            mean_std_phi_deg: s[1],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let cfg = EvaluationConfig {
        k: a.k,
        seed: a.seed,
        ..EvaluationConfig::default()
    };
    log_effective("evaluate", cfg.seed, &cfg)?;
    let params = load_params(&a.checkpoint)?;
    let cases = read_dataset(&a.data)?;
    let ev = evaluate(&params, &cases, &cfg)?;
    write_evaluation(&ev, &a.out)?;
    println!("{}", format_agreement(&ev.agreement));
    println!("{}", format_mae(&ev.mae));
    Ok(())
}

/// Files written by `xsect study` besides the evaluation tables.
pub const STUDY_CHECKPOINT: &str = "model.ckpt";
pub const STUDY_SUMMARY: &str = "summary.json";

#[derive(Debug, Serialize)]
struct StudyReport<'a> {
    summary: &'a StudySummary,
    mae_below_noise: bool,
    loa_below_manual: bool,
    phi_spread_exceeds_theta: bool,
    best_epoch: usize,
    epochs_run: usize,
}

pub fn study_cmd(a: &StudyArgs) -> Result<()> {
    let mut cfg: StudyConfig = read_toml(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.evaluation.seed = s;
    }
    log_effective("study", cfg.seed, &cfg)?;
    let out = run_study(&cfg, |e| {
        tracing::info!(
            epoch = e.epoch,
            train_loss = e.train_loss,
            val_loss = e.val_loss,
            val_theta_mae_deg = e.val_theta_mae_deg,
            val_phi_mae_deg = e.val_phi_mae_deg,
            "epoch"
        )
    })?;
    fs::create_dir_all(&a.out)?;
    let meta = serde_json::json!({ "study": cfg, "best_epoch": out.training.best_epoch });
    checkpoint::save(&out.training.params, &meta, a.out.join(STUDY_CHECKPOINT))?;
    write_log(
        &out.training.log,
        fs::File::create(log_path(&a.out.join(STUDY_CHECKPOINT)))?,
    )?;
    write_evaluation(&out.evaluation, &a.out)?;
    let s = &out.summary;
    let report = StudyReport {
        summary: s,
        mae_below_noise: s.mae_below_noise(),
        loa_below_manual: s.loa_below_manual(),
        phi_spread_exceeds_theta: s.phi_spread_exceeds_theta(),
        best_epoch: out.training.best_epoch,
        epochs_run: out.training.log.len(),
    };
    fs::write(
        a.out.join(STUDY_SUMMARY),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("{}", format_agreement(&out.evaluation.agreement));
    println!("{}", format_mae(&out.evaluation.mae));
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn serve_cmd(a: &ServeArgs) -> Result<()> {
    log_effective(
        "serve",
        0,
        &serde_json::json!({ "checkpoint": a.checkpoint, "data": a.data, "bind": a.bind }),
    )?;
    let state = server::AppState::load(&a.checkpoint, &a.data)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = server::bind(a.bind).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        server::serve(listener, state).await
    })
}
