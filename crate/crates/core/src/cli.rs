//! Command-line front end. `main` only parses arguments and maps errors to
//! exit codes; everything else lives here so tests can drive it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, TrainMode};
use crate::datagen::{
    generate_corpus, read_dataset, split, write_dataset, DatasetError, DoeSpec,
};
use crate::integrator::check_uniform_grid;
use crate::nn::{load_checkpoint, NnError};
use crate::physics::make_scales;
use crate::spectral::{
    detect_peaks, fft_spectrum_on_grid, run_study, write_study, ModelPredictor, OracleStub,
    Predictor, SpectralError,
};
use crate::train::{
    kfold_train, train_single, train_two_step, CheckpointSink, TrainData, TrainError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. }
            | DatasetError::Checksum { .. }
            | DatasetError::Truncated { .. }
            | DatasetError::Version { .. }
            | DatasetError::Json(_) => CliError::Io(e.to_string()),
            DatasetError::FailedSample { .. } => CliError::Runtime(e.to_string()),
            DatasetError::Invalid(_) | DatasetError::UnknownSample(_) => {
                CliError::Validation(e.to_string())
            }
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io { .. }
            | NnError::Json(_)
            | NnError::Checksum
            | NnError::Truncated { .. }
            | NnError::Version { .. } => CliError::Io(e.to_string()),
            NnError::Architecture(_) | NnError::Rowdy(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Shape { .. } => CliError::Validation(e.to_string()),
            TrainError::Physics { .. }
            | TrainError::NonFinite { .. }
            | TrainError::BasisDegenerate { .. } => CliError::Runtime(e.to_string()),
            TrainError::Nn(e) => e.into(),
            TrainError::Dataset(e) => e.into(),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::Io { .. } => CliError::Io(e.to_string()),
            SpectralError::Dataset(e) => e.into(),
            SpectralError::NoPeaks | SpectralError::Predict(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "bubbleonet", version, about = "Bubble-dynamics corpora and operator-network training")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides both the split seed and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config field, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub kfold: Option<usize>,
    /// Suppress per-checkpoint progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the design of experiments and write a dataset.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Generate the study corpus instead of the training corpus.
        #[arg(long)]
        study: bool,
        #[arg(long)]
        allow_failures: bool,
    },
    /// Train a model (single-step unless the config says otherwise).
    Train {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long, value_enum)]
        mode: Option<TrainMode>,
    },
    /// Two-step training (trunk, SVD, then branch).
    Train2 {
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Run the interpolation/extrapolation study.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory (default: `<paths.model>/best`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the ground truth as the prediction.
        #[arg(long)]
        oracle: bool,
    },
    /// Map a pressure CSV (t [s], P [Pa]) to a radius CSV.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pressure: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Initial radius (m); defaults to the first design radius.
        #[arg(long)]
        r0: Option<f64>,
    },
    /// Amplitude spectrum of a trajectory CSV or a dataset sample.
    Spectrum {
        /// CSV with a time column (s) first.
        #[arg(long, conflicts_with = "dataset")]
        input: Option<PathBuf>,
        /// Column to analyse (default: the second one).
        #[arg(long, requires = "input")]
        column: Option<String>,
        #[arg(long, requires = "sample")]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        sample: Option<usize>,
        /// Driving frequency (Hz); taken from the sample when omitted.
        #[arg(long)]
        hint: Option<f64>,
        #[arg(long)]
        output: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Generate {
            cfg,
            study,
            allow_failures,
        } => cmd_generate(&load(&cfg)?, study, allow_failures),
        Command::Train { args, mode } => {
            let mut cfg = train_config(&args)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            cmd_train(&cfg, !args.quiet)
        }
        Command::Train2 { args } => {
            let mut cfg = train_config(&args)?;
            cfg.mode = TrainMode::TwoStep;
            cmd_train(&cfg, !args.quiet)
        }
        Command::Eval {
            cfg,
            checkpoint,
            oracle,
        } => cmd_eval(&load(&cfg)?, checkpoint.as_deref(), oracle),
        Command::Infer {
            checkpoint,
            pressure,
            output,
            r0,
        } => cmd_infer(&checkpoint, &pressure, &output, r0),
        Command::Spectrum {
            input,
            column,
            dataset,
            sample,
            hint,
            output,
        } => cmd_spectrum(input.as_deref(), column.as_deref(), dataset.as_deref(), sample, hint, &output),
    }
}

fn load(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut overrides = args.set.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
        overrides.push(format!("train.seed={s}"));
    }
    Ok(RunConfig::load(&args.config, &overrides)?)
}

fn train_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = load(&args.cfg)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if args.kfold.is_some() {
        cfg.train.kfold = args.kfold;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_hash(cfg: &RunConfig) -> String {
    let text = serde_json::to_string(&cfg.to_value()).expect("config serializes");
    format!("{:08x}", crc32c::crc32c(text.as_bytes()))
}

fn build_id() -> String {
    format!(
        "{}-{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("BUBBLEONET_BUILD_ID").unwrap_or("dev")
    )
}

fn write_run_metadata(dir: &Path, command: &str, cfg: &RunConfig, started: Instant, extra: serde_json::Value) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta = json!({
        "command": command,
        "config_hash": config_hash(cfg),
        "build_id": build_id(),
        "threads": rayon::current_num_threads(),
        "seed": cfg.seed,
        "train_seed": cfg.train.seed,
        "wall_clock_s": started.elapsed().as_secs_f64(),
        "config": cfg.to_value(),
        "result": extra,
    });
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&meta).expect("json value");
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

pub fn cmd_generate(cfg: &RunConfig, study: bool, allow_failures: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let (spec, dir): (&DoeSpec, &Path) = if study {
        let spec = cfg
            .study
            .as_ref()
            .ok_or_else(|| CliError::Validation("config has no `study` section".into()))?;
        let dir = cfg
            .paths
            .study_dataset
            .as_deref()
            .ok_or_else(|| CliError::Validation("config has no `paths.study_dataset`".into()))?;
        (spec, dir)
    } else {
        (&cfg.doe, cfg.paths.dataset.as_path())
    };
    let records = generate_corpus(spec, &cfg.fluid, &cfg.solver)?;
    let failed: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, (_, r))| r.is_err())
        .map(|(i, _)| i)
        .collect();
    let sp = if study {
        None
    } else {
        let items: Vec<(usize, f64, f64)> = records
            .iter()
            .filter_map(|(p, r)| r.as_ref().ok().map(|s| (s.id, p.amp, p.freq)))
            .collect();
        Some(split(&items, cfg.split_ratio, cfg.seed)?)
    };
    let (n_train, n_val) = sp
        .as_ref()
        .map_or((0, 0), |s| (s.train.len(), s.validation.len()));
    write_dataset(dir, spec, &cfg.fluid, &cfg.solver, &records, sp)?;
    println!(
        "generated {} samples ({} failed) in {}; split {}/{}",
        records.len(),
        failed.len(),
        dir.display(),
        n_train,
        n_val
    );
    write_run_metadata(
        dir,
        if study { "generate --study" } else { "generate" },
        cfg,
        started,
        json!({"samples": records.len(), "failed": failed, "train": n_train, "validation": n_val}),
    )?;
    if !failed.is_empty() && !allow_failures {
        return Err(CliError::Runtime(format!(
            "{} samples failed (ids {:?}); rerun with --allow-failures to accept",
            failed.len(),
            failed
        )));
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, progress: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let ds = read_dataset(&cfg.paths.dataset)?;
    let (train, dropped_t) = TrainData::load(&ds, ds.train_ids()?)?;
    let (val, dropped_v) = TrainData::load(&ds, ds.validation_ids()?)?;
    if dropped_t + dropped_v > 0 {
        eprintln!(
            "dropped {} forcing profiles missing an initial radius",
            dropped_t + dropped_v
        );
    }
    let arch = &cfg.network;
    let r0_ref = cfg.r0_ref();
    let sink = CheckpointSink {
        dir: cfg.paths.model.clone(),
        config: cfg.to_value(),
        extra: json!({"mode": cfg.mode, "r0_ref": r0_ref}),
        progress,
    };
    let result = match (cfg.mode, cfg.train.kfold) {
        (TrainMode::Single, Some(k)) => {
            let (best, fold, reports) = kfold_train(&cfg.train, arch, &train, k, r0_ref, Some(&sink))?;
            sink.save("best", &best.best)?;
            sink.save("final", &best.params)?;
            sink.history("history.csv", &best.history)?;
            for r in &reports {
                println!(
                    "fold {}: train {} val {} best epoch {} best val_mse {:e}",
                    r.fold, r.train_rows, r.val_rows, r.best_epoch, r.best_val_mse
                );
            }
            println!("best fold {fold}");
            json!({
                "best_fold": fold,
                "folds": reports.iter().map(|r| json!({
                    "fold": r.fold, "train_rows": r.train_rows, "val_rows": r.val_rows,
                    "best_epoch": r.best_epoch, "best_val_mse": r.best_val_mse,
                    "final_val_mse": r.final_val_mse,
                })).collect::<Vec<_>>(),
            })
        }
        (TrainMode::Single, None) => {
            let out = train_single(&cfg.train, arch, &train, Some(&val), r0_ref, Some(&sink))?;
            println!(
                "trained {} epochs; best epoch {} val_mse {:e}",
                out.history.len(),
                out.best_epoch,
                out.best_val_mse
            );
            json!({"best_epoch": out.best_epoch, "best_val_mse": out.best_val_mse, "w_ode": out.weights.w_ode})
        }
        (TrainMode::TwoStep, kfold) => {
            if kfold.is_some() {
                return Err(CliError::Validation(
                    "k-fold cross-validation is only available in single-step mode".into(),
                ));
            }
            let out = train_two_step(&cfg.train, arch, &train, Some(&val), r0_ref, Some(&sink))?;
            let b = &out.basis;
            let defect = b.orthonormality_defect();
            let recon = b.reconstruction_error();
            eprintln!(
                "svd: sigma_max {:e} sigma_min {:e} rank {} |UtU-I|inf {:e} reconstruction {:e}",
                b.sigma.first().copied().unwrap_or(f64::NAN),
                b.sigma.last().copied().unwrap_or(f64::NAN),
                b.rank,
                defect,
                recon
            );
            println!(
                "two-step: best branch epoch {} val_mse {:e}",
                out.outcome.best_epoch, out.outcome.best_val_mse
            );
            json!({
                "best_epoch": out.outcome.best_epoch,
                "best_val_mse": out.outcome.best_val_mse,
                "sigma": b.sigma,
                "rank": b.rank,
                "orthonormality_defect": defect,
                "reconstruction_error": recon,
            })
        }
    };
    write_run_metadata(&cfg.paths.model, "train", cfg, started, result)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, oracle: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let study = cfg
        .study
        .as_ref()
        .ok_or_else(|| CliError::Validation("config has no `study` section".into()))?;
    let dir = cfg
        .paths
        .study_dataset
        .as_deref()
        .ok_or_else(|| CliError::Validation("config has no `paths.study_dataset`".into()))?;
    let ds = read_dataset(dir)?;
    let predictor: Box<dyn Predictor> = if oracle {
        Box::new(OracleStub)
    } else {
        let path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.paths.model.join("best"));
        Box::new(ModelPredictor {
            params: load_checkpoint(&path)?.params,
            r0_ref: cfg.r0_ref(),
        })
    };
    let report = run_study(predictor.as_ref(), study, &cfg.doe, &ds)?;
    write_study(&report, &cfg.paths.report)?;
    let a = &report.aggregate;
    println!(
        "{} cases ({} failed); mean mse in-distribution {} extrapolation {}; driving peaks found {}",
        a.cases,
        a.failed,
        a.in_distribution_mean_mse.map_or("-".into(), |v| format!("{v:e}")),
        a.extrapolation_mean_mse.map_or("-".into(), |v| format!("{v:e}")),
        a.driving_peaks_found
    );
    write_run_metadata(
        &cfg.paths.report,
        if oracle { "eval --oracle" } else { "eval" },
        cfg,
        started,
        serde_json::to_value(a).expect("plain struct"),
    )
}

/// Columns of a headed numeric CSV.
fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::Validation(format!(
                    "{}: row {} column {}: `{field}` is not a number",
                    path.display(),
                    line + 2,
                    c + 1
                ))
            })?;
            cols[c].push(v);
        }
    }
    Ok((header, cols))
}

fn write_csv(path: &Path, header: &[&str], cols: &[&[f64]]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for i in 0..cols[0].len() {
        w.write_record(cols.iter().map(|c| c[i].to_string()))
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn cmd_infer(checkpoint: &Path, pressure: &Path, output: &Path, r0: Option<f64>) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = RunConfig::from_value(ckpt.config.clone()).map_err(|e| {
        CliError::Validation(format!(
            "checkpoint {} does not carry a run config: {e}",
            checkpoint.display()
        ))
    })?;
    let (_, cols) = read_columns(pressure)?;
    if cols.len() < 2 {
        return Err(CliError::Validation(format!(
            "{}: expected columns t [s], P [Pa]",
            pressure.display()
        )));
    }
    let r0 = r0.unwrap_or(cfg.doe.r0_values[0]);
    let scales = make_scales(r0, cfg.doe.t_max, &cfg.fluid)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let t_bar: Vec<f64> = cols[0].iter().map(|&t| scales.time_from_si(t)).collect();
    let p_bar: Vec<f64> = cols[1].iter().map(|&p| scales.pressure_from_si(p)).collect();
    if t_bar.len() >= 2 {
        check_uniform_grid(&t_bar).map_err(|e| {
            CliError::Validation(format!("{}: time column: {e}", pressure.display()))
        })?;
    }
    let model = ModelPredictor {
        params: ckpt.params,
        r0_ref: cfg.r0_ref(),
    };
    let r_bar = model.predict_profile(&p_bar, &t_bar, r0).map_err(|e| match e {
        SpectralError::Predict(m) => CliError::Validation(m),
        other => other.into(),
    })?;
    let r_si: Vec<f64> = r_bar.iter().map(|&r| scales.radius_to_si(r)).collect();
    write_csv(output, &["t", "radius", "radius_bar"], &[&cols[0], &r_si, &r_bar])?;
    println!("wrote {} radius samples to {}", r_si.len(), output.display());
    Ok(())
}

pub fn cmd_spectrum(
    input: Option<&Path>,
    column: Option<&str>,
    dataset: Option<&Path>,
    sample: Option<usize>,
    hint: Option<f64>,
    output: &Path,
) -> Result<(), CliError> {
    let (t, x, hint) = match (input, dataset, sample) {
        (Some(path), _, _) => {
            let (header, mut cols) = read_columns(path)?;
            let idx = match column {
                Some(name) => header.iter().position(|h| h == name).ok_or_else(|| {
                    CliError::Validation(format!("{}: no column named `{name}`", path.display()))
                })?,
                None => 1,
            };
            if idx == 0 || idx >= cols.len() {
                return Err(CliError::Validation(format!(
                    "{}: need a time column and a signal column",
                    path.display()
                )));
            }
            let x = std::mem::take(&mut cols[idx]);
            (std::mem::take(&mut cols[0]), x, hint)
        }
        (None, Some(dir), Some(id)) => {
            let ds = read_dataset(dir)?;
            let s = ds.load(id)?;
            let sc = s.meta.scales;
            let t = s.pressure.t_grid.iter().map(|&v| sc.time_to_si(v)).collect();
            let x = s.radius.iter().map(|&v| sc.radius_to_si(v)).collect();
            (t, x, hint.or(Some(s.meta.freq)))
        }
        _ => {
            return Err(CliError::Validation(
                "give either --input FILE or --dataset DIR --sample ID".into(),
            ))
        }
    };
    let spec = detect_peaks(&fft_spectrum_on_grid(&x, &t)?, hint)?;
    write_csv(output, &["freq", "mag"], &[&spec.freqs, &spec.mags])?;
    let summary = json!({
        "resolution": spec.resolution,
        "natural_peak": spec.natural_peak,
        "driving_peak": spec.driving_peak,
        "merged": spec.merged,
    });
    println!("{}", serde_json::to_string(&summary).expect("json value"));
    Ok(())
}
