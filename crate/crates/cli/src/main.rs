use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use longilvm::checkpoint;
use longilvm::config::RunConfig;
use longilvm::data::{load_dataset, load_schema, read_matrix_csv, truncate_history, write_matrix_csv, KeyedMatrix, LongitudinalDataset};
use longilvm::datagen::{emit_simulation, simulate, DigitSource, SimConfig, Variant};
use longilvm::error::{Error, Result};
use longilvm::linalg::Mat;
use longilvm::model::{rng_for, train, StopReason};
use longilvm::predict::{impute, mse, predict_future, PredictionRequest};

#[derive(Parser)]
#[command(name = "longilvm", version, about = "Longitudinal latent-variable models with structured missingness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic digit-image dataset with ground truth.
    Simulate(SimulateArgs),
    /// Fit a model and write a checkpoint.
    Train(TrainArgs),
    /// Fill the missing entries of a dataset.
    Impute(ImputeArgs),
    /// Predict later visits from the first few of each patient.
    Predict(PredictArgs),
    /// Mean squared error of imputations or predictions.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Regular,
    Irregular,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "regular")]
    variant: VariantArg,
    #[arg(long, default_value_t = 100)]
    patients: usize,
    /// Largest per-pixel missing probability.
    #[arg(long, default_value_t = 0.5)]
    missing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Prefix of the generated patient ids (keeps train and test sets disjoint).
    #[arg(long, default_value = "p")]
    id_prefix: String,
    /// CSV with the "3" and "6" glyphs (two rows of 36x36 values); built-in
    /// glyphs otherwise.
    #[arg(long)]
    glyphs: Option<PathBuf>,
    /// JSON with further simulator settings; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args)]
struct ImputeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the configuration's `eval_samples`.
    #[arg(long)]
    samples: Option<usize>,
    /// Must match the configuration recorded in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Patients to predict; their first `--first-k` visits are conditioned on.
    #[arg(long)]
    data: PathBuf,
    /// Further observed patients to condition on (typically the training set).
    #[arg(long)]
    conditioning: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    first_k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    /// Condition on encoder means instead of encoder samples.
    #[arg(long)]
    condition_on_mean: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Task {
    /// `imputed.csv` against ground truth on the simulator-masked entries.
    Impute,
    /// `y_mean.csv` against ground truth (or observed values) on all entries.
    Future,
    /// `m_prob.csv` against the observed mask.
    Mask,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Dataset directory holding `mask.csv` and `ground_truth.csv` or
    /// `observations.csv`.
    #[arg(long)]
    truth: PathBuf,
    /// Output directories of `impute` or `predict`, e.g. one per seed.
    #[arg(long = "pred", required = true, num_args = 1..)]
    preds: Vec<PathBuf>,
    #[arg(long, value_enum)]
    task: Task,
}

/// Refuse to write into a non-empty directory unless forced; files of the
/// same name are overwritten.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::OutputExists(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(format!("{} is not empty (use --force to overwrite)", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_dir(dir: &Path) -> Result<LongitudinalDataset> {
    let schema = load_schema(&dir.join("schema.json"))?;
    load_dataset(dir, &schema)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<SimConfig>(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SimConfig::default(),
    };
    cfg.variant = match a.variant {
        VariantArg::Regular => Variant::Regular,
        VariantArg::Irregular => Variant::Irregular,
    };
    cfg.patients = a.patients;
    cfg.p_max = a.missing;
    cfg.seed = a.seed;
    cfg.id_prefix = a.id_prefix;
    cfg.validate()?;
    let digits = match &a.glyphs {
        Some(p) => DigitSource::from_csv(p, cfg.side)?,
        None => DigitSource::builtin(cfg.side)?,
    };
    prepare_out(&a.out, a.force)?;
    let out = simulate(&cfg, &digits)?;
    emit_simulation(&out, &a.out)?;
    let m = &out.observed.m;
    println!(
        "{} rows, {} patients, {} outputs, {:.4} missing -> {}",
        out.observed.n(),
        out.observed.num_patients(),
        out.observed.k(),
        1.0 - m.sum() / m.data.len() as f64,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = load_dir(&a.data)?;
    cfg.check_schema(&ds.schema)?;
    prepare_out(&a.out, a.force)?;
    let out = train(&ds, &cfg)?;
    checkpoint::save(&a.out, &out.params, &ds.schema)?;

    let path = a.out.join("training_log.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    w.write_record(["epoch", "elbo", "val_elbo", "recon_y", "recon_m", "kl_y", "kl_m", "l_t", "kl_u"]).map_err(Error::from)?;
    for r in &out.log {
        let b = r.train;
        let val = r.val_elbo.map(fmt).unwrap_or_default();
        w.write_record([
            r.epoch.to_string(),
            fmt(b.elbo),
            val,
            fmt(b.recon_y),
            fmt(b.recon_m),
            fmt(b.kl_y),
            fmt(b.kl_m),
            fmt(b.l_t),
            fmt(b.kl_u),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let stop = match out.stop {
        StopReason::Completed => "completed",
        StopReason::EarlyStopped => "early stopping",
        StopReason::NonFinite => "non-finite objective; kept last finite parameters",
    };
    println!("{} epochs ({stop}) -> {}", out.log.len(), a.out.display());
    Ok(())
}

fn load_checkpoint(dir: &Path, config: Option<&Path>) -> Result<checkpoint::Checkpoint> {
    if let Some(p) = config {
        let cfg = RunConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
        checkpoint::verify_config(&checkpoint::read_manifest(dir)?, &cfg)?;
    }
    checkpoint::load(dir)
}

fn check_schema(ck: &checkpoint::Checkpoint, ds: &LongitudinalDataset, what: &Path) -> Result<()> {
    if ds.schema != ck.schema {
        return Err(Error::Schema(format!("{}: schema differs from the checkpoint's", what.display())));
    }
    Ok(())
}

fn cmd_impute(a: ImputeArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, a.config.as_deref())?;
    let ds = load_dir(&a.data)?;
    check_schema(&ck, &ds, &a.data)?;
    prepare_out(&a.out, a.force)?;
    let samples = a.samples.unwrap_or(ck.params.config.eval_samples);
    let filled = impute(&ds, &ck.params, samples, &mut rng_for(a.seed, 0))?;
    write_matrix_csv(&a.out.join("imputed.csv"), &ds, &filled, "y_", fmt)?;
    println!("imputed {} rows -> {}", ds.n(), a.out.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, a.config.as_deref())?;
    let ds = load_dir(&a.data)?;
    check_schema(&ck, &ds, &a.data)?;
    let (known, future) = truncate_history(&ds, a.first_k)?;
    let conditioning = match &a.conditioning {
        Some(dir) => {
            let c = load_dir(dir)?;
            check_schema(&ck, &c, dir)?;
            c.concat(&known)?
        }
        None => known,
    };
    prepare_out(&a.out, a.force)?;
    let req = PredictionRequest {
        conditioning,
        targets: future.clone(),
        samples: a.samples.unwrap_or(ck.params.config.eval_samples),
        condition_on_mean: a.condition_on_mean,
    };
    let pred = predict_future(&req, &ck.params, &mut rng_for(a.seed, 0))?;
    write_matrix_csv(&a.out.join("y_mean.csv"), &future, &pred.y_mean, "y_", fmt)?;
    write_matrix_csv(&a.out.join("m_prob.csv"), &future, &pred.m_prob, "m_prob_", fmt)?;
    println!("predicted {} rows of {} patients -> {}", future.n(), future.num_patients(), a.out.display());
    Ok(())
}

/// Flatten matching entries of `pred` and `truth` (keyed by patient and
/// time) into matrices plus a selector for [`mse`].
fn keyed_mse(pred: &KeyedMatrix, truth: &KeyedMatrix, mask: Option<&KeyedMatrix>, what: &str) -> Result<f64> {
    if pred.cols != truth.cols {
        return Err(Error::Shape(format!("{what}: {} predicted columns, {} true", pred.cols, truth.cols)));
    }
    let mut keys: Vec<&(String, u64)> = pred.rows.keys().collect();
    keys.sort();
    let (mut p, mut t, mut s) = (Vec::new(), Vec::new(), Vec::new());
    for key in keys {
        let tr = truth.rows.get(key).ok_or_else(|| Error::Data(format!("{what}: no true row for patient {} at time {}", key.0, f64::from_bits(key.1))))?;
        let m = match mask {
            Some(m) => Some(m.rows.get(key).ok_or_else(|| Error::Data(format!("{what}: no mask row for patient {}", key.0)))?),
            None => None,
        };
        for (k, pv) in pred.rows[key].iter().enumerate() {
            let use_it = match (pv, tr[k]) {
                (Some(_), Some(_)) => m.map_or(true, |m| m[k] == Some(0.0)),
                _ => false,
            };
            p.push(pv.unwrap_or(0.0));
            t.push(tr[k].unwrap_or(0.0));
            s.push(if use_it { 1.0 } else { 0.0 });
        }
    }
    let n = p.len();
    mse(&Mat::from_vec(1, n, p), &Mat::from_vec(1, n, t), &Mat::from_vec(1, n, s))
        .map_err(|e| Error::Data(format!("{what}: {e}")))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let gt = a.truth.join("ground_truth.csv");
    let values_path = if gt.exists() { gt.clone() } else { a.truth.join("observations.csv") };
    let values = || read_matrix_csv(&values_path, "y_");
    let mask = || read_matrix_csv(&a.truth.join("mask.csv"), "m_");
    let (truth, selector) = match a.task {
        Task::Impute => {
            if !gt.exists() {
                return Err(Error::Data(format!("{}: imputation needs ground_truth.csv", a.truth.display())));
            }
            (values()?, Some(mask()?))
        }
        Task::Future => (values()?, None),
        Task::Mask => (mask()?, None),
    };
    let (file, prefix) = match a.task {
        Task::Impute => ("imputed.csv", "y_"),
        Task::Future => ("y_mean.csv", "y_"),
        Task::Mask => ("m_prob.csv", "m_prob_"),
    };
    let mut scores = Vec::new();
    for dir in &a.preds {
        let path = dir.join(file);
        let pred = read_matrix_csv(&path, prefix)?;
        let v = keyed_mse(&pred, &truth, selector.as_ref(), &path.display().to_string())?;
        println!("{}\tMSE {v:.6}", dir.display());
        scores.push(v);
    }
    if scores.len() > 1 {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        println!("mean ± sd over {} runs: {mean:.6} ± {sd:.6}", scores.len());
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LONGILVM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("LONGILVM_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
