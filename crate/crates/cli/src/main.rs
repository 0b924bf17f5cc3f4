//! `pcae`: synthetic data, training, scoring and evaluation of point-cloud
//! auto-encoders from the command line.

mod config;

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pcae::anomaly::{
    evaluate_measure, fit_threshold, report, score_batch, write_report_csv, CloudScore, Direction,
    Label, MeasureSummary, Thresholds,
};
use pcae::geometry::io::{read_cloud, write_xyz_scalars};
use pcae::geometry::normalize;
use pcae::gradcheck;
use pcae::models::{load_checkpoint, save_checkpoint, Model};
use pcae::synthdata::{load_dataset, make_dataset, save_dataset, Dataset, Split};
use pcae::training::train_with;
use serde::Serialize;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "pcae",
    version,
    about = "Point-cloud auto-encoders for shape anomaly detection"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines; may be repeated.
    #[arg(long, global = true, value_name = "FILE")]
    config: Vec<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = config::parse_pair)]
    set: Vec<(String, String)>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Model variant: ae, sigma-ae, vae or sigma-vae.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its manifest.
    Synth {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the healthy training clouds of a dataset.
    Train {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct clouds and write per-point error and log-probability.
    Reconstruct {
        /// Checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// Cloud files (XYZ or binary) or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-cloud anomaly report for one split, with thresholds fitted on
    /// the validation split.
    Score {
        /// Checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Split to report: train, val or test.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit thresholds on validation and report P, R, F1 and AUC on test.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Also write the summary and the resolved config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        /// Also write the results as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut overrides: Overrides = Vec::new();
    for path in &common.config {
        overrides.extend(config::read_file(path)?);
    }
    overrides.extend(common.set.iter().cloned());
    let flags = [
        ("seed", common.seed.map(|s| s.to_string())),
        ("threads", common.threads.map(|t| t.to_string())),
        ("variant", common.variant.clone()),
    ];
    overrides.extend(
        flags
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
    );
    RunConfig::from_overrides(&overrides)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .init();
    let cfg = match resolve(&cli.common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match command {
        Command::Synth { out } => synth(cfg, &out),
        Command::Train { data, out } => train(cfg, &data, &out),
        Command::Reconstruct { model, input, out } => reconstruct(cfg, &model, &input, &out),
        Command::Score {
            model,
            data,
            split,
            out,
        } => score(cfg, &model, &data, split, &out),
        Command::Eval { model, data, out } => eval(cfg, &model, &data, out.as_deref()),
        Command::Gradcheck { out } => run_gradcheck(cfg, out.as_deref()),
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = make_dataset(&cfg.split(), &cfg.shape(), cfg.severity(), cfg.data_seed())?;
    save_dataset(&ds, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    cfg.echo(out)?;
    log::info!("wrote {} clouds to {}", ds.samples.len(), out.display());
    Ok(())
}

fn open_dataset(data: &Path) -> Result<Dataset> {
    load_dataset(data).with_context(|| format!("loading dataset from {}", data.display()))
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = open_dataset(data)?;
    let train_set = ds.clouds(Split::Train, Some(Label::Healthy));
    let val_set = ds.clouds(Split::Val, Some(Label::Healthy));
    if let Some(c) = train_set.first().filter(|c| c.len() != cfg.n_points) {
        bail!(
            "dataset clouds have {} points but n_points = {}",
            c.len(),
            cfg.n_points
        );
    }
    cfg.echo(out)?;
    let train_cfg = cfg.train();
    let every = cfg.checkpoint_every;
    let (model, log) = train_with(&train_set, &val_set, &train_cfg, |record, model| {
        if every > 0 && (record.epoch + 1) % every == 0 {
            save_checkpoint(
                model,
                &out.join(format!("epoch-{:04}.ckpt", record.epoch + 1)),
            )?;
        }
        Ok(ControlFlow::Continue(()))
    })?;
    save_checkpoint(&model, &out.join("final.ckpt"))?;
    log.write_csv(&out.join("train_log.csv"))?;
    if let Some(e) = log.stopped_early {
        log::info!("early stop after epoch {e}");
    }
    if let Some(e) = log.restored_epoch {
        log::info!("final weights from epoch {e} (lowest validation loss)");
    }
    Ok(())
}

fn open_model(path: &Path) -> Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|f| matches!(f.extension().and_then(|e| e.to_str()), Some("xyz" | "bin")));
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no cloud files among the inputs");
    }
    Ok(files)
}

fn reconstruct(cfg: &RunConfig, model_path: &Path, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let model = open_model(model_path)?;
    let files = collect_inputs(inputs)?;
    cfg.echo(out)?;
    let mut summary = csv::Writer::from_path(out.join("summary.csv"))?;
    summary.write_record(["file", "recon_error", "log_likelihood"])?;
    for file in &files {
        let raw = read_cloud(file).with_context(|| format!("reading {}", file.display()))?;
        let (x, record) = normalize(&raw)?;
        let recon = model.reconstruct(&x)?;
        let s = score_batch(&model, std::slice::from_ref(&x))
            .with_context(|| format!("scoring {}", file.display()))?
            .remove(0);
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");

        // Back to the input's units: means map affinely, variances scale by s².
        let mean = record.invert(&recon.mean)?;
        let s2 = record.scale * record.scale;
        let var: [Vec<f64>; 3] =
            std::array::from_fn(|c| recon.var.iter().map(|v| v[c] * s2).collect());
        let mut cols: Vec<(&str, &[f64])> = Vec::new();
        if model.variant().has_variance_head() {
            cols = vec![("var_x", &var[0]), ("var_y", &var[1]), ("var_z", &var[2])];
        }
        write_xyz_scalars(&out.join(format!("{stem}.recon.xyz")), &mean, &cols)?;

        let mut cols: Vec<(&str, &[f64])> = vec![("error", &s.per_point_error)];
        if let Some(lp) = &s.per_point_log_prob {
            cols.push(("log_prob", lp));
        }
        write_xyz_scalars(&out.join(format!("{stem}.points.xyz")), &raw, &cols)?;
        summary.write_record([
            file.display().to_string(),
            s.recon_error.to_string(),
            s.log_likelihood.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    summary.flush()?;
    log::info!(
        "reconstructed {} clouds into {}",
        files.len(),
        out.display()
    );
    Ok(())
}

struct Scored {
    ids: Vec<String>,
    labels: Vec<Label>,
    scores: Vec<CloudScore>,
}

impl Scored {
    fn recon(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.recon_error).collect()
    }

    fn log_likelihood(&self) -> Option<Vec<f64>> {
        self.scores.iter().map(|s| s.log_likelihood).collect()
    }
}

fn score_split(model: &Model, ds: &Dataset, split: Split) -> Result<Scored> {
    let samples: Vec<_> = ds.split(split).collect();
    if samples.is_empty() {
        bail!("the {} split is empty", split.name());
    }
    let clouds: Vec<_> = samples.iter().map(|s| s.cloud.clone()).collect();
    Ok(Scored {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        labels: samples.iter().map(|s| s.label).collect(),
        scores: score_batch(model, &clouds)
            .with_context(|| format!("scoring the {} split", split.name()))?,
    })
}

fn fit_thresholds(val: &Scored) -> Result<Thresholds> {
    let t_rec = fit_threshold(&val.recon(), &val.labels, Direction::HigherIsAnomalous)?.threshold;
    let t_l = match val.log_likelihood() {
        Some(ll) => Some(fit_threshold(&ll, &val.labels, Direction::LowerIsAnomalous)?.threshold),
        None => None,
    };
    Ok(Thresholds { t_rec, t_l })
}

fn score(cfg: &RunConfig, model_path: &Path, data: &Path, split: Split, out: &Path) -> Result<()> {
    let model = open_model(model_path)?;
    let ds = open_dataset(data)?;
    let th = fit_thresholds(&score_split(&model, &ds, Split::Val)?)?;
    let scored = score_split(&model, &ds, split)?;
    let rows = report(&scored.ids, &scored.labels, &scored.scores, &th)?;
    cfg.echo(out)?;
    write_report_csv(&out.join("report.csv"), &rows)?;
    fs::write(
        out.join("thresholds.json"),
        serde_json::to_string_pretty(&th)? + "\n",
    )?;
    log::info!("scored {} clouds of the {} split", rows.len(), split.name());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    variant: String,
    n_val: usize,
    n_test: usize,
    recon_error: MeasureSummary,
    log_likelihood: Option<MeasureSummary>,
}

fn eval(cfg: &RunConfig, model_path: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let model = open_model(model_path)?;
    let ds = open_dataset(data)?;
    let val = score_split(&model, &ds, Split::Val)?;
    let test = score_split(&model, &ds, Split::Test)?;
    let recon_error = evaluate_measure(
        (&val.recon(), &val.labels),
        (&test.recon(), &test.labels),
        Direction::HigherIsAnomalous,
    )?;
    let log_likelihood = match (val.log_likelihood(), test.log_likelihood()) {
        (Some(v), Some(t)) => Some(evaluate_measure(
            (&v, &val.labels),
            (&t, &test.labels),
            Direction::LowerIsAnomalous,
        )?),
        _ => None,
    };
    let summary = EvalSummary {
        variant: model.variant().to_string(),
        n_val: val.ids.len(),
        n_test: test.ids.len(),
        recon_error,
        log_likelihood,
    };
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    print!("{json}");
    if let Some(out) = out {
        cfg.echo(out)?;
        fs::write(out.join("eval.json"), json)?;
    }
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let results = gradcheck::run_suite(cfg.seed)?;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAILED" };
        println!("{:<36} rel. error {:.2e}  {verdict}", r.name, r.rel_error);
    }
    if let Some(out) = out {
        cfg.echo(out)?;
        fs::write(
            out.join("gradcheck.json"),
            serde_json::to_string_pretty(&results)? + "\n",
        )?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!(
            "{failed} of {} gradient checks exceed {:e}",
            results.len(),
            gradcheck::TOLERANCE
        );
    }
    Ok(())
}
