mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nnsl::datapipe::files::read_trajectory_dir;
use nnsl::datapipe::{
    build_descriptors, load_dataset, resolve_token_files, write_manifest, BuildOptions,
    CachedStore, FileLossStore, LossStore, ManifestEntry, Trajectory, Variant,
};
use nnsl::evalharness::{evaluate, EvalReport, LogisticPredictor, NeuralPredictor, Predictor};
use nnsl::forecaster::{
    read_checkpoint, train, write_checkpoint, write_loss_trace, RunConfig, TrainSet,
};
use nnsl::logfit::{fit_logistic, TaskFit};
use nnsl::synthgen::{gen_corpus, CorpusConfig, Family};
use nnsl::{fsutil, Error, Result};

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "nnsl",
    version,
    about = "Forecast downstream accuracy of training runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of trajectories and token probabilities.
    Synth(SynthArgs),
    /// Build a training manifest from a trajectory directory.
    BuildData(BuildDataArgs),
    /// Train a forecaster on a manifest.
    Train(TrainArgs),
    /// Fit per-task logistic curves mapping mean loss to accuracy.
    FitLogistic(FitLogisticArgs),
    /// Forecast held-out runs from their first checkpoints and score the result.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    /// Comma-separated families assigned round-robin.
    #[arg(long, value_delimiter = ',', default_values_t = Family::ALL)]
    families: Vec<Family>,
    /// Families kept out of the training split.
    #[arg(long, value_delimiter = ',')]
    heldout_only: Vec<Family>,
    #[arg(long, default_value_t = 4096)]
    tokens: usize,
    #[arg(long, default_value_t = 15)]
    checkpoints: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0.2)]
    heldout_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildDataArgs {
    #[arg(long)]
    trajs: PathBuf,
    #[arg(long)]
    variant: Variant,
    #[arg(long, default_value_t = 0.4)]
    drop_p: f64,
    #[arg(long, default_value_t = 8)]
    masks: usize,
    /// Keep a seeded subsample of at most this many examples per run.
    #[arg(long)]
    max_per_run: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON run config with `model` and `train` sections; defaults to the
    /// desk config for the manifest's variant.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; defaults to the checkpoint path with `.loss.csv` appended.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct FitLogisticArgs {
    #[arg(long)]
    trajs: PathBuf,
    /// Fit only these tasks (repeatable); all tasks by default.
    #[arg(long)]
    task: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(
        long,
        conflicts_with = "logistic",
        required_unless_present = "logistic"
    )]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    logistic: Option<PathBuf>,
    #[arg(long)]
    trajs: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    frac: f64,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Grant access to token probabilities at future checkpoints, which the
    /// logistic baseline and histogram-change variants need.
    #[arg(long)]
    oracle_losses: bool,
    /// Seed of the bootstrap interval on ranking accuracy.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::Io { .. } => 3,
        Error::Format { .. } | Error::Validation { .. } | Error::Data(_) => 4,
        Error::Numeric(_) | Error::Fit { .. } | Error::Grad(_) => 5,
        Error::MissingOracle(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::BuildData(a) => build_data(a),
        Command::Train(a) => train_cmd(a),
        Command::FitLogistic(a) => fit_logistic_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = CorpusConfig {
        runs: a.runs,
        families: a.families,
        heldout_only: a.heldout_only,
        heldout_fraction: a.heldout_fraction,
        checkpoints: a.checkpoints,
        tokens: a.tokens,
        noise_std: a.noise,
        seed: a.seed,
        ..CorpusConfig::default()
    };
    if a.runs == 0 {
        return Err(Error::InvalidArgument("--runs must be at least 1".into()));
    }
    if config.checkpoints < 4 {
        return Err(Error::InvalidArgument(
            "--checkpoints must be at least 4".into(),
        ));
    }
    let (index, _, _) = gen_corpus(&config, &a.out)?;
    println!(
        "wrote {} runs ({} matched-mean pairs) to {}",
        index.runs.len(),
        index.matched_mean_pairs.len(),
        a.out.display()
    );
    let mut m = RunManifest::new("synth", None, Some(a.seed));
    m.output(&a.out)?;
    m.write(&a.out.join(manifest::SYNTH_MANIFEST))
}

/// Trajectories of a directory with token-probability paths made usable
/// from the working directory.
fn load_trajectories(dir: &Path) -> Result<Vec<(PathBuf, Trajectory)>> {
    let mut out = read_trajectory_dir(dir)?;
    for (path, traj) in &mut out {
        resolve_token_files(traj, path.parent().unwrap_or(Path::new("")));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no trajectories in {}", dir.display())));
    }
    Ok(out)
}

fn build_data(a: BuildDataArgs) -> Result<()> {
    let loaded = read_trajectory_dir(&a.trajs)?;
    if loaded.is_empty() {
        return Err(Error::Data(format!(
            "no trajectories in {}",
            a.trajs.display()
        )));
    }
    let trajs: Vec<Trajectory> = loaded.iter().map(|(_, t)| t.clone()).collect();
    let opts = BuildOptions {
        drop_p: a.drop_p,
        masks: a.masks,
        max_per_run: a.max_per_run,
        seed: a.seed,
    };
    let descs = build_descriptors(&trajs, &opts)?;
    let base = manifest_dir(&a.out)?;
    let names = loaded
        .iter()
        .map(|(p, _)| manifest::relative_path(p, &base))
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<ManifestEntry> = descs
        .iter()
        .map(|d| ManifestEntry::new(names[d.run].clone(), a.variant, d))
        .collect();
    write_manifest(&a.out, &entries)?;
    println!("{} examples from {} runs", entries.len(), trajs.len());
    let mut m = RunManifest::new("build-data", None, Some(a.seed));
    m.input(&a.trajs)?;
    m.output(&a.out)?;
    m.write(&manifest::sidecar(&a.out))
}

fn manifest_dir(out: &Path) -> Result<PathBuf> {
    let dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(dir.to_path_buf())
}

fn read_run_config(path: &Path) -> Result<RunConfig> {
    let bytes = fsutil::read(path)?;
    let config: RunConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.manifest)?;
    let config = match &a.config {
        Some(p) => read_run_config(p)?,
        None => RunConfig::desk(data.variant),
    };
    if config.model.variant != data.variant {
        return Err(Error::InvalidArgument(format!(
            "config variant {} does not match manifest variant {}",
            config.model.variant, data.variant
        )));
    }
    let store = CachedStore::new(FileLossStore::new(""));
    let set = TrainSet {
        trajectories: &data.trajectories,
        examples: &data.examples,
    };
    let outcome = train(set, &store, &config, a.seed)?;
    let trace_path = a
        .trace
        .clone()
        .unwrap_or_else(|| manifest::with_suffix(&a.out, ".loss.csv"));
    write_checkpoint(&a.out, &outcome.model, &config, a.seed)?;
    write_loss_trace(&trace_path, &outcome.trace)?;
    let mut m = RunManifest::new("train", a.config.as_deref(), Some(a.seed));
    m.input(&a.manifest)?;
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    m.output(&a.out)?;
    m.output(&trace_path)?;
    m.write(&manifest::sidecar(&a.out))?;
    if let Some(abort) = outcome.abort {
        return Err(Error::Numeric(format!(
            "training stopped at step {}: {}; kept the last finite parameters",
            abort.step, abort.detail
        )));
    }
    let first = outcome.trace.first().map_or(f64::NAN, |r| r.loss);
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "{} steps, loss {first:.6} -> {last:.6}",
        outcome.trace.len()
    );
    Ok(())
}

fn fit_logistic_cmd(a: FitLogisticArgs) -> Result<()> {
    let loaded = load_trajectories(&a.trajs)?;
    let store = CachedStore::new(FileLossStore::new(""));
    let mut pairs: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (_, traj) in &loaded {
        if !a.task.is_empty() && !a.task.contains(&traj.task_id) {
            continue;
        }
        let rows = pairs.entry(traj.task_id.clone()).or_default();
        for (c, &acc) in traj.accuracies.iter().enumerate() {
            rows.push((store.mean_loss(traj, c)?, acc));
        }
    }
    if let Some(missing) = a.task.iter().find(|t| !pairs.contains_key(*t)) {
        return Err(Error::Data(format!(
            "no runs of task {missing} in {}",
            a.trajs.display()
        )));
    }
    let mut fits = Vec::with_capacity(pairs.len());
    for (task, rows) in &pairs {
        let fit = fit_logistic(rows, a.seed)?;
        println!("{task}: sse {:.6} over {} points", fit.sse, fit.n_points);
        fits.push(TaskFit::new(task.clone(), &fit));
    }
    let mut json = serde_json::to_string_pretty(&fits).expect("fits serialize");
    json.push('\n');
    fsutil::atomic_write(&a.out, json.as_bytes())?;
    let mut m = RunManifest::new("fit-logistic", None, Some(a.seed));
    m.input(&a.trajs)?;
    m.output(&a.out)?;
    m.write(&manifest::sidecar(&a.out))
}

fn read_fits(path: &Path) -> Result<HashMap<String, nnsl::logfit::LogisticParams>> {
    let bytes = fsutil::read(path)?;
    let fits: Vec<TaskFit> = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail: e.to_string(),
    })?;
    Ok(fits
        .iter()
        .map(|f| (f.task_id.clone(), f.params()))
        .collect())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let trajs: Vec<Trajectory> = load_trajectories(&a.trajs)?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let store = CachedStore::new(FileLossStore::new(""));
    let oracle: Option<&dyn LossStore> = a.oracle_losses.then_some(&store as &dyn LossStore);
    let (method, records) = if let Some(ckpt) = &a.ckpt {
        let (model, _) = read_checkpoint(ckpt)?;
        let p = NeuralPredictor {
            model: &model,
            store: &store,
            oracle,
        };
        (model.variant().name().to_string(), run(&p, &trajs, a.frac)?)
    } else {
        let path = a
            .logistic
            .as_ref()
            .expect("clap requires --ckpt or --logistic");
        let fits = read_fits(path)?;
        let p = LogisticPredictor {
            fits: &fits,
            oracle,
        };
        ("logistic".to_string(), run(&p, &trajs, a.frac)?)
    };
    let report = EvalReport::from_records(&method, a.frac, records, a.seed)?;
    report.write(&a.report, a.csv.as_deref())?;
    println!(
        "{method}: mae {:.6}, coverage {:.4}, ranking {}",
        report.mae,
        report.coverage,
        report
            .ranking
            .as_ref()
            .map_or("n/a".into(), |r| format!("{:.4}", r.accuracy))
    );
    let mut m = RunManifest::new("evaluate", None, Some(a.seed));
    if let Some(c) = a.ckpt.as_ref().or(a.logistic.as_ref()) {
        m.input(c)?;
    }
    m.input(&a.trajs)?;
    m.output(&a.report)?;
    if let Some(csv) = &a.csv {
        m.output(csv)?;
    }
    m.write(&manifest::sidecar(&a.report))
}

fn run(
    p: &dyn Predictor,
    trajs: &[Trajectory],
    frac: f64,
) -> Result<Vec<nnsl::evalharness::EvalRecord>> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "--frac {frac} must lie in (0, 1)"
        )));
    }
    evaluate(p, trajs, frac)
}
