//! `modeforge`: preprocessing, mode discovery, weighted forecaster training,
//! evaluation and full experiment runs from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use modeforge::clustering::ClusteringState;
use modeforge::data::{load_windows, save_windows, TrackWindow};
use modeforge::error::ErrorKind;
use modeforge::evaluation::{aggregate_runs, evaluate_model, render_table, MetricMode, Partition, RunReport};
use modeforge::experiment::{
    grid_search_k, inspect_weights, load_checkpoint, load_summary, render_experiment_plots, run_experiment,
    run_from_manifest, ExperimentConfig, ModelKind, RunOptions, WeightOptions,
};
use modeforge::forecast::{train_baseline, train_ideal_cgan, train_vanilla_gan, BaselineTrainConfig, ModeWeights};
use modeforge::gan::{GanConfig, TrainLog};
use modeforge::ingest::{make_splits, preprocess, read_tabular_trajectories, DatasetProfile, Schema, SplitManifest, SplitSpec};
use modeforge::selfcond::{train_selfcond, SelfCondModel, SelfCondTrainConfig};
use modeforge::synth::{generate_benchmark, BenchmarkSpec};
use modeforge::util::{load_config, read_json, write_json};
use modeforge::weights::{compute_weights, ClusterStats, WeightTable};
use modeforge::{Error, Result};

#[derive(Parser)]
#[command(name = "modeforge", version, about = "Self-conditioned mode discovery and mode-weighted trajectory forecasters")]
struct Cli {
    /// Base directory for relative data paths that do not exist under the
    /// working directory.
    #[arg(long, global = true, env = "MODEFORGE_DATA_DIR")]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a tabular export, resample, interpolate, smooth, window and split.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic multi-mode benchmark.
    Synth(SynthArgs),
    /// Train the self-conditioned GAN and cluster the training set.
    TrainSelfcond(TrainSelfcondArgs),
    /// Choose the number of modes on validation data.
    GridSearchK(GridSearchArgs),
    /// Print per-mode statistics and weights.
    InspectWeights(InspectArgs),
    /// Train one forecaster setting for each seed.
    TrainForecaster(TrainForecasterArgs),
    /// Score checkpoints on test windows.
    Evaluate(EvaluateArgs),
    /// Aggregate metric files into tables.
    Report(ReportArgs),
    /// Render the figures of a finished experiment.
    Plot(PlotArgs),
    /// Run or resume a full experiment.
    Run(RunArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Delimited file with one row per detection.
    #[arg(long)]
    input: PathBuf,
    /// `default`, `argoverse`, or a schema file mapping column names.
    #[arg(long, default_value = "default")]
    schema: String,
    /// `thor`, `argoverse`, or a profile file.
    #[arg(long, default_value = "thor")]
    profile: String,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    /// Overrides the seed of the split spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Split spec file; without it all windows go to `windows.jsonl`.
    #[arg(long)]
    split_spec: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Benchmark spec file; defaults to the built-in desk-scale benchmark.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Writes a balanced set with this many windows per template instead.
    #[arg(long)]
    balanced: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSelfcondArgs {
    /// Self-conditioned training config (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training windows.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Latent seed for the per-cluster statistics.
    #[arg(long, default_value_t = 7)]
    stats_z_seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Mean)]
    metric_mode: Mode,
}

#[derive(Args)]
struct GridSearchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Validation windows.
    #[arg(long)]
    val: PathBuf,
    /// Candidate numbers of modes.
    #[arg(long, value_delimiter = ',', required = true)]
    k: Vec<usize>,
    /// Epoch budget per candidate.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    z_seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Mean)]
    metric_mode: Mode,
    /// Writes the result table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Cluster statistics JSON (as written by `train-selfcond`).
    #[arg(long, conflicts_with_all = ["model", "data"])]
    stats: Option<PathBuf>,
    /// Self-conditioned model directory.
    #[arg(long, requires = "data")]
    model: Option<PathBuf>,
    /// Training windows the model was clustered on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    lambda_ade: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_fde: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_d: f64,
    #[arg(long, default_value_t = 7)]
    stats_z_seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Mean)]
    metric_mode: Mode,
    /// Writes the weight table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainForecasterArgs {
    /// lstm, vanilla, wl2, wb, wl2wb or cgan-ideal.
    #[arg(long)]
    setting: String,
    /// GAN (or baseline, for `lstm`) config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Weight table JSON.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Cluster ids of the training windows: a JSON list or a clustering file.
    #[arg(long)]
    assignments: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Draw a cluster first, then a sample within it.
    #[arg(long)]
    cluster_first: bool,
    /// Use raw Λ as loss weights instead of rescaling them to mean one.
    #[arg(long)]
    raw_loss_weights: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint files or self-conditioned model directories.
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    /// Test windows.
    #[arg(long)]
    data: PathBuf,
    /// Self-conditioned model directory used for the cluster partition.
    #[arg(long)]
    clustering: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "label")]
    partitions: Vec<String>,
    #[arg(long, default_value_t = 1)]
    z_seed: u64,
    /// Latent draws per window; above one the lowest-ADE draw is scored.
    #[arg(long, default_value_t = 1)]
    num_samples: usize,
    /// Seed recorded in the reports.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Mean)]
    metric_mode: Mode,
    /// Output JSON with one report per checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Finished experiment directory.
    #[arg(long, conflicts_with = "inputs")]
    experiment: Option<PathBuf>,
    /// Metric JSON files (single reports or lists of reports).
    #[arg(long, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Writes the aggregated reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    experiment: PathBuf,
    /// Defaults to `<experiment>/figures`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Manifest of a previous run to reproduce.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Root of the experiment store.
    #[arg(long, default_value = "experiments")]
    out: PathBuf,
    /// Re-execute stages whose inputs changed instead of failing.
    #[arg(long)]
    rerun_stale: bool,
    /// Worker threads.
    #[arg(long, env = "MODEFORGE_JOBS")]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mean,
    Rmse,
}

impl From<Mode> for MetricMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Mean => MetricMode::Mean,
            Mode::Rmse => MetricMode::Rmse,
        }
    }
}

struct Ctx {
    data_dir: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(base) if p.is_relative() && !p.exists() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn windows(&self, p: &Path) -> Result<Vec<TrackWindow>> {
        load_windows(&self.path(p))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ctx = Ctx { data_dir: cli.data_dir };
    match dispatch(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}

fn dispatch(ctx: &Ctx, cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess(a) => cmd_preprocess(ctx, a),
        Command::Synth(a) => cmd_synth(a),
        Command::TrainSelfcond(a) => cmd_train_selfcond(ctx, a),
        Command::GridSearchK(a) => cmd_grid_search(ctx, a),
        Command::InspectWeights(a) => cmd_inspect(ctx, a),
        Command::TrainForecaster(a) => cmd_train_forecaster(ctx, a),
        Command::Evaluate(a) => cmd_evaluate(ctx, a),
        Command::Report(a) => cmd_report(a),
        Command::Plot(a) => {
            let out = a.out.unwrap_or_else(|| a.experiment.join("figures"));
            render_experiment_plots(&a.experiment, &out)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Run(a) => cmd_run(a),
    }
}

fn cmd_preprocess(ctx: &Ctx, a: PreprocessArgs) -> Result<()> {
    let schema = match a.schema.as_str() {
        "default" => Schema::default(),
        "argoverse" => Schema::argoverse(),
        path => Schema::load(Path::new(path))?,
    };
    let profile = match DatasetProfile::by_name(&a.profile) {
        Some(p) => p,
        None => load_config(Path::new(&a.profile))?,
    };
    profile.validate()?;
    let trajs = read_tabular_trajectories(&ctx.path(&a.input), &schema)?;
    let windows = preprocess(&trajs, &profile)?;
    log::info!("{} trajectories -> {} windows", trajs.len(), windows.len());
    match a.split_spec {
        None => save_windows(&a.output.join("windows.jsonl"), &windows),
        Some(p) => {
            let mut spec = SplitSpec::load(&p)?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let splits = make_splits(&windows, &spec)?;
            save_windows(&a.output.join("train.jsonl"), &splits.train)?;
            save_windows(&a.output.join("val.jsonl"), &splits.val)?;
            save_windows(&a.output.join("test.jsonl"), &splits.test)?;
            let manifest = SplitManifest::new(&splits, &spec, &profile);
            write_json(&a.output.join("split_manifest.json"), &manifest)?;
            println!("{}", serde_json::to_string_pretty(&manifest.counts).expect("serializable"));
            Ok(())
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => BenchmarkSpec::load(p)?,
        None => BenchmarkSpec::desk_default(0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.balanced {
        spec = spec.balanced(n, spec.seed);
    }
    let (windows, manifest) = generate_benchmark(&spec)?;
    save_windows(&a.out.join("windows.jsonl"), &windows)?;
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!("{} windows -> {}", windows.len(), a.out.display());
    Ok(())
}

fn write_logs(dir: &Path, log: &TrainLog) -> Result<()> {
    log.write_epoch_csv(&dir.join("epochs.csv"))?;
    log.write_step_csv(&dir.join("steps.csv"))
}

fn cmd_train_selfcond(ctx: &Ctx, a: TrainSelfcondArgs) -> Result<()> {
    let mut cfg: SelfCondTrainConfig = match &a.config {
        Some(p) => load_config(p)?,
        None => SelfCondTrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.gan.seed = s;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(e) = a.epochs {
        cfg.gan.epochs = e;
    }
    let train = ctx.windows(&a.data)?;
    let out = train_selfcond(&train, &cfg)?;
    out.model.save(&a.out_dir)?;
    write_logs(&a.out_dir, &out.log)?;
    write_json(&a.out_dir.join("config.json"), &cfg)?;
    let opts = WeightOptions {
        stats_z_seed: a.stats_z_seed,
        ..WeightOptions::default()
    };
    let (stats, table) = inspect_weights(&out.model, &train, &opts, a.metric_mode.into())?;
    write_json(&a.out_dir.join("cluster_stats.json"), &stats)?;
    write_json(&a.out_dir.join("weight_table.json"), &table)?;
    print!("{}", table.render(&stats));
    Ok(())
}

fn cmd_grid_search(ctx: &Ctx, a: GridSearchArgs) -> Result<()> {
    let mut cfg: SelfCondTrainConfig = match &a.config {
        Some(p) => load_config(p)?,
        None => SelfCondTrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.gan.epochs = e;
    }
    let train = ctx.windows(&a.data)?;
    let val = ctx.windows(&a.val)?;
    let r = grid_search_k(&train, &val, &cfg, &a.k, a.z_seed, a.metric_mode.into())?;
    print!("{}", r.render());
    println!("best k = {}", r.best_k);
    if let Some(p) = a.out {
        write_json(&p, &r)?;
    }
    Ok(())
}

fn cmd_inspect(ctx: &Ctx, a: InspectArgs) -> Result<()> {
    let opts = WeightOptions {
        lambda_ade: a.lambda_ade,
        lambda_fde: a.lambda_fde,
        lambda_d: a.lambda_d,
        stats_z_seed: a.stats_z_seed,
        ..WeightOptions::default()
    };
    let (stats, table): (Vec<ClusterStats>, WeightTable) = match (&a.stats, &a.model, &a.data) {
        (Some(p), _, _) => {
            let stats: Vec<ClusterStats> = read_json(p)?;
            let table = compute_weights(&stats, opts.lambdas())?;
            (stats, table)
        }
        (None, Some(m), Some(d)) => inspect_weights(&SelfCondModel::load(m)?, &ctx.windows(d)?, &opts, a.metric_mode.into())?,
        _ => return Err(Error::Config("pass --stats, or --model with --data".into())),
    };
    print!("{}", table.render(&stats));
    if let Some(p) = a.out {
        write_json(&p, &table)?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Assignments {
    Ids(Vec<usize>),
    Clustering(ClusteringState),
}

fn cmd_train_forecaster(ctx: &Ctx, a: TrainForecasterArgs) -> Result<()> {
    let model = ModelKind::from_name(&a.setting)?;
    let train = ctx.windows(&a.data)?;
    if model == ModelKind::SelfcondIdeal {
        return Err(Error::Config(
            "selfcond-ideal is the generator of `train-selfcond`; evaluate its output directory".into(),
        ));
    }
    let (table, ids) = if model.uses_weights() {
        let (Some(w), Some(s)) = (&a.weights, &a.assignments) else {
            return Err(Error::Config(format!("setting `{}` needs --weights and --assignments", a.setting)));
        };
        let table: WeightTable = read_json(w)?;
        let ids = match read_json::<Assignments>(s)? {
            Assignments::Ids(v) => v,
            Assignments::Clustering(c) => c.cluster_ids,
        };
        (Some(table), ids)
    } else {
        (None, Vec::new())
    };
    for &seed in &a.seeds {
        let dir = a.out_dir.join(model.name()).join(seed.to_string());
        let path = dir.join("model.json");
        let log = if model == ModelKind::Lstm {
            let mut cfg: BaselineTrainConfig = match &a.config {
                Some(p) => load_config(p)?,
                None => BaselineTrainConfig::default(),
            };
            cfg.seed = seed;
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            let (m, log) = train_baseline(&train, &cfg)?;
            m.save(&path)?;
            log
        } else {
            let mut cfg: GanConfig = match &a.config {
                Some(p) => load_config(p)?,
                None => GanConfig::default(),
            };
            cfg.seed = seed;
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            let (m, log) = match (model, &table) {
                (ModelKind::CganIdeal, _) => train_ideal_cgan(&train, &cfg)?,
                (_, Some(t)) => train_vanilla_gan(
                    &train,
                    &cfg,
                    model.weight_setting().expect("GAN setting"),
                    Some(ModeWeights {
                        table: t,
                        cluster_ids: &ids,
                        cluster_first: a.cluster_first,
                        normalize_loss_weights: !a.raw_loss_weights,
                    }),
                )?,
                _ => train_vanilla_gan(&train, &cfg, model.weight_setting().expect("GAN setting"), None)?,
            };
            m.save(&path)?;
            log
        };
        write_logs(&dir, &log)?;
        log::info!("{} seed {seed} -> {}", model.name(), path.display());
    }
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let test = ctx.windows(&a.data)?;
    let mut partitions = Vec::new();
    for p in &a.partitions {
        match p.as_str() {
            "label" => partitions.push(Partition::by_label(&test)),
            "cluster" => {
                let dir = a
                    .clustering
                    .as_ref()
                    .ok_or_else(|| Error::Config("the cluster partition needs --clustering".into()))?;
                let sc = SelfCondModel::load(dir)?;
                partitions.push(Partition::by_cluster(&sc.assign(&test)?, sc.k()));
            }
            other => return Err(Error::Config(format!("unknown partition `{other}`"))),
        }
    }
    let mut reports = Vec::new();
    for c in &a.checkpoints {
        let model = load_checkpoint(c)?;
        reports.push(evaluate_model(
            model.as_ref(),
            a.seed,
            &test,
            &partitions,
            a.z_seed,
            a.num_samples,
            a.metric_mode.into(),
        )?);
    }
    print_tables(&reports, &a.partitions)?;
    if let Some(p) = a.out {
        write_json(&p, &reports)?;
    }
    Ok(())
}

fn print_tables(reports: &[RunReport], partitions: &[String]) -> Result<()> {
    let mut by_model: Vec<Vec<RunReport>> = Vec::new();
    for r in reports {
        match by_model.iter_mut().find(|g| g[0].model == r.model) {
            Some(g) => g.push(r.clone()),
            None => by_model.push(vec![r.clone()]),
        }
    }
    let agg = by_model.iter().map(|g| aggregate_runs(g)).collect::<Result<Vec<_>>>()?;
    println!("{}", render_table("overall", &agg, None));
    for p in partitions {
        println!("{}", render_table(&format!("per {p}"), &agg, Some(p)));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MetricFile {
    One(RunReport),
    Many(Vec<RunReport>),
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if let Some(exp) = a.experiment {
        let s = load_summary(&exp)?;
        println!("{}", render_table("overall", &s.models, None));
        println!("{}", render_table("per label", &s.models, Some("label")));
        println!("{}", render_table("per cluster", &s.models, Some("cluster")));
        for p in &s.probes {
            println!(
                "seed {}: mode recovery train {:.3} test {:.3}, true mode wins {}/{}",
                p.seed, p.train_recovery, p.test_recovery, p.wrong_mode.true_mode_wins, p.wrong_mode.windows
            );
        }
        if let Some(out) = a.out {
            write_json(&out, &s)?;
        }
        return Ok(());
    }
    if a.inputs.is_empty() {
        return Err(Error::Config("pass --experiment or --inputs".into()));
    }
    let mut reports = Vec::new();
    for p in &a.inputs {
        match read_json::<MetricFile>(p)? {
            MetricFile::One(r) => reports.push(r),
            MetricFile::Many(v) => reports.extend(v),
        }
    }
    let partitions: Vec<String> = reports[0].partitions.iter().map(|p| p.name.clone()).collect();
    print_tables(&reports, &partitions)?;
    if let Some(out) = a.out {
        write_json(&out, &reports)?;
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let opts = RunOptions {
        rerun_stale: a.rerun_stale,
        jobs: a.jobs,
    };
    let outcome = match (&a.config, &a.manifest) {
        (Some(c), _) => run_experiment(&ExperimentConfig::load(c)?, &a.out, opts)?,
        (None, Some(m)) => run_from_manifest(m, &a.out, opts)?,
        (None, None) => return Err(Error::Config("pass --config or --manifest".into())),
    };
    log::info!(
        "{} stages executed, {} reused",
        outcome.executed.len(),
        outcome.reused.len()
    );
    let s = load_summary(&outcome.dir)?;
    println!("{}", render_table("overall", &s.models, None));
    println!("{}", outcome.dir.join("manifest.json").display());
    Ok(())
}
