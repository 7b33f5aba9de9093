//! Experiment orchestration over a plain-file store.
//!
//! Stages run in a fixed dependency order:
//! `data -> selfcond/{seed} -> weights/{seed} -> forecaster/{model}/{seed}
//! -> evaluate/{model}/{seed} -> report -> plots`. Every stage directory holds
//! a `stage.json` with a content key derived from its configuration and the
//! keys of its inputs; a stage whose key matches is reused, a stage whose key
//! differs is an error unless stale stages may be re-run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_windows, save_windows, TrackWindow};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_runs, evaluate_model, evaluate_predictions, render_table, AggregateReport, MetricMode, Partition, RunReport};
use crate::forecast::{
    train_baseline, train_ideal_cgan, train_vanilla_gan, BaselineForecaster, BaselineTrainConfig, GanForecaster,
    ModeWeights, Predictor, WeightSetting,
};
use crate::gan::{GanConfig, TrainLog};
use crate::ingest::label_counts;
use crate::nn::{row_to_points, Checkpoint};
use crate::plots;
use crate::selfcond::{
    intra_cluster_metrics, train_selfcond, window_shape, wrong_mode_probe, SelfCondModel, SelfCondTrainConfig,
    WrongModeProbe,
};
use crate::synth::{generate_benchmark, mode_recovery_score, BenchmarkSpec};
use crate::util::{read_json, sha256_hex, sha256_json, write_json};
use crate::weights::{compute_weights, ClusterStats, Lambdas, WeightTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lstm,
    Vanilla,
    Wl2,
    Wb,
    Wl2wb,
    CganIdeal,
    SelfcondIdeal,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Lstm,
        ModelKind::Vanilla,
        ModelKind::Wl2,
        ModelKind::Wb,
        ModelKind::Wl2wb,
        ModelKind::CganIdeal,
        ModelKind::SelfcondIdeal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::Vanilla => "vanilla",
            ModelKind::Wl2 => "wl2",
            ModelKind::Wb => "wb",
            ModelKind::Wl2wb => "wl2wb",
            ModelKind::CganIdeal => "cgan-ideal",
            ModelKind::SelfcondIdeal => "selfcond-ideal",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown model `{name}`")))
    }

    pub fn weight_setting(self) -> Option<WeightSetting> {
        match self {
            ModelKind::Vanilla => Some(WeightSetting::None),
            ModelKind::Wl2 => Some(WeightSetting::Wl2),
            ModelKind::Wb => Some(WeightSetting::Wb),
            ModelKind::Wl2wb => Some(WeightSetting::Wl2wb),
            _ => None,
        }
    }

    pub fn uses_weights(self) -> bool {
        self.weight_setting().is_some_and(|s| s != WeightSetting::None)
    }

    /// Models with their own training stage; the ideal self-conditioned
    /// model reuses the mode-discovery networks.
    pub fn trains(self) -> bool {
        self != ModelKind::SelfcondIdeal
    }
}

/// A benchmark spec given inline or as a path to a spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecRef {
    Inline(BenchmarkSpec),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// Training set from the spec (with `train_seed`), balanced test and
    /// validation sets from the same templates.
    Synthetic {
        spec: SpecRef,
        train_seed: u64,
        test_per_template: usize,
        test_seed: u64,
        #[serde(default)]
        val_per_template: usize,
        #[serde(default)]
        val_seed: u64,
    },
    /// Preprocessed window files.
    Windows {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        val: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightOptions {
    pub lambda_ade: f64,
    pub lambda_fde: f64,
    pub lambda_d: f64,
    pub cluster_first_sampling: bool,
    pub normalize_loss_weights: bool,
    /// Latent seed for the per-cluster statistics.
    pub stats_z_seed: u64,
}

impl Default for WeightOptions {
    fn default() -> Self {
        WeightOptions {
            lambda_ade: 1.0,
            lambda_fde: 1.0,
            lambda_d: 1.0,
            cluster_first_sampling: false,
            normalize_loss_weights: true,
            stats_z_seed: 7,
        }
    }
}

impl WeightOptions {
    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            ade: self.lambda_ade,
            fde: self.lambda_fde,
            density: self.lambda_d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotOptions {
    pub enabled: bool,
    pub overlays_per_label: usize,
    pub gallery_tracks: usize,
    pub wrong_mode_windows: usize,
    /// Modes drawn per wrong-mode figure, the true one included.
    pub modes_per_figure: usize,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions {
            enabled: true,
            overlays_per_label: 1,
            gallery_tracks: 40,
            wrong_mode_windows: 3,
            modes_per_figure: 4,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

fn default_z_seed() -> u64 {
    1
}

fn default_num_samples() -> usize {
    1
}

/// Full experiment description. The `seed` fields of the nested training
/// configs are replaced by each entry of `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub metric_mode: MetricMode,
    /// Latent seed used for every evaluation.
    #[serde(default = "default_z_seed")]
    pub z_seed: u64,
    /// Latent draws per window; above one the lowest-ADE draw is scored.
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub selfcond: SelfCondTrainConfig,
    #[serde(default)]
    pub forecaster: GanConfig,
    /// Defaults to the forecaster's budget and sizes.
    #[serde(default)]
    pub baseline: Option<BaselineTrainConfig>,
    #[serde(default)]
    pub weights: WeightOptions,
    #[serde(default)]
    pub plots: PlotOptions,
}

impl ExperimentConfig {
    /// Loads a TOML or JSON config; relative paths are resolved against the
    /// config's directory and spec files are inlined.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = crate::util::load_config(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) -> Result<()> {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        match &mut self.data {
            DataConfig::Synthetic { spec, .. } => {
                if let SpecRef::Path(p) = spec {
                    *spec = SpecRef::Inline(BenchmarkSpec::load(&abs(p))?);
                }
            }
            DataConfig::Windows { train, test, val } => {
                *train = abs(train);
                *test = abs(test);
                if let Some(v) = val {
                    *v = abs(v);
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment name `{}` is not a valid directory name", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be >= 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        self.selfcond.validate()?;
        self.forecaster.validate()?;
        if let DataConfig::Synthetic { spec: SpecRef::Inline(s), .. } = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_json(self)
    }

    pub fn selfcond_for(&self, seed: u64) -> SelfCondTrainConfig {
        let mut c = self.selfcond.clone();
        c.gan.seed = seed;
        c
    }

    pub fn forecaster_for(&self, seed: u64) -> GanConfig {
        let mut c = self.forecaster.clone();
        c.seed = seed;
        c
    }

    pub fn baseline_for(&self, seed: u64) -> BaselineTrainConfig {
        let mut c = self.baseline.clone().unwrap_or_else(|| BaselineTrainConfig::from_gan(&self.forecaster));
        c.seed = seed;
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    /// Files written by the stage, relative to the experiment directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub lambdas: Lambdas,
    pub metric_mode: MetricMode,
    pub cluster_first_sampling: bool,
    pub normalize_loss_weights: bool,
    pub z_seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.config.hash() != m.config_hash {
            return Err(Error::Config(format!("{}: config does not match its recorded hash", path.display())));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Re-execute stages whose recorded key no longer matches.
    pub rerun_stale: bool,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub executed: Vec<String>,
    pub reused: Vec<String>,
    pub manifest: Manifest,
}

struct Store {
    root: PathBuf,
    rerun_stale: bool,
    records: Mutex<BTreeMap<String, StageRecord>>,
    executed: Mutex<Vec<String>>,
    reused: Mutex<Vec<String>>,
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != "stage.json") {
            let rel = p.strip_prefix(root).expect("inside root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

impl Store {
    fn new(root: PathBuf, rerun_stale: bool) -> Self {
        Store {
            root,
            rerun_stale,
            records: Mutex::default(),
            executed: Mutex::default(),
            reused: Mutex::default(),
        }
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    /// Runs `f` in the stage directory unless a record with `key` exists.
    fn stage(&self, stage: &str, key: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let dir = self.dir(stage);
        let rec_path = dir.join("stage.json");
        if rec_path.exists() {
            let rec: StageRecord = read_json(&rec_path)?;
            if rec.key == key {
                log::debug!("stage {stage}: cached");
                self.reused.lock().expect("lock").push(stage.to_string());
                self.records.lock().expect("lock").insert(stage.to_string(), rec);
                return Ok(());
            }
            if !self.rerun_stale {
                return Err(Error::StaleCache {
                    stage: stage.to_string(),
                    recorded: rec.key,
                    expected: key.to_string(),
                });
            }
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        log::info!("stage {stage}: running");
        f(&dir).inspect_err(|e| log::error!("stage {stage} failed: {e}"))?;
        let mut files = Vec::new();
        list_files(&self.root, &dir, &mut files)?;
        let rec = StageRecord {
            stage: stage.to_string(),
            key: key.to_string(),
            files,
        };
        write_json(&rec_path, &rec)?;
        self.executed.lock().expect("lock").push(stage.to_string());
        self.records.lock().expect("lock").insert(stage.to_string(), rec);
        Ok(())
    }
}

fn stage_key<T: Serialize>(stage: &str, payload: &T, inputs: &[&str]) -> String {
    sha256_json(&(stage, payload, inputs))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Train, test and optional validation windows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentData {
    pub train: Vec<TrackWindow>,
    pub test: Vec<TrackWindow>,
    pub val: Vec<TrackWindow>,
}

/// Builds the datasets described by `cfg` without touching the store.
pub fn materialize_data(cfg: &DataConfig) -> Result<ExperimentData> {
    match cfg {
        DataConfig::Synthetic {
            spec,
            train_seed,
            test_per_template,
            test_seed,
            val_per_template,
            val_seed,
        } => {
            let spec = match spec {
                SpecRef::Inline(s) => s.clone(),
                SpecRef::Path(p) => BenchmarkSpec::load(p)?,
            };
            let mut train_spec = spec.clone();
            train_spec.seed = *train_seed;
            let train = generate_benchmark(&train_spec)?.0;
            let test = generate_benchmark(&spec.balanced(*test_per_template, *test_seed))?.0;
            let val = if *val_per_template > 0 {
                generate_benchmark(&spec.balanced(*val_per_template, *val_seed))?.0
            } else {
                Vec::new()
            };
            Ok(ExperimentData { train, test, val })
        }
        DataConfig::Windows { train, test, val } => Ok(ExperimentData {
            train: load_windows(train)?,
            test: load_windows(test)?,
            val: match val {
                Some(v) => load_windows(v)?,
                None => Vec::new(),
            },
        }),
    }
}

fn data_payload(cfg: &DataConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::json!({ "config": cfg });
    if let DataConfig::Windows { train, test, val } = cfg {
        let mut hashes = vec![file_hash(train)?, file_hash(test)?];
        if let Some(p) = val {
            hashes.push(file_hash(p)?);
        }
        v["file_hashes"] = serde_json::json!(hashes);
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCondSummary {
    pub seed: u64,
    pub k: usize,
    pub clustering_round: usize,
    pub cluster_counts: Vec<usize>,
    /// Agreement of the final training clustering with the supervised labels.
    pub train_recovery: f64,
}

/// Results that are not ADE/FDE tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seed: u64,
    pub train_recovery: f64,
    pub test_recovery: f64,
    pub wrong_mode: WrongModeProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub metric_mode: MetricMode,
    pub models: Vec<AggregateReport>,
    pub probes: Vec<ProbeReport>,
}

impl ExperimentSummary {
    pub fn model(&self, name: &str) -> Option<&AggregateReport> {
        self.models.iter().find(|m| m.model == name)
    }
}

fn selfcond_stage(seed: u64) -> String {
    format!("selfcond/{seed}")
}

fn weights_stage(seed: u64) -> String {
    format!("weights/{seed}")
}

fn forecaster_stage(m: ModelKind, seed: u64) -> String {
    format!("forecaster/{}/{seed}", m.name())
}

fn evaluate_stage(m: ModelKind, seed: u64) -> String {
    format!("evaluate/{}/{seed}", m.name())
}

fn write_logs(dir: &Path, log: &TrainLog) -> Result<()> {
    log.write_epoch_csv(&dir.join("epochs.csv"))?;
    log.write_step_csv(&dir.join("steps.csv"))
}

/// Loads a trained model of an experiment directory.
pub fn load_predictor(exp_dir: &Path, model: ModelKind, seed: u64) -> Result<Box<dyn Predictor>> {
    Ok(match model {
        ModelKind::SelfcondIdeal => Box::new(SelfCondModel::load(&exp_dir.join(selfcond_stage(seed)))?),
        ModelKind::Lstm => Box::new(BaselineForecaster::load(
            &exp_dir.join(forecaster_stage(model, seed)).join("model.json"),
        )?),
        _ => Box::new(GanForecaster::load(&exp_dir.join(forecaster_stage(model, seed)).join("model.json"))?),
    })
}

/// Loads any saved forecaster: a self-conditioned model directory, or a
/// baseline or GAN checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Box<dyn Predictor>> {
    if path.is_dir() {
        return Ok(Box::new(SelfCondModel::load(path)?));
    }
    match Checkpoint::load(path)?.kind.as_str() {
        "baseline-forecaster" => Ok(Box::new(BaselineForecaster::load(path)?)),
        "gan-forecaster" => Ok(Box::new(GanForecaster::load(path)?)),
        other => Err(Error::Config(format!(
            "{}: `{other}` checkpoints are not forecasters",
            path.display()
        ))),
    }
}

/// Re-renders the figures of a finished experiment into `out_dir`.
pub fn render_experiment_plots(exp_dir: &Path, out_dir: &Path) -> Result<()> {
    let m = Manifest::load(&exp_dir.join("manifest.json"))?;
    let train = load_windows(&exp_dir.join("data").join("train.jsonl"))?;
    let test = load_windows(&exp_dir.join("data").join("test.jsonl"))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    render_plots(&m.config, exp_dir, &train, &test, out_dir)
}

/// Runs (or resumes) an experiment under `out_root/{name}`.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path, opts: RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| run_inner(cfg, out_root, opts)),
        None => run_inner(cfg, out_root, opts),
    }
}

/// Re-runs the experiment recorded in a manifest.
pub fn run_from_manifest(manifest: &Path, out_root: &Path, opts: RunOptions) -> Result<ExperimentOutcome> {
    let m = Manifest::load(manifest)?;
    run_experiment(&m.config, out_root, opts)
}

fn run_inner(cfg: &ExperimentConfig, out_root: &Path, opts: RunOptions) -> Result<ExperimentOutcome> {
    let root = out_root.join(&cfg.name);
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let store = Store::new(root.clone(), opts.rerun_stale);
    let mode = cfg.metric_mode;

    let data_key = stage_key("data", &data_payload(&cfg.data)?, &[]);
    store.stage("data", &data_key, |dir| {
        let d = materialize_data(&cfg.data)?;
        window_shape(&d.train)?;
        window_shape(&d.test)?;
        save_windows(&dir.join("train.jsonl"), &d.train)?;
        save_windows(&dir.join("test.jsonl"), &d.test)?;
        if !d.val.is_empty() {
            save_windows(&dir.join("val.jsonl"), &d.val)?;
        }
        let counts: BTreeMap<&str, BTreeMap<String, usize>> =
            [("train", label_counts(&d.train)), ("test", label_counts(&d.test)), ("val", label_counts(&d.val))]
                .into_iter()
                .collect();
        write_json(&dir.join("counts.json"), &counts)
    })?;
    let train = load_windows(&store.dir("data").join("train.jsonl"))?;
    let test = load_windows(&store.dir("data").join("test.jsonl"))?;

    let sc_keys: Vec<String> = cfg
        .seeds
        .iter()
        .map(|&s| stage_key("selfcond", &cfg.selfcond_for(s), &[&data_key]))
        .collect();
    cfg.seeds.iter().zip(&sc_keys).try_for_each(|(&seed, key)| {
        store.stage(&selfcond_stage(seed), key, |dir| {
            let out = train_selfcond(&train, &cfg.selfcond_for(seed))?;
            out.model.save(dir)?;
            write_logs(dir, &out.log)?;
            let labels: Vec<String> = train.iter().map(|w| w.label.clone()).collect();
            let c = &out.model.clustering;
            write_json(
                &dir.join("summary.json"),
                &SelfCondSummary {
                    seed,
                    k: c.k,
                    clustering_round: c.round,
                    cluster_counts: c.counts(),
                    train_recovery: mode_recovery_score(&c.cluster_ids, &labels),
                },
            )
        })
    })?;

    let weight_payload = (&cfg.weights, mode);
    let w_keys: Vec<String> = sc_keys
        .iter()
        .map(|k| stage_key("weights", &weight_payload, &[k]))
        .collect();
    for (&seed, key) in cfg.seeds.iter().zip(&w_keys) {
        store.stage(&weights_stage(seed), key, |dir| {
            let model = SelfCondModel::load(&store.dir(&selfcond_stage(seed)))?;
            let ids = &model.clustering.cluster_ids;
            let stats = intra_cluster_metrics(&model, &train, ids, cfg.weights.stats_z_seed, mode)?;
            let table = compute_weights(&stats, cfg.weights.lambdas())?;
            write_json(&dir.join("cluster_stats.json"), &stats)?;
            write_json(&dir.join("weight_table.json"), &table)?;
            std::fs::write(dir.join("weights.txt"), table.render(&stats)).map_err(|e| Error::io(dir, e))
        })?;
    }

    let trained: Vec<ModelKind> = cfg.models.iter().copied().filter(|m| m.trains()).collect();
    let jobs: Vec<(ModelKind, usize)> = trained
        .iter()
        .flat_map(|&m| (0..cfg.seeds.len()).map(move |i| (m, i)))
        .collect();
    let model_key = |m: ModelKind, i: usize| -> String {
        let seed = cfg.seeds[i];
        match m {
            ModelKind::SelfcondIdeal => sc_keys[i].clone(),
            ModelKind::Lstm => stage_key("forecaster", &(m, cfg.baseline_for(seed)), &[&data_key]),
            _ if m.uses_weights() => stage_key(
                "forecaster",
                &(m, cfg.forecaster_for(seed), &cfg.weights),
                &[&data_key, &w_keys[i]],
            ),
            _ => stage_key("forecaster", &(m, cfg.forecaster_for(seed)), &[&data_key]),
        }
    };
    jobs.par_iter().try_for_each(|&(m, i)| {
        let seed = cfg.seeds[i];
        store.stage(&forecaster_stage(m, seed), &model_key(m, i), |dir| {
            let path = dir.join("model.json");
            let log = match m {
                ModelKind::Lstm => {
                    let (model, log) = train_baseline(&train, &cfg.baseline_for(seed))?;
                    model.save(&path)?;
                    log
                }
                ModelKind::CganIdeal => {
                    let (model, log) = train_ideal_cgan(&train, &cfg.forecaster_for(seed))?;
                    model.save(&path)?;
                    log
                }
                _ => {
                    let setting = m.weight_setting().expect("GAN setting");
                    let (table, sc);
                    let weights = if m.uses_weights() {
                        table = read_json::<WeightTable>(&store.dir(&weights_stage(seed)).join("weight_table.json"))?;
                        sc = SelfCondModel::load(&store.dir(&selfcond_stage(seed)))?;
                        Some(ModeWeights {
                            table: &table,
                            cluster_ids: &sc.clustering.cluster_ids,
                            cluster_first: cfg.weights.cluster_first_sampling,
                            normalize_loss_weights: cfg.weights.normalize_loss_weights,
                        })
                    } else {
                        None
                    };
                    let (model, log) = train_vanilla_gan(&train, &cfg.forecaster_for(seed), setting, weights)?;
                    model.save(&path)?;
                    log
                }
            };
            write_logs(dir, &log)
        })
    })?;

    // clusters of the first seed define the per-cluster partition of every run
    let partition_model = SelfCondModel::load(&store.dir(&selfcond_stage(cfg.seeds[0])))?;
    let test_clusters = partition_model.assign(&test)?;
    let partitions = [Partition::by_label(&test), Partition::by_cluster(&test_clusters, partition_model.k())];
    let eval_payload = (cfg.z_seed, cfg.num_samples, mode);
    let eval_keys: BTreeMap<(ModelKind, usize), String> = cfg
        .models
        .iter()
        .flat_map(|&m| (0..cfg.seeds.len()).map(move |i| (m, i)))
        .map(|(m, i)| {
            let key = stage_key("evaluate", &eval_payload, &[&data_key, &model_key(m, i), &sc_keys[0]]);
            ((m, i), key)
        })
        .collect();
    eval_keys.par_iter().try_for_each(|(&(m, i), key)| {
        let seed = cfg.seeds[i];
        store.stage(&evaluate_stage(m, seed), key, |dir| {
            let model = load_predictor(&root, m, seed)?;
            let report = evaluate_model(model.as_ref(), seed, &test, &partitions, cfg.z_seed, cfg.num_samples, mode)?;
            write_json(&dir.join("metrics.json"), &report)
        })
    })?;

    let all_eval: Vec<&str> = eval_keys.values().map(String::as_str).collect();
    let mut report_inputs = all_eval.clone();
    report_inputs.extend(sc_keys.iter().map(String::as_str));
    let report_key = stage_key("report", &(&cfg.models, &cfg.seeds, cfg.z_seed, mode), &report_inputs);
    store.stage("report", &report_key, |dir| {
        let mut models = Vec::new();
        for &m in &cfg.models {
            let runs: Vec<RunReport> = cfg
                .seeds
                .iter()
                .map(|&s| read_json(&store.dir(&evaluate_stage(m, s)).join("metrics.json")))
                .collect::<Result<_>>()?;
            models.push(aggregate_runs(&runs)?);
        }
        let probes = cfg
            .seeds
            .iter()
            .map(|&seed| -> Result<ProbeReport> {
                let sc = SelfCondModel::load(&store.dir(&selfcond_stage(seed)))?;
                let summary: SelfCondSummary = read_json(&store.dir(&selfcond_stage(seed)).join("summary.json"))?;
                let labels: Vec<String> = test.iter().map(|w| w.label.clone()).collect();
                Ok(ProbeReport {
                    seed,
                    train_recovery: summary.train_recovery,
                    test_recovery: mode_recovery_score(&sc.assign(&test)?, &labels),
                    wrong_mode: wrong_mode_probe(&sc, &test, cfg.z_seed, seed, mode)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = ExperimentSummary {
            name: cfg.name.clone(),
            metric_mode: mode,
            models,
            probes,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        for (file, title, part) in [
            ("overall.txt", "overall", None),
            ("by_label.txt", "per label", Some("label")),
            ("by_cluster.txt", "per cluster", Some("cluster")),
        ] {
            let table = render_table(title, &summary.models, part);
            std::fs::write(dir.join(file), table).map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    })?;

    if cfg.plots.enabled {
        let plots_key = stage_key("plots", &cfg.plots, &[&report_key]);
        store.stage("plots", &plots_key, |dir| render_plots(cfg, &root, &train, &test, dir))?;
    }

    let manifest = Manifest {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        lambdas: cfg.weights.lambdas(),
        metric_mode: mode,
        cluster_first_sampling: cfg.weights.cluster_first_sampling,
        normalize_loss_weights: cfg.weights.normalize_loss_weights,
        z_seed: cfg.z_seed,
        stages: store.records.into_inner().expect("lock"),
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(ExperimentOutcome {
        dir: root,
        executed: store.executed.into_inner().expect("lock"),
        reused: store.reused.into_inner().expect("lock"),
        manifest,
    })
}

fn render_plots(cfg: &ExperimentConfig, root: &Path, train: &[TrackWindow], test: &[TrackWindow], dir: &Path) -> Result<()> {
    let seed = cfg.seeds[0];
    let opts = &cfg.plots;
    let mut chosen: Vec<usize> = Vec::new();
    let mut per_label: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, w) in test.iter().enumerate() {
        let n = per_label.entry(&w.label).or_default();
        if *n < opts.overlays_per_label {
            *n += 1;
            chosen.push(i);
        }
    }
    let subset: Vec<TrackWindow> = chosen.iter().map(|&i| test[i].clone()).collect();
    if !subset.is_empty() {
        let mut preds = Vec::new();
        for &m in &cfg.models {
            preds.push((m.name().to_string(), load_predictor(root, m, seed)?.predict(&subset, cfg.z_seed)?));
        }
        for (i, w) in subset.iter().enumerate() {
            let lines: Vec<_> = preds.iter().map(|(n, p)| (n.clone(), row_to_points(p, i))).collect();
            plots::forecast_overlay(dir, &cfg.name, w, &lines)?;
        }
    }

    let sc = SelfCondModel::load(&root.join(selfcond_stage(seed)))?;
    for c in 0..sc.k() {
        plots::cluster_gallery(dir, &cfg.name, train, &sc.clustering.cluster_ids, c, opts.gallery_tracks)?;
    }

    let n = opts.wrong_mode_windows.min(test.len());
    if n > 0 && sc.k() > 1 {
        let probe = &test[..n];
        let truth = sc.assign(probe)?;
        let shown = opts.modes_per_figure.clamp(1, sc.k());
        let mut per_window: Vec<Vec<(usize, Vec<crate::data::Point2>)>> = vec![Vec::new(); n];
        for j in 0..shown {
            let ids: Vec<usize> = truth.iter().map(|&c| (c + j) % sc.k()).collect();
            let pred = sc.predict_with_modes(probe, &ids, cfg.z_seed)?;
            for (i, rows) in per_window.iter_mut().enumerate() {
                rows.push((ids[i], row_to_points(&pred, i)));
            }
        }
        for (i, rows) in per_window.iter().enumerate() {
            plots::wrong_mode_comparison(dir, &cfg.name, &probe[i], truth[i], rows)?;
        }
    }
    Ok(())
}

/// Reads the summary written by the report stage.
pub fn load_summary(exp_dir: &Path) -> Result<ExperimentSummary> {
    read_json(&exp_dir.join("report").join("summary.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCandidate {
    pub k: usize,
    /// Validation metrics; `None` when the candidate was not trained.
    pub ade: Option<f64>,
    pub fde: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_k: usize,
    pub metric_mode: MetricMode,
    pub candidates: Vec<KCandidate>,
}

impl GridSearchResult {
    pub fn render(&self) -> String {
        let mut s = format!("{:>4}  {:>8}  {:>8}\n", "k", "ADE", "FDE");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        for c in &self.candidates {
            let mark = if c.k == self.best_k { "  *" } else { "" };
            s.push_str(&format!("{:>4}  {:>8}  {:>8}{mark}\n", c.k, fmt(c.ade), fmt(c.fde)));
        }
        s
    }
}

/// Candidate with the lowest validation ADE; ties go to the smaller k.
pub fn select_best_k(candidates: &[KCandidate]) -> Option<usize> {
    candidates
        .iter()
        .min_by(|a, b| {
            let (x, y) = (a.ade.unwrap_or(f64::INFINITY), b.ade.unwrap_or(f64::INFINITY));
            x.total_cmp(&y).then(a.k.cmp(&b.k))
        })
        .map(|c| c.k)
}

/// Trains a self-conditioned GAN per candidate k and scores its generator on
/// the validation windows conditioned on their assigned modes.
pub fn grid_search_k(
    train: &[TrackWindow],
    val: &[TrackWindow],
    base: &SelfCondTrainConfig,
    ks: &[usize],
    z_seed: u64,
    mode: MetricMode,
) -> Result<GridSearchResult> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    match ks.as_slice() {
        [] => Err(Error::Config("grid search needs at least one k".into())),
        [k] => Ok(GridSearchResult {
            best_k: *k,
            metric_mode: mode,
            candidates: vec![KCandidate { k: *k, ade: None, fde: None }],
        }),
        _ => {
            if val.is_empty() {
                return Err(Error::InvalidInput("grid search needs validation windows".into()));
            }
            let candidates = ks
                .par_iter()
                .map(|&k| -> Result<KCandidate> {
                    let mut cfg = base.clone();
                    cfg.k = k;
                    let model = train_selfcond(train, &cfg)?.model;
                    let pred = model.predict(val, z_seed)?;
                    let r = evaluate_predictions("selfcond", cfg.gan.seed, z_seed, val, &pred, &[], mode)?;
                    Ok(KCandidate {
                        k,
                        ade: r.overall.ade,
                        fde: r.overall.fde,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GridSearchResult {
                best_k: select_best_k(&candidates).expect("non-empty"),
                metric_mode: mode,
                candidates,
            })
        }
    }
}

/// Per-cluster statistics and weights of a trained self-conditioned model.
pub fn inspect_weights(
    model: &SelfCondModel,
    train: &[TrackWindow],
    opts: &WeightOptions,
    mode: MetricMode,
) -> Result<(Vec<ClusterStats>, WeightTable)> {
    if model.clustering.cluster_ids.len() != train.len() {
        return Err(Error::Shape(format!(
            "clustering covers {} windows, training set has {}",
            model.clustering.cluster_ids.len(),
            train.len()
        )));
    }
    let stats = intra_cluster_metrics(model, train, &model.clustering.cluster_ids, opts.stats_z_seed, mode)?;
    let table = compute_weights(&stats, opts.lambdas())?;
    Ok((stats, table))
}
