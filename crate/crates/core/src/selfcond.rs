//! Self-conditioned GAN: the generator is conditioned on modes found by
//! clustering the discriminator's features of real full tracks, and the
//! clustering is refreshed every few epochs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_features, recluster_and_match, ClusteringState};
use crate::data::TrackWindow;
use crate::error::{Error, Result};
use crate::evaluation::{window_errors, MetricMode};
use crate::gan::{adversarial_step, eval_latents, sample_z, Batch, GanConfig, GanState, TrainLog};
use crate::nn::{full_matrix, obs_matrix, one_hot_matrix, Checkpoint, DiscriminatorConfig, GeneratorConfig, ModelParams};
use crate::tensor::Mat;
use crate::util::{derive_seed, read_json, write_json};
use crate::weights::{ClusterStats, WeightedBatchSampler};

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfCondTrainConfig {
    #[serde(flatten)]
    pub gan: GanConfig,
    pub k: usize,
    pub recluster_every: usize,
    pub condition_discriminator: bool,
}

impl Default for SelfCondTrainConfig {
    fn default() -> Self {
        SelfCondTrainConfig {
            gan: GanConfig::default(),
            k: 13,
            recluster_every: 5,
            condition_discriminator: false,
        }
    }
}

impl SelfCondTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.recluster_every == 0 {
            return Err(Error::Config("recluster_every must be >= 1".into()));
        }
        if self.gan.feature_dim < self.k {
            return Err(Error::Config(format!(
                "feature_dim {} is smaller than k {}",
                self.gan.feature_dim, self.k
            )));
        }
        Ok(())
    }
}

/// Trained networks together with the final clustering of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCondModel {
    pub g_cfg: GeneratorConfig,
    pub d_cfg: DiscriminatorConfig,
    pub g: ModelParams,
    pub d: ModelParams,
    pub clustering: ClusteringState,
}

#[derive(Debug, Clone)]
pub struct SelfCondOutcome {
    pub model: SelfCondModel,
    pub log: TrainLog,
}

/// Shape of the windows in a dataset, checked for consistency.
pub fn window_shape(windows: &[TrackWindow]) -> Result<(usize, usize)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
    let (t, h) = (first.obs.len(), first.fut.len());
    for w in windows {
        w.check_lengths(t, h)?;
    }
    Ok((t, h))
}

/// Discriminator encoder output for every window's full real track.
pub fn extract_features(
    d_cfg: &DiscriminatorConfig,
    d: &ModelParams,
    windows: &[TrackWindow],
    cond_ids: Option<&[usize]>,
) -> Result<Mat> {
    if windows.is_empty() {
        return Ok(Mat::zeros(0, d_cfg.feature_dim));
    }
    let chunks: Vec<Result<Mat>> = windows
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let refs: Vec<&TrackWindow> = chunk.iter().collect();
            let cond = cond_ids.map(|ids| one_hot_matrix(&ids[ci * CHUNK..ci * CHUNK + chunk.len()], d_cfg.cond_dim));
            Ok(d_cfg.evaluate(d, &full_matrix(&refs), cond.as_ref())?.0)
        })
        .collect();
    let mut out = Mat::zeros(0, d_cfg.feature_dim);
    for c in chunks {
        out.data.extend(c?.data);
    }
    out.rows = windows.len();
    Ok(out)
}

fn check_consistent(windows: &[TrackWindow], cfg: &SelfCondTrainConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let shape = window_shape(windows)?;
    if windows.len() < cfg.k {
        return Err(Error::InsufficientSamples {
            label: "training windows".into(),
            requested: cfg.k,
            available: windows.len(),
        });
    }
    Ok(shape)
}

pub fn train_selfcond(windows: &[TrackWindow], cfg: &SelfCondTrainConfig) -> Result<SelfCondOutcome> {
    let (t, h) = check_consistent(windows, cfg)?;
    let seed = cfg.gan.seed;
    let k = cfg.k;
    let d_cond = if cfg.condition_discriminator { k } else { 0 };
    let mut state = GanState::new(
        cfg.gan.generator(t, h, k),
        cfg.gan.discriminator(t + h, d_cond),
        &cfg.gan,
        derive_seed(seed, "selfcond.generator"),
        derive_seed(seed, "selfcond.discriminator"),
    )?;
    let mut sampler = WeightedBatchSampler::uniform(windows.len(), cfg.gan.batch_size, derive_seed(seed, "selfcond.sampler"))?;
    let mut z_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "selfcond.latent"));
    let kmeans_seed = derive_seed(seed, "selfcond.kmeans");

    // before the first clustering a conditioned discriminator sees mode 0
    let initial_cond = (d_cond > 0).then(|| vec![0; windows.len()]);
    let features = extract_features(&state.d_cfg, &state.d, windows, initial_cond.as_deref())?;
    let mut clustering = cluster_features(&features, k, kmeans_seed)?;
    let mut log = TrainLog::default();
    let recluster = |state: &GanState, prev: &ClusteringState| -> Result<ClusteringState> {
        let cond = (d_cond > 0).then_some(prev.cluster_ids.as_slice());
        let f = extract_features(&state.d_cfg, &state.d, windows, cond)?;
        recluster_and_match(prev, &f)
    };
    for epoch in 0..cfg.gan.epochs {
        if epoch > 0 && epoch % cfg.recluster_every == 0 {
            clustering = recluster(&state, &clustering)?;
        }
        for idx in sampler.epoch() {
            let z = sample_z(&mut z_rng, idx.len(), cfg.gan.latent_dim);
            let mut batch = Batch::new(windows, &idx, z);
            let ids: Vec<usize> = idx.iter().map(|&i| clustering.cluster_ids[i]).collect();
            let onehot = one_hot_matrix(&ids, k);
            if d_cond > 0 {
                batch.d_cond = Some(onehot.clone());
            }
            batch.g_cond = Some(onehot);
            let l = adversarial_step(&mut state, &batch, cfg.gan.l2_weight, cfg.gan.adversarial, log.steps.len())?;
            log.push_step(epoch, l);
        }
        log.close_epoch(epoch, Some(clustering.round));
    }
    clustering = recluster(&state, &clustering)?;
    Ok(SelfCondOutcome {
        model: SelfCondModel {
            g_cfg: state.g_cfg,
            d_cfg: state.d_cfg,
            g: state.g,
            d: state.d,
            clustering,
        },
        log,
    })
}

impl SelfCondModel {
    pub fn k(&self) -> usize {
        self.clustering.k
    }

    /// Nearest-centroid mode of each window's full real track.
    pub fn assign(&self, windows: &[TrackWindow]) -> Result<Vec<usize>> {
        if self.d_cfg.cond_dim > 0 {
            return Err(Error::Config(
                "a conditioned discriminator cannot assign windows without known modes".into(),
            ));
        }
        let f = extract_features(&self.d_cfg, &self.d, windows, None)?;
        self.clustering.assign(&f)
    }

    /// Generator output conditioned on the given modes, one latent per window.
    pub fn predict_with_modes(&self, windows: &[TrackWindow], ids: &[usize], z_seed: u64) -> Result<Mat> {
        if ids.len() != windows.len() {
            return Err(Error::Shape(format!("{} modes for {} windows", ids.len(), windows.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&c| c >= self.k()) {
            return Err(Error::InvalidArgument(format!("mode {bad} outside [0, {})", self.k())));
        }
        let z = eval_latents(z_seed, windows.len(), self.g_cfg.latent_dim);
        predict_chunked(windows, |range, obs| {
            let cond = one_hot_matrix(&ids[range.clone()], self.k());
            self.g_cfg.predict(&self.g, obs, Some(&cond), &z.select_rows(&range.collect::<Vec<_>>()))
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        Checkpoint::new("selfcond-generator", &self.g_cfg, 0, self.g.clone()).save(&dir.join("generator.json"))?;
        Checkpoint::new("selfcond-discriminator", &self.d_cfg, 0, self.d.clone()).save(&dir.join("discriminator.json"))?;
        write_json(&dir.join("clustering.json"), &self.clustering)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let g = Checkpoint::load(&dir.join("generator.json"))?;
        let d = Checkpoint::load(&dir.join("discriminator.json"))?;
        let g_cfg: GeneratorConfig = g.config_as()?;
        let d_cfg: DiscriminatorConfig = d.config_as()?;
        let g = Checkpoint::load_expecting(&dir.join("generator.json"), "selfcond-generator", &g_cfg.fingerprint())?;
        let d = Checkpoint::load_expecting(&dir.join("discriminator.json"), "selfcond-discriminator", &d_cfg.fingerprint())?;
        let clustering: ClusteringState = read_json(&dir.join("clustering.json"))?;
        clustering.validate()?;
        if clustering.k != g_cfg.cond_dim {
            return Err(Error::Data("clustering k does not match the generator condition size".into()));
        }
        Ok(SelfCondModel {
            g_cfg,
            d_cfg,
            g: g.params,
            d: d.params,
            clustering,
        })
    }
}

/// Runs `f` over consecutive row ranges in parallel and stacks the outputs.
pub(crate) fn predict_chunked<F>(windows: &[TrackWindow], f: F) -> Result<Mat>
where
    F: Fn(std::ops::Range<usize>, &Mat) -> Result<Mat> + Sync,
{
    let parts: Vec<Result<Mat>> = windows
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let refs: Vec<&TrackWindow> = chunk.iter().collect();
            let start = ci * CHUNK;
            f(start..start + chunk.len(), &obs_matrix(&refs))
        })
        .collect();
    let mut out: Option<Mat> = None;
    for p in parts {
        let p = p?;
        match &mut out {
            None => out = Some(p),
            Some(o) => {
                o.data.extend(p.data);
                o.rows += p.rows;
            }
        }
    }
    Ok(out.unwrap_or_else(|| Mat::zeros(0, 0)))
}

/// Per-cluster ADE/FDE from per-window errors; empty clusters carry no metrics.
pub fn cluster_stats(ids: &[usize], k: usize, errors: &[(f64, f64)]) -> Vec<ClusterStats> {
    let mut sums = vec![(0.0, 0.0, 0usize); k];
    for (&c, e) in ids.iter().zip(errors) {
        sums[c].0 += e.0;
        sums[c].1 += e.1;
        sums[c].2 += 1;
    }
    sums.into_iter()
        .enumerate()
        .map(|(i, (a, f, n))| ClusterStats {
            cluster_id: i,
            ade: (n > 0).then(|| a / n as f64),
            fde: (n > 0).then(|| f / n as f64),
            count: n,
        })
        .collect()
}

/// Error of the self-conditioned generator inside each cluster, one latent
/// sample per window.
pub fn intra_cluster_metrics(
    model: &SelfCondModel,
    windows: &[TrackWindow],
    ids: &[usize],
    z_seed: u64,
    mode: MetricMode,
) -> Result<Vec<ClusterStats>> {
    let pred = model.predict_with_modes(windows, ids, z_seed)?;
    let errs = window_errors(windows, &pred, mode)?;
    Ok(cluster_stats(ids, model.k(), &errs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WrongModeProbe {
    pub windows: usize,
    /// Windows where the assigned mode gives a lower ADE than a random other mode.
    pub true_mode_wins: usize,
}

impl WrongModeProbe {
    pub fn win_rate(&self) -> f64 {
        self.true_mode_wins as f64 / self.windows.max(1) as f64
    }
}

/// Compares conditioning on each window's assigned mode against a uniformly
/// drawn different mode, with the same latent for both.
pub fn wrong_mode_probe(
    model: &SelfCondModel,
    windows: &[TrackWindow],
    z_seed: u64,
    seed: u64,
    mode: MetricMode,
) -> Result<WrongModeProbe> {
    use rand::Rng;
    let k = model.k();
    if k < 2 {
        return Err(Error::Config("the wrong-mode probe needs k >= 2".into()));
    }
    let truth = model.assign(windows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe.wrong-mode"));
    let wrong: Vec<usize> = truth
        .iter()
        .map(|&c| {
            let r = rng.random_range(0..k - 1);
            if r >= c {
                r + 1
            } else {
                r
            }
        })
        .collect();
    let right = window_errors(windows, &model.predict_with_modes(windows, &truth, z_seed)?, mode)?;
    let other = window_errors(windows, &model.predict_with_modes(windows, &wrong, z_seed)?, mode)?;
    Ok(WrongModeProbe {
        windows: windows.len(),
        true_mode_wins: right.iter().zip(&other).filter(|(a, b)| a.0 < b.0).count(),
    })
}
