//! Context-free forecasters: the recurrent baseline, the GAN under the four
//! weighting settings, and the two models that see ground-truth conditions.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrackWindow;
use crate::error::{Error, Result};
use crate::gan::{adversarial_step, eval_latents, sample_z, Batch, GanConfig, GanState, TrainLog};
use crate::nn::{
    fut_matrix, l2_on_tape, obs_matrix, one_hot_matrix, Adam, BaselineConfig, CellKind, Checkpoint, GeneratorConfig,
    ModelParams,
};
use crate::selfcond::{predict_chunked, window_shape, SelfCondModel};
use crate::tape::Tape;
use crate::tensor::Mat;
use crate::util::derive_seed;
use crate::weights::{WeightTable, WeightedBatchSampler};

/// Uniform forecasting interface: `n x 2h` displacements for `n` windows,
/// with generative models drawing one latent per window from `z_seed`.
pub trait Predictor: Sync {
    fn name(&self) -> &str;
    fn predict(&self, windows: &[TrackWindow], z_seed: u64) -> Result<Mat>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSetting {
    None,
    Wl2,
    Wb,
    Wl2wb,
}

impl WeightSetting {
    pub const ALL: [WeightSetting; 4] = [WeightSetting::None, WeightSetting::Wl2, WeightSetting::Wb, WeightSetting::Wl2wb];

    pub fn weighted_loss(self) -> bool {
        matches!(self, WeightSetting::Wl2 | WeightSetting::Wl2wb)
    }

    pub fn weighted_batches(self) -> bool {
        matches!(self, WeightSetting::Wb | WeightSetting::Wl2wb)
    }

    pub fn model_name(self) -> &'static str {
        match self {
            WeightSetting::None => "vanilla",
            WeightSetting::Wl2 => "wl2",
            WeightSetting::Wb => "wb",
            WeightSetting::Wl2wb => "wl2wb",
        }
    }
}

/// Mode information a weighted setting needs.
#[derive(Debug, Clone, Copy)]
pub struct ModeWeights<'a> {
    pub table: &'a WeightTable,
    /// Cluster of every training window.
    pub cluster_ids: &'a [usize],
    pub cluster_first: bool,
    /// Rescale reconstruction weights to mean one over the training set.
    pub normalize_loss_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanForecasterMeta {
    pub name: String,
    pub generator: GeneratorConfig,
    /// Condition vocabulary of the ideal conditional model; empty otherwise.
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanForecaster {
    pub meta: GanForecasterMeta,
    pub params: ModelParams,
}

impl GanForecaster {
    pub fn label_ids(&self, windows: &[TrackWindow]) -> Result<Vec<usize>> {
        windows
            .iter()
            .map(|w| {
                self.meta
                    .labels
                    .iter()
                    .position(|l| *l == w.label)
                    .ok_or_else(|| Error::InvalidInput(format!("label `{}` unseen during training", w.label)))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new("gan-forecaster", &self.meta, 0, self.params.clone()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: GanForecasterMeta = Checkpoint::load(path)?.config_as()?;
        let ck = Checkpoint::load_expecting(path, "gan-forecaster", &meta.generator.fingerprint())?;
        Ok(GanForecaster { meta, params: ck.params })
    }
}

impl Predictor for GanForecaster {
    fn name(&self) -> &str {
        &self.meta.name
    }

    fn predict(&self, windows: &[TrackWindow], z_seed: u64) -> Result<Mat> {
        let g = &self.meta.generator;
        let ids = if g.mode_conditioned() { Some(self.label_ids(windows)?) } else { None };
        let z = eval_latents(z_seed, windows.len(), g.latent_dim);
        predict_chunked(windows, |range, obs| {
            let cond = ids.as_ref().map(|ids| one_hot_matrix(&ids[range.clone()], g.cond_dim));
            g.predict(&self.params, obs, cond.as_ref(), &z.select_rows(&range.collect::<Vec<_>>()))
        })
    }
}

/// Conditions the self-conditioned generator on each window's true mode.
impl Predictor for SelfCondModel {
    fn name(&self) -> &str {
        "selfcond-ideal"
    }

    fn predict(&self, windows: &[TrackWindow], z_seed: u64) -> Result<Mat> {
        let ids = self.assign(windows)?;
        self.predict_with_modes(windows, &ids, z_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub cell: CellKind,
    pub seed: u64,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        BaselineTrainConfig {
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            hidden_dim: 32,
            mlp_dim: 64,
            cell: CellKind::Lstm,
            seed: 0,
        }
    }
}

impl BaselineTrainConfig {
    pub fn from_gan(cfg: &GanConfig) -> Self {
        BaselineTrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr_g,
            hidden_dim: cfg.hidden_dim,
            mlp_dim: cfg.d_hidden_dim,
            cell: cfg.cell,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineForecaster {
    pub config: BaselineConfig,
    pub params: ModelParams,
}

impl BaselineForecaster {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new("baseline-forecaster", &self.config, 0, self.params.clone()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: BaselineConfig = Checkpoint::load(path)?.config_as()?;
        let ck = Checkpoint::load_expecting(path, "baseline-forecaster", &config.fingerprint())?;
        Ok(BaselineForecaster { config, params: ck.params })
    }
}

impl Predictor for BaselineForecaster {
    fn name(&self) -> &str {
        "lstm"
    }

    fn predict(&self, windows: &[TrackWindow], _z_seed: u64) -> Result<Mat> {
        predict_chunked(windows, |_, obs| self.config.predict(&self.params, obs))
    }
}

pub fn train_baseline(windows: &[TrackWindow], cfg: &BaselineTrainConfig) -> Result<(BaselineForecaster, TrainLog)> {
    let (t, h) = window_shape(windows)?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("baseline needs epochs, batch_size and lr > 0".into()));
    }
    let config = BaselineConfig {
        obs_len: t,
        pred_len: h,
        hidden_dim: cfg.hidden_dim,
        mlp_dim: cfg.mlp_dim,
        cell: cfg.cell,
    };
    config.validate()?;
    let mut params = config.init_params(derive_seed(cfg.seed, "baseline.init"));
    let mut opt = Adam::new(cfg.lr);
    let mut sampler = WeightedBatchSampler::uniform(windows.len(), cfg.batch_size, derive_seed(cfg.seed, "baseline.sampler"))?;
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        for idx in sampler.epoch() {
            let sel: Vec<&TrackWindow> = idx.iter().map(|&i| &windows[i]).collect();
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, true);
            let obs = tape.constant(obs_matrix(&sel));
            let fut = tape.constant(fut_matrix(&sel));
            let pred = config.forward(&mut tape, &b, obs);
            let loss = l2_on_tape(&mut tape, pred, fut, None);
            let value = tape.value(loss).scalar();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: log.steps.len(),
                    detail: format!("baseline reconstruction loss {value}"),
                });
            }
            let mut grads = tape.backward(loss);
            let g = b.gradients(&mut grads, &params);
            opt.step(&mut params, &g);
            log.steps.push(crate::gan::StepLog {
                epoch,
                step: log.steps.len(),
                d_loss: None,
                g_adv: None,
                g_l2: value,
                g_loss: value,
            });
        }
        log.close_epoch(epoch, None);
    }
    Ok((BaselineForecaster { config, params }, log))
}

fn train_gan(
    windows: &[TrackWindow],
    cfg: &GanConfig,
    name: &str,
    cond: Option<(&[usize], usize)>,
    loss_weights: Option<Vec<f64>>,
    mut sampler: WeightedBatchSampler,
    labels: Vec<String>,
) -> Result<(GanForecaster, TrainLog)> {
    let (t, h) = window_shape(windows)?;
    let cond_dim = cond.map_or(0, |c| c.1);
    let mut state = GanState::new(
        cfg.generator(t, h, cond_dim),
        cfg.discriminator(t + h, 0),
        cfg,
        derive_seed(cfg.seed, "forecast.generator"),
        derive_seed(cfg.seed, "forecast.discriminator"),
    )?;
    let mut z_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "forecast.latent"));
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        for idx in sampler.epoch() {
            let z = sample_z(&mut z_rng, idx.len(), cfg.latent_dim);
            let mut batch = Batch::new(windows, &idx, z);
            if let Some((ids, k)) = cond {
                let sel: Vec<usize> = idx.iter().map(|&i| ids[i]).collect();
                batch.g_cond = Some(one_hot_matrix(&sel, k));
            }
            batch.weights = loss_weights.as_ref().map(|w| idx.iter().map(|&i| w[i]).collect());
            let l = adversarial_step(&mut state, &batch, cfg.l2_weight, cfg.adversarial, log.steps.len())?;
            log.push_step(epoch, l);
        }
        log.close_epoch(epoch, None);
    }
    Ok((
        GanForecaster {
            meta: GanForecasterMeta {
                name: name.to_string(),
                generator: state.g_cfg,
                labels,
            },
            params: state.g,
        },
        log,
    ))
}

/// Unconditioned GAN forecaster. `Wl2` swaps the reconstruction term for the
/// mode-weighted one (weights rescaled to mean one), `Wb` draws batches by
/// mode weight, `Wl2wb` does both.
pub fn train_vanilla_gan(
    windows: &[TrackWindow],
    cfg: &GanConfig,
    setting: WeightSetting,
    weights: Option<ModeWeights<'_>>,
) -> Result<(GanForecaster, TrainLog)> {
    cfg.validate()?;
    let sampler_seed = derive_seed(cfg.seed, "forecast.sampler");
    let mw = match (setting, weights) {
        (WeightSetting::None, _) => None,
        (_, Some(w)) => {
            if w.cluster_ids.len() != windows.len() {
                return Err(Error::Config(format!(
                    "{} cluster assignments for {} training windows",
                    w.cluster_ids.len(),
                    windows.len()
                )));
            }
            Some(w)
        }
        (_, None) => {
            return Err(Error::Config(format!(
                "setting `{}` needs a weight table and assignments",
                setting.model_name()
            )))
        }
    };
    let loss_weights = match mw {
        Some(w) if setting.weighted_loss() && w.normalize_loss_weights => {
            Some(w.table.normalized_sample_weights(w.cluster_ids)?)
        }
        Some(w) if setting.weighted_loss() => Some(w.table.sample_weights(w.cluster_ids)),
        _ => None,
    };
    let sampler = match mw {
        Some(w) if setting.weighted_batches() => {
            WeightedBatchSampler::from_table(w.cluster_ids, w.table, cfg.batch_size, sampler_seed, w.cluster_first)?
        }
        _ => WeightedBatchSampler::uniform(windows.len(), cfg.batch_size, sampler_seed)?,
    };
    train_gan(windows, cfg, setting.model_name(), None, loss_weights, sampler, Vec::new())
}

/// GAN whose generator sees the one-hot supervised label of each window.
pub fn train_ideal_cgan(windows: &[TrackWindow], cfg: &GanConfig) -> Result<(GanForecaster, TrainLog)> {
    cfg.validate()?;
    let mut labels: Vec<String> = windows.iter().map(|w| w.label.clone()).collect();
    labels.sort();
    labels.dedup();
    let ids: Vec<usize> = windows
        .iter()
        .map(|w| labels.binary_search(&w.label).expect("label in vocabulary"))
        .collect();
    let sampler = WeightedBatchSampler::uniform(windows.len(), cfg.batch_size, derive_seed(cfg.seed, "forecast.sampler"))?;
    let k = labels.len();
    train_gan(windows, cfg, "cgan-ideal", Some((&ids, k)), None, sampler, labels)
}
