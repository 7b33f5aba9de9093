//! Adversarial update shared by the self-conditioned and forecasting GANs,
//! plus training logs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TrackWindow;
use crate::error::{Error, Result};
use crate::nn::{
    discriminator_loss, fut_matrix, full_matrix, generator_adversarial_loss, l2_on_tape, obs_matrix, Adam,
    AdversarialForm, Bound, CellKind, DiscriminatorConfig, EncoderKind, GeneratorConfig, ModelParams,
};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Scale of the reconstruction term in the generator objective.
    pub l2_weight: f64,
    pub adversarial: AdversarialForm,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub d_hidden_dim: usize,
    pub feature_dim: usize,
    pub encoder: EncoderKind,
    pub cell: CellKind,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            epochs: 200,
            batch_size: 64,
            lr_g: 1e-3,
            lr_d: 1e-3,
            l2_weight: 1.0,
            adversarial: AdversarialForm::NonSaturating,
            hidden_dim: 32,
            latent_dim: 8,
            d_hidden_dim: 64,
            feature_dim: 64,
            encoder: EncoderKind::Mlp,
            cell: CellKind::Lstm,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(Error::Config("l2_weight must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn generator(&self, obs_len: usize, pred_len: usize, cond_dim: usize) -> GeneratorConfig {
        GeneratorConfig {
            obs_len,
            pred_len,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
            cond_dim,
            cell: self.cell,
        }
    }

    pub fn discriminator(&self, seq_len: usize, cond_dim: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            encoder: self.encoder,
            hidden_dim: self.d_hidden_dim,
            feature_dim: self.feature_dim,
            seq_len,
            cond_dim,
            cell: self.cell,
        }
    }
}

/// Both networks with their optimizers.
#[derive(Debug, Clone)]
pub struct GanState {
    pub g_cfg: GeneratorConfig,
    pub d_cfg: DiscriminatorConfig,
    pub g: ModelParams,
    pub d: ModelParams,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

impl GanState {
    pub fn new(g_cfg: GeneratorConfig, d_cfg: DiscriminatorConfig, cfg: &GanConfig, g_seed: u64, d_seed: u64) -> Result<Self> {
        g_cfg.validate()?;
        d_cfg.validate()?;
        Ok(GanState {
            g: g_cfg.init_params(g_seed),
            d: d_cfg.init_params(d_seed),
            g_cfg,
            d_cfg,
            opt_g: Adam::new(cfg.lr_g),
            opt_d: Adam::new(cfg.lr_d),
        })
    }
}

/// One minibatch, already laid out as matrices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Mat,
    pub fut: Mat,
    pub full: Mat,
    pub z: Mat,
    pub g_cond: Option<Mat>,
    pub d_cond: Option<Mat>,
    /// Per-sample reconstruction weights; `None` is unweighted.
    pub weights: Option<Vec<f64>>,
}

impl Batch {
    pub fn new(windows: &[TrackWindow], idx: &[usize], z: Mat) -> Self {
        let sel: Vec<&TrackWindow> = idx.iter().map(|&i| &windows[i]).collect();
        Batch {
            obs: obs_matrix(&sel),
            fut: fut_matrix(&sel),
            full: full_matrix(&sel),
            z,
            g_cond: None,
            d_cond: None,
            weights: None,
        }
    }
}

pub fn sample_z(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Mat {
    let data = (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect();
    Mat::from_vec(rows, dim, data)
}

/// One latent row per window, drawn up front so predictions do not depend
/// on how windows are chunked.
pub fn eval_latents(seed: u64, n: usize, dim: usize) -> Mat {
    sample_z(&mut ChaCha8Rng::seed_from_u64(seed), n, dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l2: f64,
    pub g_loss: f64,
}

/// Generator objective `(adversarial, reconstruction, total)` at the current
/// parameters, without updating anything.
pub fn generator_objective(state: &GanState, batch: &Batch, l2_weight: f64, form: AdversarialForm) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let (_, adv, l2, total) = generator_graph(&mut tape, state, batch, l2_weight, form, false);
    (tape.value(adv).scalar(), tape.value(l2).scalar(), tape.value(total).scalar())
}

fn generator_graph(
    tape: &mut Tape,
    state: &GanState,
    batch: &Batch,
    l2_weight: f64,
    form: AdversarialForm,
    trainable: bool,
) -> (Bound, Var, Var, Var) {
    let bg = state.g.bind(tape, trainable);
    let bd = state.d.bind(tape, false);
    let obs = tape.constant(batch.obs.clone());
    let z = tape.constant(batch.z.clone());
    let gc = batch.g_cond.as_ref().map(|c| tape.constant(c.clone()));
    let dc = batch.d_cond.as_ref().map(|c| tape.constant(c.clone()));
    let fake = state.g_cfg.forward(tape, &bg, obs, gc, z);
    let fake_full = tape.concat(&[obs, fake]);
    let (_, logit) = state.d_cfg.forward(tape, &bd, fake_full, dc);
    let adv = generator_adversarial_loss(tape, logit, form);
    let fut = tape.constant(batch.fut.clone());
    let w = batch
        .weights
        .as_ref()
        .map(|w| tape.constant(Mat::from_vec(w.len(), 1, w.clone())));
    let l2 = l2_on_tape(tape, fake, fut, w);
    let scaled = tape.scale(l2, l2_weight);
    let total = tape.add(adv, scaled);
    (bg, adv, l2, total)
}

/// Discriminator update followed by a generator update against the updated
/// discriminator. Losses are those evaluated before each update.
pub fn adversarial_step(
    state: &mut GanState,
    batch: &Batch,
    l2_weight: f64,
    form: AdversarialForm,
    step: usize,
) -> Result<StepLosses> {
    let d_loss = {
        let mut tape = Tape::new();
        let bg = state.g.bind(&mut tape, false);
        let bd = state.d.bind(&mut tape, true);
        let obs = tape.constant(batch.obs.clone());
        let z = tape.constant(batch.z.clone());
        let gc = batch.g_cond.as_ref().map(|c| tape.constant(c.clone()));
        let dc = batch.d_cond.as_ref().map(|c| tape.constant(c.clone()));
        let fake = state.g_cfg.forward(&mut tape, &bg, obs, gc, z);
        let fake_full = tape.concat(&[obs, fake]);
        let real = tape.constant(batch.full.clone());
        let (_, lr) = state.d_cfg.forward(&mut tape, &bd, real, dc);
        let (_, lf) = state.d_cfg.forward(&mut tape, &bd, fake_full, dc);
        let loss = discriminator_loss(&mut tape, lr, lf);
        let value = tape.value(loss).scalar();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("discriminator loss {value}"),
            });
        }
        let mut grads = tape.backward(loss);
        let g = bd.gradients(&mut grads, &state.d);
        state.opt_d.step(&mut state.d, &g);
        value
    };
    let mut tape = Tape::new();
    let (bg, adv, l2, total) = generator_graph(&mut tape, state, batch, l2_weight, form, true);
    let losses = StepLosses {
        d_loss,
        g_adv: tape.value(adv).scalar(),
        g_l2: tape.value(l2).scalar(),
        g_loss: tape.value(total).scalar(),
    };
    if ![losses.g_adv, losses.g_l2, losses.g_loss].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("generator adversarial {} reconstruction {}", losses.g_adv, losses.g_l2),
        });
    }
    let mut grads = tape.backward(total);
    let g = bg.gradients(&mut grads, &state.g);
    state.opt_g.step(&mut state.g, &g);
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub d_loss: Option<f64>,
    pub g_adv: Option<f64>,
    pub g_l2: f64,
    pub g_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub d_loss: Option<f64>,
    pub g_loss: f64,
    pub g_l2: f64,
    pub clustering_round: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn push_step(&mut self, epoch: usize, l: StepLosses) {
        self.steps.push(StepLog {
            epoch,
            step: self.steps.len(),
            d_loss: Some(l.d_loss),
            g_adv: Some(l.g_adv),
            g_l2: l.g_l2,
            g_loss: l.g_loss,
        });
    }

    /// Summarizes the steps of `epoch` into an epoch row.
    pub fn close_epoch(&mut self, epoch: usize, clustering_round: Option<usize>) {
        let rows: Vec<&StepLog> = self.steps.iter().filter(|s| s.epoch == epoch).collect();
        let n = rows.len().max(1) as f64;
        let d: Option<f64> = rows.iter().map(|s| s.d_loss).sum::<Option<f64>>().map(|v| v / n);
        self.epochs.push(EpochLog {
            epoch,
            d_loss: d,
            g_loss: rows.iter().map(|s| s.g_loss).sum::<f64>() / n,
            g_l2: rows.iter().map(|s| s.g_l2).sum::<f64>() / n,
            clustering_round,
        });
    }

    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.epochs)
    }

    pub fn write_step_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.steps)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
