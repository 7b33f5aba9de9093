#![allow(dead_code)]

use modeforge::nn::losses::weighted_l2_grad;
use modeforge::nn::{
    discriminator_loss, generator_adversarial_loss, l2_on_tape, AdversarialForm, BaselineConfig, Bound,
    CellKind, DiscriminatorConfig, EncoderKind, GeneratorConfig, ModelParams,
};
use modeforge::tape::{Tape, Var};
use modeforge::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradient entries smaller than this times `max(1, |loss|)` are compared
/// absolutely, since central differences carry roundoff proportional to the loss.
pub const FD_FLOOR: f64 = 1e-5;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

fn rel_err(a: f64, n: f64, loss: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR * loss.abs().max(1.0))
}

/// Worst relative error between tape gradients and central differences over
/// every scalar parameter.
pub fn check_params<F>(params: &ModelParams, loss: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let l = loss(&mut tape, &bound);
    let value = tape.value(l).scalar();
    let mut grads = tape.backward(l);
    let analytic = bound.gradients(&mut grads, params);

    let eval = |p: &ModelParams| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let l = loss(&mut tape, &bound);
        tape.value(l).scalar()
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, m) in &params.tensors {
        for i in 0..m.len() {
            let orig = m.data[i];
            probe.tensors.get_mut(name).unwrap().data[i] = orig + FD_STEP;
            let up = eval(&probe);
            probe.tensors.get_mut(name).unwrap().data[i] = orig - FD_STEP;
            let down = eval(&probe);
            probe.tensors.get_mut(name).unwrap().data[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[name].data[i], numeric, value));
        }
    }
    worst
}

/// Random tiny architecture shared by every loss in one configuration.
pub struct TinyNets {
    pub gen: GeneratorConfig,
    pub disc: DiscriminatorConfig,
    pub base: BaselineConfig,
    pub batch: usize,
    pub obs: Mat,
    pub fut: Mat,
    pub cond: Option<Mat>,
    pub z: Mat,
    pub weights: Mat,
}

impl TinyNets {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(2..=4);
        let h = rng.random_range(2..=4);
        let cell = if rng.random_bool(0.5) { CellKind::Lstm } else { CellKind::Gru };
        let k = rng.random_range(0..=3);
        let batch = rng.random_range(2..=4);
        let gen = GeneratorConfig {
            obs_len: t,
            pred_len: h,
            hidden_dim: rng.random_range(2..=4),
            latent_dim: rng.random_range(1..=3),
            cond_dim: k,
            cell,
        };
        let disc = DiscriminatorConfig {
            encoder: if rng.random_bool(0.5) { EncoderKind::Mlp } else { EncoderKind::Recurrent },
            hidden_dim: rng.random_range(2..=6),
            feature_dim: rng.random_range(2..=5),
            seq_len: t + h,
            cond_dim: 0,
            cell,
        };
        let base = BaselineConfig {
            obs_len: t,
            pred_len: h,
            hidden_dim: rng.random_range(2..=4),
            mlp_dim: rng.random_range(2..=5),
            cell,
        };
        let obs = gaussian(&mut rng, batch, 2 * t);
        let fut = gaussian(&mut rng, batch, 2 * h);
        let cond = (k > 0).then(|| {
            let ids: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
            modeforge::nn::one_hot_matrix(&ids, k)
        });
        let z = gaussian(&mut rng, batch, gen.latent_dim);
        let weights = Mat::from_vec(batch, 1, (0..batch).map(|_| rng.random_range(0.0..3.0)).collect());
        TinyNets { gen, disc, base, batch, obs, fut, cond, z, weights }
    }

    fn fake(&self, tape: &mut Tape, g: &Bound) -> Var {
        let obs = tape.constant(self.obs.clone());
        let cond = self.cond.clone().map(|c| tape.constant(c));
        let z = tape.constant(self.z.clone());
        self.gen.forward(tape, g, obs, cond, z)
    }
}

/// Worst relative errors for each loss in one random configuration.
pub struct GradReport {
    pub params: usize,
    pub baseline_l2: f64,
    pub weighted_l2: f64,
    pub weighted_l2_pred: f64,
    pub generator_adversarial: f64,
    pub generator_combined: f64,
    pub discriminator: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        [
            self.baseline_l2,
            self.weighted_l2,
            self.weighted_l2_pred,
            self.generator_adversarial,
            self.generator_combined,
            self.discriminator,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn gradient_report(seed: u64) -> GradReport {
    let nets = TinyNets::random(seed);
    let gp = nets.gen.init_params(seed);
    let dp = nets.disc.init_params(seed + 1);
    let bp = nets.base.init_params(seed + 2);
    let form = if seed % 2 == 0 { AdversarialForm::NonSaturating } else { AdversarialForm::Minimax };

    let baseline_l2 = check_params(&bp, |tape, b| {
        let obs = tape.constant(nets.obs.clone());
        let y = nets.base.forward(tape, b, obs);
        let target = tape.constant(nets.fut.clone());
        l2_on_tape(tape, y, target, None)
    });

    let weighted_l2 = check_params(&gp, |tape, g| {
        let y = nets.fake(tape, g);
        let target = tape.constant(nets.fut.clone());
        let w = tape.constant(nets.weights.clone());
        l2_on_tape(tape, y, target, Some(w))
    });

    let pred = gaussian(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), nets.batch, nets.fut.cols);
    let analytic = weighted_l2_grad(&pred, &nets.fut, &nets.weights.data).unwrap();
    let value = modeforge::nn::weighted_l2_loss(&pred, &nets.fut, &nets.weights.data).unwrap();
    let mut weighted_l2_pred = 0.0f64;
    for i in 0..pred.len() {
        let mut up = pred.clone();
        up.data[i] += FD_STEP;
        let mut down = pred.clone();
        down.data[i] -= FD_STEP;
        let f = |m: &Mat| modeforge::nn::weighted_l2_loss(m, &nets.fut, &nets.weights.data).unwrap();
        let numeric = (f(&up) - f(&down)) / (2.0 * FD_STEP);
        weighted_l2_pred = weighted_l2_pred.max(rel_err(analytic.data[i], numeric, value));
    }

    let adversarial = |tape: &mut Tape, g: &Bound, l2_weight: f64| {
        let d = dp.bind(tape, false);
        let y = nets.fake(tape, g);
        let obs = tape.constant(nets.obs.clone());
        let full = tape.concat(&[obs, y]);
        let (_, logit) = nets.disc.forward(tape, &d, full, None);
        let adv = generator_adversarial_loss(tape, logit, form);
        if l2_weight == 0.0 {
            return adv;
        }
        let target = tape.constant(nets.fut.clone());
        let l2 = l2_on_tape(tape, y, target, None);
        let l2 = tape.scale(l2, l2_weight);
        tape.add(adv, l2)
    };
    let generator_adversarial = check_params(&gp, |tape, g| adversarial(tape, g, 0.0));
    let generator_combined = check_params(&gp, |tape, g| adversarial(tape, g, 1.5));

    let discriminator = check_params(&dp, |tape, d| {
        let g = gp.bind(tape, false);
        let y = nets.fake(tape, &g);
        let obs = tape.constant(nets.obs.clone());
        let fake = tape.concat(&[obs, y]);
        let real = tape.constant(Mat::hcat(&[&nets.obs, &nets.fut]));
        let (_, lr) = nets.disc.forward(tape, d, real, None);
        let (_, lf) = nets.disc.forward(tape, d, fake, None);
        discriminator_loss(tape, lr, lf)
    });

    GradReport {
        params: gp.num_params().max(dp.num_params()).max(bp.num_params()),
        baseline_l2,
        weighted_l2,
        weighted_l2_pred,
        generator_adversarial,
        generator_combined,
        discriminator,
    }
}
