//! Generator, discriminator and recurrent baseline.
//!
//! Every network is a pure function of a [`ModelParams`] set and its inputs.
//! Batches are matrices with one sample per row: observed tracks are
//! `B x 2t` (`[dx0, dy0, dx1, ...]`), predictions `B x 2h`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{orthogonal, uniform_fan_in, Bound, ModelParams};
use crate::data::{concat_full_track, Point2, TrackWindow};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;
use crate::util::sha256_json;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

/// Recurrent state; `c` is only used by LSTM cells.
#[derive(Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

fn init_cell(p: &mut ModelParams, rng: &mut ChaCha8Rng, prefix: &str, kind: CellKind, input: usize, hidden: usize) {
    let g = kind.gates();
    p.tensors.insert(format!("{prefix}.wx"), uniform_fan_in(rng, input, g * hidden));
    let mut wh = Mat::zeros(hidden, g * hidden);
    for gate in 0..g {
        let q = orthogonal(rng, hidden);
        for r in 0..hidden {
            wh.row_mut(r)[gate * hidden..(gate + 1) * hidden].copy_from_slice(q.row(r));
        }
    }
    p.tensors.insert(format!("{prefix}.wh"), wh);
    let mut b = Mat::zeros(1, g * hidden);
    if kind == CellKind::Lstm {
        // forget gate starts open
        b.data[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    }
    p.tensors.insert(format!("{prefix}.b"), b);
    if kind == CellKind::Gru {
        p.tensors.insert(format!("{prefix}.bh"), Mat::zeros(1, g * hidden));
    }
}

fn init_linear(p: &mut ModelParams, rng: &mut ChaCha8Rng, prefix: &str, input: usize, output: usize) {
    p.tensors.insert(format!("{prefix}.w"), uniform_fan_in(rng, input, output));
    p.tensors.insert(format!("{prefix}.b"), Mat::zeros(1, output));
}

pub fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let y = tape.matmul(x, p.var(&format!("{prefix}.w")));
    tape.add_row(y, p.var(&format!("{prefix}.b")))
}

pub fn zero_state(tape: &mut Tape, kind: CellKind, batch: usize, hidden: usize) -> CellState {
    let h = tape.constant(Mat::zeros(batch, hidden));
    let c = (kind == CellKind::Lstm).then(|| tape.constant(Mat::zeros(batch, hidden)));
    CellState { h, c }
}

pub fn cell_step(tape: &mut Tape, p: &Bound, prefix: &str, kind: CellKind, hidden: usize, x: Var, s: CellState) -> CellState {
    let xw = tape.matmul(x, p.var(&format!("{prefix}.wx")));
    let xw = tape.add_row(xw, p.var(&format!("{prefix}.b")));
    let hw = tape.matmul(s.h, p.var(&format!("{prefix}.wh")));
    let hd = hidden;
    match kind {
        CellKind::Lstm => {
            let gates = tape.add(xw, hw);
            let i = tape.slice(gates, 0, hd);
            let i = tape.sigmoid(i);
            let f = tape.slice(gates, hd, 2 * hd);
            let f = tape.sigmoid(f);
            let g = tape.slice(gates, 2 * hd, 3 * hd);
            let g = tape.tanh(g);
            let o = tape.slice(gates, 3 * hd, 4 * hd);
            let o = tape.sigmoid(o);
            let c_prev = s.c.expect("LSTM state carries a cell");
            let fc = tape.mul(f, c_prev);
            let ig = tape.mul(i, g);
            let c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc);
            CellState { h, c: Some(c) }
        }
        CellKind::Gru => {
            let hw = tape.add_row(hw, p.var(&format!("{prefix}.bh")));
            let xz = tape.slice(xw, 0, hd);
            let hz = tape.slice(hw, 0, hd);
            let z = tape.add(xz, hz);
            let z = tape.sigmoid(z);
            let xr = tape.slice(xw, hd, 2 * hd);
            let hr = tape.slice(hw, hd, 2 * hd);
            let r = tape.add(xr, hr);
            let r = tape.sigmoid(r);
            let xn = tape.slice(xw, 2 * hd, 3 * hd);
            let hn = tape.slice(hw, 2 * hd, 3 * hd);
            let rh = tape.mul(r, hn);
            let n = tape.add(xn, rh);
            let n = tape.tanh(n);
            // h' = n + z * (h - n)
            let d = tape.sub(s.h, n);
            let zd = tape.mul(z, d);
            let h = tape.add(n, zd);
            CellState { h, c: None }
        }
    }
}

fn check_dims(name: &str, dims: &[(&str, usize)]) -> Result<()> {
    for (field, v) in dims {
        if *v == 0 {
            return Err(Error::Config(format!("{name}: `{field}` must be >= 1")));
        }
    }
    Ok(())
}

fn expect_shape(what: &str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    if m.rows != rows || m.cols != cols {
        return Err(Error::Shape(format!(
            "{what}: expected {rows}x{cols}, got {}x{}",
            m.rows, m.cols
        )));
    }
    Ok(())
}

/// Recurrent encoder, latent concatenation at the bottleneck, autoregressive
/// recurrent decoder with a linear 2D head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub obs_len: usize,
    pub pred_len: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// Length of the one-hot condition appended to every observed step; 0 = unconditioned.
    #[serde(default)]
    pub cond_dim: usize,
    #[serde(default)]
    pub cell: CellKind,
}

impl GeneratorConfig {
    pub fn new(obs_len: usize, pred_len: usize) -> Self {
        GeneratorConfig {
            obs_len,
            pred_len,
            hidden_dim: 32,
            latent_dim: 8,
            cond_dim: 0,
            cell: CellKind::Lstm,
        }
    }

    pub fn with_condition(mut self, k: usize) -> Self {
        self.cond_dim = k;
        self
    }

    pub fn input_dim(&self) -> usize {
        2 + self.cond_dim
    }

    pub fn mode_conditioned(&self) -> bool {
        self.cond_dim > 0
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(
            "generator",
            &[
                ("obs_len", self.obs_len),
                ("pred_len", self.pred_len),
                ("hidden_dim", self.hidden_dim),
                ("latent_dim", self.latent_dim),
            ],
        )
    }

    pub fn fingerprint(&self) -> String {
        sha256_json(&("generator", self))
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new(self.fingerprint(), seed);
        let hd = self.hidden_dim;
        init_cell(&mut p, &mut rng, "enc", self.cell, self.input_dim(), hd);
        init_linear(&mut p, &mut rng, "bridge", hd + self.latent_dim, hd);
        init_cell(&mut p, &mut rng, "dec", self.cell, 2, hd);
        init_linear(&mut p, &mut rng, "out", hd, 2);
        p
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, obs: Var, cond: Option<Var>, z: Var) -> Var {
        let batch = tape.value(obs).rows;
        let hd = self.hidden_dim;
        let mut s = zero_state(tape, self.cell, batch, hd);
        for step in 0..self.obs_len {
            let x = tape.slice(obs, 2 * step, 2 * step + 2);
            let x = match cond {
                Some(c) => tape.concat(&[x, c]),
                None => x,
            };
            s = cell_step(tape, p, "enc", self.cell, hd, x, s);
        }
        let hz = tape.concat(&[s.h, z]);
        let h0 = linear(tape, p, "bridge", hz);
        let h0 = tape.tanh(h0);
        let mut d = CellState {
            h: h0,
            c: (self.cell == CellKind::Lstm).then(|| tape.constant(Mat::zeros(batch, hd))),
        };
        let mut prev = tape.slice(obs, 2 * (self.obs_len - 1), 2 * self.obs_len);
        let mut outs = Vec::with_capacity(self.pred_len);
        for _ in 0..self.pred_len {
            d = cell_step(tape, p, "dec", self.cell, hd, prev, d);
            let y = linear(tape, p, "out", d.h);
            outs.push(y);
            prev = y;
        }
        tape.concat(&outs)
    }

    fn check_inputs(&self, obs: &Mat, cond: Option<&Mat>, z: &Mat) -> Result<()> {
        let b = obs.rows;
        expect_shape("generator obs", obs, b, 2 * self.obs_len)?;
        expect_shape("generator z", z, b, self.latent_dim)?;
        match (cond, self.mode_conditioned()) {
            (Some(c), true) => expect_shape("generator condition", c, b, self.cond_dim),
            (None, false) => Ok(()),
            (Some(_), false) => Err(Error::Shape("condition given to an unconditioned generator".into())),
            (None, true) => Err(Error::Shape("conditioned generator called without a condition".into())),
        }
    }

    /// Predicted future displacements, `B x 2h`.
    pub fn predict(&self, params: &ModelParams, obs: &Mat, cond: Option<&Mat>, z: &Mat) -> Result<Mat> {
        self.check_inputs(obs, cond, z)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let o = tape.constant(obs.clone());
        let c = cond.map(|c| tape.constant(c.clone()));
        let zv = tape.constant(z.clone());
        let y = self.forward(&mut tape, &p, o, c, zv);
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Mlp,
    Recurrent,
}

/// Encoder producing features shared by the realness classifier and the
/// clustering step, followed by a linear classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    #[serde(default)]
    pub encoder: EncoderKind,
    /// Width of the first MLP layer (unused by the recurrent encoder).
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Number of displacement steps in a full track (`t + h`).
    pub seq_len: usize,
    #[serde(default)]
    pub cond_dim: usize,
    #[serde(default)]
    pub cell: CellKind,
}

impl DiscriminatorConfig {
    pub fn new(seq_len: usize) -> Self {
        DiscriminatorConfig {
            encoder: EncoderKind::Mlp,
            hidden_dim: 64,
            feature_dim: 64,
            seq_len,
            cond_dim: 0,
            cell: CellKind::Lstm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(
            "discriminator",
            &[
                ("hidden_dim", self.hidden_dim),
                ("feature_dim", self.feature_dim),
                ("seq_len", self.seq_len),
            ],
        )
    }

    pub fn fingerprint(&self) -> String {
        sha256_json(&("discriminator", self))
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new(self.fingerprint(), seed);
        match self.encoder {
            EncoderKind::Mlp => {
                init_linear(&mut p, &mut rng, "enc.l1", 2 * self.seq_len + self.cond_dim, self.hidden_dim);
                init_linear(&mut p, &mut rng, "enc.l2", self.hidden_dim, self.feature_dim);
            }
            EncoderKind::Recurrent => {
                init_cell(&mut p, &mut rng, "enc.rnn", self.cell, 2 + self.cond_dim, self.feature_dim);
            }
        }
        init_linear(&mut p, &mut rng, "cls", self.feature_dim, 1);
        p
    }

    /// Returns `(features, logit)`; the realness score is `sigmoid(logit)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, full: Var, cond: Option<Var>) -> (Var, Var) {
        let features = match self.encoder {
            EncoderKind::Mlp => {
                let x = match cond {
                    Some(c) => tape.concat(&[full, c]),
                    None => full,
                };
                let h = linear(tape, p, "enc.l1", x);
                let h = tape.leaky_relu(h, LEAKY_SLOPE);
                let f = linear(tape, p, "enc.l2", h);
                tape.leaky_relu(f, LEAKY_SLOPE)
            }
            EncoderKind::Recurrent => {
                let batch = tape.value(full).rows;
                let mut s = zero_state(tape, self.cell, batch, self.feature_dim);
                for step in 0..self.seq_len {
                    let x = tape.slice(full, 2 * step, 2 * step + 2);
                    let x = match cond {
                        Some(c) => tape.concat(&[x, c]),
                        None => x,
                    };
                    s = cell_step(tape, p, "enc.rnn", self.cell, self.feature_dim, x, s);
                }
                s.h
            }
        };
        let logit = linear(tape, p, "cls", features);
        (features, logit)
    }

    /// Features (`B x feature_dim`) and realness scores in (0, 1).
    pub fn evaluate(&self, params: &ModelParams, full: &Mat, cond: Option<&Mat>) -> Result<(Mat, Vec<f64>)> {
        expect_shape("discriminator input", full, full.rows, 2 * self.seq_len)?;
        if let Some(c) = cond {
            expect_shape("discriminator condition", c, full.rows, self.cond_dim)?;
        } else if self.cond_dim > 0 {
            return Err(Error::Shape("conditioned discriminator called without a condition".into()));
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(full.clone());
        let c = cond.map(|c| tape.constant(c.clone()));
        let (f, logit) = self.forward(&mut tape, &p, x, c);
        let scores = tape
            .value(logit)
            .data
            .iter()
            .map(|&l| 1.0 / (1.0 + (-l).exp()))
            .collect();
        Ok((tape.value(f).clone(), scores))
    }
}

/// Deterministic forecaster: recurrent encoder followed by an MLP that emits
/// all future steps at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub obs_len: usize,
    pub pred_len: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    #[serde(default)]
    pub cell: CellKind,
}

impl BaselineConfig {
    pub fn new(obs_len: usize, pred_len: usize) -> Self {
        BaselineConfig {
            obs_len,
            pred_len,
            hidden_dim: 32,
            mlp_dim: 64,
            cell: CellKind::Lstm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(
            "baseline",
            &[
                ("obs_len", self.obs_len),
                ("pred_len", self.pred_len),
                ("hidden_dim", self.hidden_dim),
                ("mlp_dim", self.mlp_dim),
            ],
        )
    }

    pub fn fingerprint(&self) -> String {
        sha256_json(&("baseline", self))
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new(self.fingerprint(), seed);
        init_cell(&mut p, &mut rng, "enc", self.cell, 2, self.hidden_dim);
        init_linear(&mut p, &mut rng, "head.l1", self.hidden_dim, self.mlp_dim);
        init_linear(&mut p, &mut rng, "head.l2", self.mlp_dim, 2 * self.pred_len);
        p
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, obs: Var) -> Var {
        let batch = tape.value(obs).rows;
        let mut s = zero_state(tape, self.cell, batch, self.hidden_dim);
        for step in 0..self.obs_len {
            let x = tape.slice(obs, 2 * step, 2 * step + 2);
            s = cell_step(tape, p, "enc", self.cell, self.hidden_dim, x, s);
        }
        let h = linear(tape, p, "head.l1", s.h);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        linear(tape, p, "head.l2", h)
    }

    pub fn predict(&self, params: &ModelParams, obs: &Mat) -> Result<Mat> {
        expect_shape("baseline obs", obs, obs.rows, 2 * self.obs_len)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let o = tape.constant(obs.clone());
        let y = self.forward(&mut tape, &p, o);
        Ok(tape.value(y).clone())
    }
}

fn flatten(points: &[Point2]) -> impl Iterator<Item = f64> + '_ {
    points.iter().flat_map(|p| [p.x, p.y])
}

pub fn obs_matrix(windows: &[&TrackWindow]) -> Mat {
    let cols = windows.first().map_or(0, |w| 2 * w.obs.len());
    Mat::from_vec(windows.len(), cols, windows.iter().flat_map(|w| flatten(&w.obs)).collect())
}

pub fn fut_matrix(windows: &[&TrackWindow]) -> Mat {
    let cols = windows.first().map_or(0, |w| 2 * w.fut.len());
    Mat::from_vec(windows.len(), cols, windows.iter().flat_map(|w| flatten(&w.fut)).collect())
}

pub fn full_matrix(windows: &[&TrackWindow]) -> Mat {
    let cols = windows.first().map_or(0, |w| 2 * (w.obs.len() + w.fut.len()));
    Mat::from_vec(
        windows.len(),
        cols,
        windows.iter().flat_map(|w| concat_full_track(w).flatten()).collect(),
    )
}

/// Stacks one-hot rows for class ids.
pub fn one_hot_matrix(ids: &[usize], k: usize) -> Mat {
    let mut m = Mat::zeros(ids.len(), k);
    for (r, &id) in ids.iter().enumerate() {
        m.set(r, id, 1.0);
    }
    m
}

/// Row `r` of a `B x 2h` prediction as displacement vectors.
pub fn row_to_points(m: &Mat, r: usize) -> Vec<Point2> {
    m.row(r).chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
    }

    fn small_generator(k: usize) -> GeneratorConfig {
        GeneratorConfig {
            hidden_dim: 8,
            latent_dim: 4,
            ..GeneratorConfig::new(8, 12)
        }
        .with_condition(k)
    }

    fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = small_generator(0);
        let params = cfg.init_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = gaussian(&mut rng, 5, 16);
        let z = gaussian(&mut rng, 5, 4);
        let a = cfg.predict(&params, &obs, None, &z).unwrap();
        let b = cfg.predict(&params, &obs, None, &z).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (5, 24));
    }

    #[test]
    fn distinct_latents_give_distinct_outputs() {
        let cfg = small_generator(0);
        let params = cfg.init_params(11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs_row = gaussian(&mut rng, 1, 16);
        let obs = Mat::from_vec(10, 16, (0..10).flat_map(|_| obs_row.data.clone()).collect());
        let z = gaussian(&mut rng, 10, 4);
        let y = cfg.predict(&params, &obs, None, &z).unwrap();
        for i in 0..10 {
            for j in i + 1..10 {
                let d = y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(d > 0.0, "samples {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn flipping_the_mode_changes_the_output() {
        let cfg = small_generator(4);
        let params = cfg.init_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = gaussian(&mut rng, 3, 16);
        let z = gaussian(&mut rng, 3, 4);
        let outs: Vec<Mat> = (0..4)
            .map(|m| cfg.predict(&params, &obs, Some(&one_hot_matrix(&[m; 3], 4)), &z).unwrap())
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(max_abs_diff(&outs[i], &outs[j]) > 1e-8);
            }
        }
    }

    #[test]
    fn condition_gradient_is_not_zero() {
        let cfg = small_generator(4);
        let params = cfg.init_params(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let obs = tape.constant(gaussian(&mut rng, 2, 16));
        let cond = tape.input(one_hot_matrix(&[1, 3], 4));
        let z = tape.constant(gaussian(&mut rng, 2, 4));
        let y = cfg.forward(&mut tape, &p, obs, Some(cond), z);
        let loss = tape.sum(y);
        let g = tape.backward(loss).take(cond).unwrap();
        assert!(g.data.iter().any(|v| v.abs() > 1e-8));
    }

    #[test]
    fn generator_rejects_bad_shapes() {
        let cfg = small_generator(4);
        let params = cfg.init_params(0);
        let obs = Mat::zeros(2, 16);
        let z = Mat::zeros(2, 4);
        assert!(matches!(cfg.predict(&params, &obs, None, &z), Err(Error::Shape(_))));
        let cond = one_hot_matrix(&[0, 1], 4);
        assert!(cfg.predict(&params, &Mat::zeros(2, 14), Some(&cond), &z).is_err());
        assert!(cfg.predict(&params, &obs, Some(&cond), &Mat::zeros(2, 3)).is_err());
        let plain = small_generator(0);
        assert!(plain.predict(&plain.init_params(0), &obs, Some(&cond), &z).is_err());
    }

    #[test]
    fn discriminator_scores_and_features() {
        for encoder in [EncoderKind::Mlp, EncoderKind::Recurrent] {
            let cfg = DiscriminatorConfig {
                encoder,
                hidden_dim: 16,
                feature_dim: 6,
                ..DiscriminatorConfig::new(20)
            };
            let params = cfg.init_params(4);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut x = gaussian(&mut rng, 6, 40);
            x.data.iter_mut().take(40).for_each(|v| *v *= 1e3);
            let (f1, s1) = cfg.evaluate(&params, &x, None).unwrap();
            let (f2, s2) = cfg.evaluate(&params, &x, None).unwrap();
            assert_eq!(f1, f2);
            assert_eq!(s1, s2);
            assert_eq!(f1.shape(), (6, 6));
            assert!(s1.iter().all(|&s| s > 0.0 && s < 1.0));
            assert!(cfg.evaluate(&params, &Mat::zeros(2, 38), None).is_err());
        }
    }

    #[test]
    fn baseline_output_length_for_both_profiles() {
        for (t, h) in [(8, 12), (20, 30)] {
            let cfg = BaselineConfig {
                hidden_dim: 8,
                mlp_dim: 8,
                ..BaselineConfig::new(t, h)
            };
            let params = cfg.init_params(1);
            let obs = gaussian(&mut ChaCha8Rng::seed_from_u64(5), 3, 2 * t);
            let y = cfg.predict(&params, &obs).unwrap();
            assert_eq!(y.shape(), (3, 2 * h));
            assert_eq!(y, cfg.predict(&params, &obs).unwrap());
            assert!(cfg.predict(&params, &Mat::zeros(3, 2 * t + 2)).is_err());
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = small_generator(2);
        assert_eq!(cfg.init_params(9), cfg.init_params(9));
        assert_ne!(cfg.init_params(9).tensors, cfg.init_params(10).tensors);
        let d = DiscriminatorConfig::new(20);
        assert_eq!(d.init_params(1), d.init_params(1));
        assert_ne!(d.init_params(1).tensors, d.init_params(2).tensors);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_generator(3);
        let params = cfg.init_params(21);
        let path = dir.path().join("g.json");
        crate::nn::Checkpoint::new("generator", &cfg, 7, params.clone()).save(&path).unwrap();
        let back = crate::nn::Checkpoint::load_expecting(&path, "generator", &cfg.fingerprint()).unwrap();
        assert_eq!(back.params, params);
        for (name, m) in &params.tensors {
            let bits: Vec<u64> = m.data.iter().map(|v| v.to_bits()).collect();
            let back_bits: Vec<u64> = back.params.tensors[name].data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, back_bits);
        }
        assert_eq!(back.config_as::<GeneratorConfig>().unwrap(), cfg);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn generator_shape_holds(
            t in 1usize..6, h in 1usize..6, hd in 1usize..6, zd in 1usize..4,
            k in 0usize..4, b in 1usize..4, gru in any::<bool>(), seed in any::<u64>(),
        ) {
            let cfg = GeneratorConfig {
                obs_len: t, pred_len: h, hidden_dim: hd, latent_dim: zd, cond_dim: k,
                cell: if gru { CellKind::Gru } else { CellKind::Lstm },
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obs = gaussian(&mut rng, b, 2 * t);
            let z = gaussian(&mut rng, b, zd);
            let cond = (k > 0).then(|| one_hot_matrix(&vec![k - 1; b], k));
            let y = cfg.predict(&cfg.init_params(seed), &obs, cond.as_ref(), &z).unwrap();
            prop_assert_eq!(y.shape(), (b, 2 * h));
            prop_assert!(y.is_finite());
        }

        #[test]
        fn feature_length_matches_config(
            seq in 1usize..8, hd in 1usize..8, fd in 1usize..8, b in 1usize..4,
            recurrent in any::<bool>(), seed in any::<u64>(),
        ) {
            let cfg = DiscriminatorConfig {
                encoder: if recurrent { EncoderKind::Recurrent } else { EncoderKind::Mlp },
                hidden_dim: hd,
                feature_dim: fd,
                ..DiscriminatorConfig::new(seq)
            };
            let x = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), b, 2 * seq);
            let (f, s) = cfg.evaluate(&cfg.init_params(seed), &x, None).unwrap();
            prop_assert_eq!(f.shape(), (b, fd));
            prop_assert_eq!(s.len(), b);
        }
    }
}
