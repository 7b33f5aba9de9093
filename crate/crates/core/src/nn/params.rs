//! Named parameter sets, initialization and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub fingerprint: String,
    pub seed: u64,
    pub tensors: BTreeMap<String, Mat>,
}

impl ModelParams {
    pub fn new(fingerprint: String, seed: u64) -> Self {
        ModelParams {
            fingerprint,
            seed,
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Mat::is_finite)
    }

    /// Registers every tensor on the tape. Trainable parameters become
    /// gradient-receiving inputs; otherwise they are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.input(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound parameter set.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradient per parameter; parameters the loss does not touch get zeros.
    pub fn gradients(&self, grads: &mut Grads, params: &ModelParams) -> BTreeMap<String, Mat> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads.take(v).unwrap_or_else(|| {
                    let p = &params.tensors[name];
                    Mat::zeros(p.rows, p.cols)
                });
                (name.clone(), g)
            })
            .collect()
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Mat::from_vec(fan_in, fan_out, data)
}

/// Square orthogonal matrix from Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for i in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
                let qi = cols[i].clone();
                for (a, b) in cols[j].iter_mut().zip(&qi) {
                    *a -= dot * b;
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            let mut m = Mat::zeros(n, n);
            for (j, col) in cols.iter().enumerate() {
                for (i, &v) in col.iter().enumerate() {
                    m.set(i, j, v);
                }
            }
            return m;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub params: ModelParams,
}

pub const CHECKPOINT_FORMAT: &str = "modeforge-checkpoint/1";

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, step: u64, params: ModelParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            kind: kind.into(),
            config: serde_json::to_value(config).expect("serializable config"),
            step,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = crate::util::read_json(path)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint format `{}`",
                path.display(),
                ck.format
            )));
        }
        Ok(ck)
    }

    /// Loads and checks the stored fingerprint against `expected`.
    pub fn load_expecting(path: &Path, kind: &str, expected_fingerprint: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::Config(format!(
                "{}: checkpoint holds a `{}`, expected `{kind}`",
                path.display(),
                ck.kind
            )));
        }
        if ck.params.fingerprint != expected_fingerprint {
            return Err(Error::Config(format!(
                "{}: config fingerprint mismatch ({} vs {expected_fingerprint})",
                path.display(),
                ck.params.fingerprint
            )));
        }
        Ok(ck)
    }

    pub fn config_as<C: serde::de::DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::json("checkpoint config", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthogonal(&mut rng, 6);
        let qtq = {
            let mut c = Mat::zeros(6, 6);
            crate::tensor::gemm(&q, true, &q, false, &mut c, 0.0);
            c
        };
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq.get(i, j) - e).abs() < 1e-10);
            }
        }
    }
}
