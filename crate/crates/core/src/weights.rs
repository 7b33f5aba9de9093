//! Per-mode weights and the two ways they enter forecaster training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub cluster_id: usize,
    /// `None` for an empty cluster.
    pub ade: Option<f64>,
    pub fde: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub ade: f64,
    pub fde: f64,
    pub density: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            ade: 1.0,
            fde: 1.0,
            density: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub lambdas: Lambdas,
    /// Λ per cluster.
    pub weights: Vec<f64>,
    /// Λ normalized to sum to one.
    pub probs: Vec<f64>,
    /// Per cluster `[ade term, fde term, density term]`.
    pub terms: Vec<[f64; 3]>,
}

impl WeightTable {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Λ of each sample's cluster.
    pub fn sample_weights(&self, cluster_ids: &[usize]) -> Vec<f64> {
        cluster_ids.iter().map(|&c| self.weights[c]).collect()
    }

    /// Per-sample weights rescaled to mean one over `cluster_ids`.
    pub fn normalized_sample_weights(&self, cluster_ids: &[usize]) -> Result<Vec<f64>> {
        let w = self.sample_weights(cluster_ids);
        let m = w.iter().sum::<f64>() / w.len().max(1) as f64;
        if !(m > 0.0) {
            return Err(Error::DegenerateWeights("sample weights have zero mean".into()));
        }
        Ok(w.into_iter().map(|v| v / m).collect())
    }

    pub fn render(&self, stats: &[ClusterStats]) -> String {
        let mut s = format!(
            "lambda_ade={} lambda_fde={} lambda_d={}\n{:>7} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8}\n",
            self.lambdas.ade, self.lambdas.fde, self.lambdas.density, "cluster", "count", "ADE", "FDE", "ade_term",
            "fde_term", "d_term", "weight", "prob"
        );
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        for (i, st) in stats.iter().enumerate() {
            let t = self.terms[i];
            s.push_str(&format!(
                "{:>7} {:>6} {:>9} {:>9} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>8.4}\n",
                st.cluster_id,
                st.count,
                fmt(st.ade),
                fmt(st.fde),
                t[0],
                t[1],
                t[2],
                self.weights[i],
                self.probs[i]
            ));
        }
        s
    }
}

fn ratio(v: f64, max: f64) -> f64 {
    if max > 0.0 {
        v / max
    } else {
        0.0
    }
}

pub fn compute_weights(stats: &[ClusterStats], lambdas: Lambdas) -> Result<WeightTable> {
    if [lambdas.ade, lambdas.fde, lambdas.density].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::InvalidArgument("lambdas must be finite and non-negative".into()));
    }
    let live: Vec<&ClusterStats> = stats.iter().filter(|s| s.count > 0).collect();
    if live.is_empty() {
        return Err(Error::DegenerateWeights("no cluster has members".into()));
    }
    for s in &live {
        let (a, f) = (s.ade.unwrap_or(f64::NAN), s.fde.unwrap_or(f64::NAN));
        if !(a >= 0.0 && f >= 0.0 && a.is_finite() && f.is_finite()) {
            return Err(Error::InvalidInput(format!("cluster {} has invalid ADE/FDE", s.cluster_id)));
        }
    }
    let ade_max = live.iter().map(|s| s.ade.unwrap()).fold(0.0, f64::max);
    let fde_max = live.iter().map(|s| s.fde.unwrap()).fold(0.0, f64::max);
    let total: usize = live.iter().map(|s| s.count).sum();
    let terms: Vec<[f64; 3]> = stats
        .iter()
        .map(|s| {
            if s.count == 0 {
                return [0.0; 3];
            }
            [
                lambdas.ade * ratio(s.ade.unwrap(), ade_max),
                lambdas.fde * ratio(s.fde.unwrap(), fde_max),
                lambdas.density * s.count as f64 / total as f64,
            ]
        })
        .collect();
    let weights: Vec<f64> = terms.iter().map(|t| t[0] + t[1] + t[2]).collect();
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateWeights("all cluster weights are zero".into()));
    }
    let probs = weights.iter().map(|w| w / sum).collect();
    Ok(WeightTable {
        lambdas,
        weights,
        probs,
        terms,
    })
}

#[derive(Debug, Clone)]
enum Scheme {
    PerSample { cumulative: Vec<f64> },
    ClusterFirst { cumulative: Vec<f64>, members: Vec<Vec<usize>> },
}

/// Multinomial index sampler with replacement.
#[derive(Debug, Clone)]
pub struct WeightedBatchSampler {
    scheme: Scheme,
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

fn cumulative(w: &[f64]) -> Result<Vec<f64>> {
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("sampling weights must be finite and non-negative".into()));
    }
    let mut acc = 0.0;
    let c: Vec<f64> = w
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    if !(acc > 0.0) {
        return Err(Error::DegenerateWeights("all sampling weights are zero".into()));
    }
    Ok(c)
}

fn draw(cum: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total = *cum.last().unwrap();
    let target = rng.random::<f64>() * total;
    let i = cum.partition_point(|&c| c <= target);
    if i < cum.len() {
        i
    } else {
        // rounding put target at the total; fall back to the last positive slot
        (1..cum.len()).rev().find(|&j| cum[j] > cum[j - 1]).unwrap_or(0)
    }
}

impl WeightedBatchSampler {
    pub fn from_weights(weights: &[f64], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(WeightedBatchSampler {
            scheme: Scheme::PerSample {
                cumulative: cumulative(weights)?,
            },
            n: weights.len(),
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn uniform(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        Self::from_weights(&vec![1.0; n], batch_size, seed)
    }

    /// Sampler over samples whose probability follows their cluster's Λ.
    /// With `cluster_first`, a cluster is drawn by `probs` and then a member
    /// uniformly.
    pub fn from_table(
        cluster_ids: &[usize],
        table: &WeightTable,
        batch_size: usize,
        seed: u64,
        cluster_first: bool,
    ) -> Result<Self> {
        if let Some(&c) = cluster_ids.iter().find(|&&c| c >= table.k()) {
            return Err(Error::InvalidArgument(format!("cluster id {c} outside weight table")));
        }
        if !cluster_first {
            // scaled by the largest weight so equal weights become exactly one
            let w = table.sample_weights(cluster_ids);
            let max = w.iter().copied().fold(0.0, f64::max);
            let w: Vec<f64> = if max > 0.0 { w.iter().map(|v| v / max).collect() } else { w };
            return Self::from_weights(&w, batch_size, seed);
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        let mut members = vec![Vec::new(); table.k()];
        for (i, &c) in cluster_ids.iter().enumerate() {
            members[c].push(i);
        }
        let w: Vec<f64> =
            table.weights.iter().zip(&members).map(|(&w, m)| if m.is_empty() { 0.0 } else { w }).collect();
        Ok(WeightedBatchSampler {
            scheme: Scheme::ClusterFirst {
                cumulative: cumulative(&w)?,
                members,
            },
            n: cluster_ids.len(),
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn next_index(&mut self) -> usize {
        match &self.scheme {
            Scheme::PerSample { cumulative } => draw(cumulative, &mut self.rng),
            Scheme::ClusterFirst { cumulative, members } => {
                let c = draw(cumulative, &mut self.rng);
                let m = &members[c];
                m[self.rng.random_range(0..m.len())]
            }
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size).map(|_| self.next_index()).collect()
    }

    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        (0..self.batches_per_epoch()).map(|_| self.next_batch()).collect()
    }
}
