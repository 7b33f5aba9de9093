//! Synthetic multi-behavior benchmark with known templates.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{positions_to_displacements, Point2, TrackWindow};
use crate::error::{Error, Result};
use crate::util::{derive_seed, load_config, sha256_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Straight,
    ArcLeft,
    ArcRight,
    StopAndGo,
    UTurn,
}

impl PathKind {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "straight" => PathKind::Straight,
            "arc-left" => PathKind::ArcLeft,
            "arc-right" => PathKind::ArcRight,
            "stop-and-go" => PathKind::StopAndGo,
            "u-turn" => PathKind::UTurn,
            other => return Err(Error::Config(format!("unknown template `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTemplate {
    pub name: String,
    pub count: usize,
    /// m/s
    pub speed: [f64; 2],
    /// 1/m, arcs only
    #[serde(default)]
    pub curvature: [f64; 2],
    /// meters
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub obs_len: usize,
    pub pred_len: usize,
    /// seconds between samples
    pub period: f64,
    /// Largest initial heading deviation from +x, radians.
    #[serde(default = "default_heading")]
    pub heading_jitter: f64,
    pub seed: u64,
    pub templates: Vec<ModeTemplate>,
}

fn default_heading() -> f64 {
    0.15
}

fn template(name: &str, count: usize, speed: [f64; 2], curvature: [f64; 2]) -> ModeTemplate {
    ModeTemplate {
        name: name.into(),
        count,
        speed,
        curvature,
        noise_std: 0.02,
    }
}

impl BenchmarkSpec {
    /// Five templates, 1000 windows with a tenfold imbalance, 8 observed and
    /// 12 predicted steps at 0.4 s.
    pub fn desk_default(seed: u64) -> Self {
        BenchmarkSpec {
            obs_len: 8,
            pred_len: 12,
            period: 0.4,
            heading_jitter: default_heading(),
            seed,
            templates: vec![
                template("straight", 400, [1.0, 1.5], [0.0, 0.0]),
                template("arc-left", 300, [1.0, 1.5], [0.12, 0.2]),
                template("arc-right", 200, [1.0, 1.5], [0.12, 0.2]),
                template("stop-and-go", 60, [1.0, 1.5], [0.0, 0.0]),
                template("u-turn", 40, [1.0, 1.5], [0.0, 0.0]),
            ],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: BenchmarkSpec = load_config(path)?;
        s.validate()?;
        Ok(s)
    }

    /// Same templates with the given count for each one.
    pub fn balanced(&self, per_template: usize, seed: u64) -> Self {
        let mut s = self.clone();
        s.seed = seed;
        for t in &mut s.templates {
            t.count = per_template;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_len == 0 || self.pred_len == 0 || !(self.period > 0.0) {
            return Err(Error::Config("benchmark needs obs_len, pred_len and period > 0".into()));
        }
        for t in &self.templates {
            PathKind::from_name(&t.name)?;
            if !(t.speed[0] > 0.0 && t.speed[0] <= t.speed[1]) {
                return Err(Error::Config(format!("template `{}`: invalid speed range", t.name)));
            }
            if !(t.curvature[0] >= 0.0 && t.curvature[0] <= t.curvature[1]) {
                return Err(Error::Config(format!("template `{}`: invalid curvature range", t.name)));
            }
            if !(t.noise_std >= 0.0) {
                return Err(Error::Config(format!("template `{}`: negative noise", t.name)));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_json(self)
    }

    pub fn total(&self) -> usize {
        self.templates.iter().map(|t| t.count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub spec_hash: String,
    pub spec: BenchmarkSpec,
    pub counts: BTreeMap<String, usize>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Per-step arc length and curvature of a full track with `n` steps.
/// Maneuvers begin within the last three observed steps.
fn profile(kind: PathKind, tpl: &ModeTemplate, obs: usize, n: usize, dt: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let v = uniform(rng, tpl.speed);
    let onset = |rng: &mut ChaCha8Rng| rng.random_range(obs.saturating_sub(3).max(1)..obs.max(2));
    let ds = v * dt;
    match kind {
        PathKind::Straight => vec![(ds, 0.0); n],
        PathKind::ArcLeft => vec![(ds, uniform(rng, tpl.curvature)); n],
        PathKind::ArcRight => vec![(ds, -uniform(rng, tpl.curvature)); n],
        PathKind::StopAndGo => {
            let start = onset(rng);
            let stop = rng.random_range(3..=5);
            let shape: Vec<f64> = std::iter::once(0.5)
                .chain(std::iter::repeat_n(0.0, stop))
                .chain(std::iter::once(0.5))
                .collect();
            (0..n)
                .map(|i| {
                    let f = if i < start { 1.0 } else { shape.get(i - start).copied().unwrap_or(1.0) };
                    (ds * f, 0.0)
                })
                .collect()
        }
        PathKind::UTurn => {
            let turn = 5;
            let start = onset(rng);
            let slow = 0.6 * ds;
            let kappa = PI / (slow * turn as f64);
            (0..n)
                .map(|i| if i >= start && i < start + turn { (slow, kappa) } else { (ds, 0.0) })
                .collect()
        }
    }
}

/// Integrates constant-curvature steps exactly, returning `n + 1` positions.
fn integrate(start: Point2, heading: f64, steps: &[(f64, f64)]) -> Vec<Point2> {
    let mut p = start;
    let mut th = heading;
    let mut out = Vec::with_capacity(steps.len() + 1);
    out.push(p);
    for &(ds, k) in steps {
        let d = if k.abs() < 1e-12 {
            Point2::new(ds * th.cos(), ds * th.sin())
        } else {
            let th2 = th + k * ds;
            Point2::new((th2.sin() - th.sin()) / k, (th.cos() - th2.cos()) / k)
        };
        th += k * ds;
        p = p + d;
        out.push(p);
    }
    out
}

fn make_window(spec: &BenchmarkSpec, tpl: &ModeTemplate, index: usize) -> Result<TrackWindow> {
    let kind = PathKind::from_name(&tpl.name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("{}/{index}", tpl.name)));
    let n = spec.obs_len + spec.pred_len;
    let start = Point2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
    let heading = if spec.heading_jitter > 0.0 {
        rng.random_range(-spec.heading_jitter..spec.heading_jitter)
    } else {
        0.0
    };
    let steps = profile(kind, tpl, spec.obs_len, n, spec.period, &mut rng);
    let mut pos = integrate(start, heading, &steps);
    if tpl.noise_std > 0.0 {
        let noise = Normal::new(0.0, tpl.noise_std).expect("valid std");
        for p in &mut pos {
            p.x += noise.sample(&mut rng);
            p.y += noise.sample(&mut rng);
        }
    }
    let (_, displ) = positions_to_displacements(&pos)?;
    Ok(TrackWindow {
        source_id: format!("{}-{index}#0", tpl.name),
        label: tpl.name.clone(),
        origin: pos[spec.obs_len],
        obs: displ[..spec.obs_len].to_vec(),
        fut: displ[spec.obs_len..].to_vec(),
    })
}

/// Windows labeled by template name, in template order.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<(Vec<TrackWindow>, BenchmarkManifest)> {
    spec.validate()?;
    let jobs: Vec<(&ModeTemplate, usize)> = spec
        .templates
        .iter()
        .flat_map(|t| (0..t.count).map(move |i| (t, i)))
        .collect();
    let windows = jobs
        .par_iter()
        .map(|&(t, i)| make_window(spec, t, i))
        .collect::<Result<Vec<_>>>()?;
    let counts = spec.templates.iter().map(|t| (t.name.clone(), t.count)).collect();
    Ok((
        windows,
        BenchmarkManifest {
            spec_hash: spec.hash(),
            spec: spec.clone(),
            counts,
        },
    ))
}

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same samples.
pub fn adjusted_rand_index<A: Ord, B: Ord>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as f64;
    let mut table: BTreeMap<(&A, &B), f64> = BTreeMap::new();
    let mut ra: BTreeMap<&A, f64> = BTreeMap::new();
    let mut rb: BTreeMap<&B, f64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = ra.values().map(|&c| choose2(c)).sum();
    let sb: f64 = rb.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < f64::EPSILON {
        // both labelings trivial in the same way
        return if (index - expected).abs() < f64::EPSILON { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// Chance-adjusted agreement between cluster ids and template labels.
pub fn mode_recovery_score(cluster_ids: &[usize], labels: &[String]) -> f64 {
    adjusted_rand_index(cluster_ids, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::cluster_features;
    use crate::data::displacements_to_positions;
    use crate::nn::full_matrix;

    #[test]
    fn exact_counts() {
        let mut spec = BenchmarkSpec::desk_default(1);
        spec.templates = vec![template("straight", 90, [1.0, 1.5], [0.0, 0.0]), template("arc-left", 10, [1.0, 1.5], [0.1, 0.2])];
        let (w, m) = generate_benchmark(&spec).unwrap();
        assert_eq!(w.len(), 100);
        assert_eq!(w.iter().filter(|x| x.label == "straight").count(), 90);
        assert_eq!(m.counts["arc-left"], 10);
        for x in &w {
            x.check_lengths(8, 12).unwrap();
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_benchmark(&BenchmarkSpec::desk_default(3)).unwrap().0;
        let b = generate_benchmark(&BenchmarkSpec::desk_default(3)).unwrap().0;
        let c = generate_benchmark(&BenchmarkSpec::desk_default(4)).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn maneuvers_straddle_the_split() {
        let mut spec = BenchmarkSpec::desk_default(5);
        spec.templates = vec![template("stop-and-go", 50, [1.0, 1.5], [0.0, 0.0]), template("u-turn", 50, [1.0, 1.5], [0.0, 0.0])];
        for t in &mut spec.templates {
            t.noise_std = 0.0;
        }
        for w in generate_benchmark(&spec).unwrap().0 {
            let last = w.obs[w.obs.len() - 1];
            assert!(w.obs[0].dist(&last) > 1e-6, "{}: maneuver not observed", w.source_id);
            assert!(w.fut[0].dist(&w.obs[0]) > 1e-6, "{}: maneuver over before the split", w.source_id);
        }
    }

    #[test]
    fn noiseless_straight_has_constant_displacement() {
        let mut spec = BenchmarkSpec::desk_default(2);
        spec.templates = vec![template("straight", 5, [1.0, 1.5], [0.0, 0.0])];
        spec.templates[0].noise_std = 0.0;
        for w in generate_benchmark(&spec).unwrap().0 {
            let all: Vec<Point2> = w.obs.iter().chain(&w.fut).copied().collect();
            for d in &all {
                assert!(d.dist(&all[0]) < 1e-12);
            }
        }
    }

    /// Algebraic least-squares circle fit, returning the radius.
    fn fit_circle(p: &[Point2]) -> (Point2, f64) {
        // solve x^2 + y^2 + D x + E y + F = 0 by normal equations
        let mut ata = [[0.0; 3]; 3];
        let mut atb = [0.0; 3];
        for q in p {
            let row = [q.x, q.y, 1.0];
            let rhs = -(q.x * q.x + q.y * q.y);
            for i in 0..3 {
                for j in 0..3 {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * rhs;
            }
        }
        let det = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d0 = det(ata);
        let mut sol = [0.0; 3];
        for (c, s) in sol.iter_mut().enumerate() {
            let mut m = ata;
            for r in 0..3 {
                m[r][c] = atb[r];
            }
            *s = det(m) / d0;
        }
        let center = Point2::new(-sol[0] / 2.0, -sol[1] / 2.0);
        let r = (center.x * center.x + center.y * center.y - sol[2]).sqrt();
        (center, r)
    }

    /// Center of the best circle of fixed radius `r` (Gauss-Newton).
    fn fit_center(p: &[Point2], r: f64) -> Point2 {
        let mut c = fit_circle(p).0;
        for _ in 0..100 {
            let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for q in p {
                let d = q.dist(&c);
                let (jx, jy) = (-(q.x - c.x) / d, -(q.y - c.y) / d);
                let res = d - r;
                a11 += jx * jx;
                a12 += jx * jy;
                a22 += jy * jy;
                b1 += jx * res;
                b2 += jy * res;
            }
            let det = a11 * a22 - a12 * a12;
            c.x -= (a22 * b1 - a12 * b2) / det;
            c.y -= (a11 * b2 - a12 * b1) / det;
        }
        c
    }

    #[test]
    fn arcs_lie_on_their_circle() {
        let mut spec = BenchmarkSpec::desk_default(5);
        let kappa = 0.15;
        let noise = 0.02;
        spec.templates = vec![
            template("arc-left", 20, [1.2, 1.2], [kappa, kappa]),
            template("arc-right", 20, [1.2, 1.2], [kappa, kappa]),
        ];
        for w in generate_benchmark(&spec).unwrap().0 {
            let first = w.observed_positions()[0];
            let all: Vec<Point2> = w.obs.iter().chain(&w.fut).copied().collect();
            let pos = displacements_to_positions(first, &all);
            let c = fit_center(&pos, 1.0 / kappa);
            let rms = (pos.iter().map(|p| (p.dist(&c) - 1.0 / kappa).powi(2)).sum::<f64>() / pos.len() as f64).sqrt();
            assert!(rms <= 3.0 * noise, "rms residual {rms}");
        }
    }

    #[test]
    fn noiseless_arc_is_exact() {
        let mut spec = BenchmarkSpec::desk_default(6);
        spec.templates = vec![template("arc-left", 3, [1.0, 1.0], [0.2, 0.2])];
        spec.templates[0].noise_std = 0.0;
        for w in generate_benchmark(&spec).unwrap().0 {
            let first = w.observed_positions()[0];
            let all: Vec<Point2> = w.obs.iter().chain(&w.fut).copied().collect();
            let pos = displacements_to_positions(first, &all);
            let (c, r) = fit_circle(&pos);
            assert!((r - 5.0).abs() < 1e-6);
            for p in &pos {
                assert!((p.dist(&c) - 5.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unknown_template_rejected() {
        let mut spec = BenchmarkSpec::desk_default(0);
        spec.templates[0].name = "zigzag".into();
        assert!(matches!(generate_benchmark(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn ari_extremes() {
        let a = [0, 0, 1, 1, 2, 2];
        let b = ["x", "x", "z", "z", "y", "y"];
        assert!((adjusted_rand_index(&a, &b) - 1.0).abs() < 1e-12);
        let one = [0usize; 6];
        assert!(adjusted_rand_index(&one, &b) <= 0.0);
    }

    #[test]
    fn ari_null_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let truth: Vec<usize> = (0..500).map(|i| i % 5).collect();
        for _ in 0..1000 {
            let guess: Vec<usize> = (0..500).map(|_| rng.random_range(0..5)).collect();
            assert!(adjusted_rand_index(&guess, &truth).abs() < 0.05);
        }
    }

    #[test]
    fn raw_displacements_separate_templates() {
        let (w, _) = generate_benchmark(&BenchmarkSpec::desk_default(11)).unwrap();
        let idx: Vec<usize> = (0..w.len()).step_by(2).collect();
        let sub: Vec<&TrackWindow> = idx.iter().map(|&i| &w[i]).collect();
        let labels: Vec<String> = sub.iter().map(|x| x.label.clone()).collect();
        let s = cluster_features(&full_matrix(&sub), 5, 0).unwrap();
        let score = mode_recovery_score(&s.cluster_ids, &labels);
        assert!(score >= 0.9, "recovery {score}");
    }
}
