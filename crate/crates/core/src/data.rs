//! Trajectory domain types and the displacement/position conversions.
//!
//! Windows store motion as per-step displacement vectors (meters per
//! timestep). The absolute anchor of a window is its `origin`, the position
//! at the last observed timestep, so decoded predictions start exactly at the
//! forecast boundary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D position or displacement in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist_sq(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// One timestamped detection. `position == None` marks a missing detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub position: Option<Point2>,
}

impl Sample {
    pub fn at(t: f64, p: Point2) -> Self {
        Sample { t, position: Some(p) }
    }

    pub fn missing(t: f64) -> Self {
        Sample { t, position: None }
    }
}

/// A raw tracked entity as read from a tabular export.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub entity_id: String,
    pub label: String,
    pub samples: Vec<Sample>,
}

impl RawTrajectory {
    /// Builds a trajectory, checking that timestamps strictly increase.
    pub fn new(entity_id: impl Into<String>, label: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let traj = RawTrajectory {
            entity_id: entity_id.into(),
            label: label.into(),
            samples,
        };
        traj.check_timestamps()?;
        Ok(traj)
    }

    pub fn check_timestamps(&self) -> Result<()> {
        for pair in self.samples.windows(2) {
            if !(pair[1].t > pair[0].t) {
                return Err(Error::InvalidInput(format!(
                    "trajectory `{}`: timestamps not strictly increasing ({} then {})",
                    self.entity_id, pair[0].t, pair[1].t
                )));
            }
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.samples.iter().filter(|s| s.position.is_some()).count()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Positions of a fully interpolated trajectory; `None` if any sample is missing.
    pub fn positions(&self) -> Option<Vec<Point2>> {
        self.samples.iter().map(|s| s.position).collect()
    }
}

/// One sample: observed and future displacement sequences anchored at `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackWindow {
    pub source_id: String,
    pub label: String,
    pub origin: Point2,
    pub obs: Vec<Point2>,
    pub fut: Vec<Point2>,
}

impl TrackWindow {
    pub fn obs_len(&self) -> usize {
        self.obs.len()
    }

    pub fn pred_len(&self) -> usize {
        self.fut.len()
    }

    pub fn check_lengths(&self, obs_len: usize, pred_len: usize) -> Result<()> {
        if self.obs.len() != obs_len || self.fut.len() != pred_len {
            return Err(Error::Shape(format!(
                "window `{}` has {}+{} steps, expected {}+{}",
                self.source_id,
                self.obs.len(),
                self.fut.len(),
                obs_len,
                pred_len
            )));
        }
        if !self.origin.is_finite() || !self.obs.iter().chain(&self.fut).all(Point2::is_finite) {
            return Err(Error::InvalidInput(format!(
                "window `{}` contains non-finite values",
                self.source_id
            )));
        }
        Ok(())
    }

    /// Ground-truth future positions in meters.
    pub fn future_positions(&self) -> Vec<Point2> {
        displacements_to_positions(self.origin, &self.fut)
    }

    /// Observed positions, ending at `origin`. Includes the starting point,
    /// so the result has `obs_len + 1` entries.
    pub fn observed_positions(&self) -> Vec<Point2> {
        let total = self.obs.iter().fold(Point2::ZERO, |acc, d| acc + *d);
        let start = self.origin - total;
        let mut out = Vec::with_capacity(self.obs.len() + 1);
        out.push(start);
        out.extend(displacements_to_positions(start, &self.obs));
        out
    }

    /// Identifier of the raw trajectory this window was cut from.
    pub fn trajectory_key(&self) -> &str {
        match self.source_id.rsplit_once('#') {
            Some((head, _)) => head,
            None => &self.source_id,
        }
    }
}

/// Observed and future displacements joined end to end (length `t + h`).
#[derive(Debug, Clone, PartialEq)]
pub struct FullTrack {
    pub seq: Vec<Point2>,
}

impl FullTrack {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// Flattened `[dx0, dy0, dx1, dy1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.seq.iter().flat_map(|p| [p.x, p.y]).collect()
    }
}

pub fn concat_full_track(w: &TrackWindow) -> FullTrack {
    let mut seq = Vec::with_capacity(w.obs.len() + w.fut.len());
    seq.extend_from_slice(&w.obs);
    seq.extend_from_slice(&w.fut);
    FullTrack { seq }
}

/// Unsupervised mode of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAssignment {
    pub cluster_id: usize,
    pub one_hot: Vec<f64>,
    pub clustering_round: usize,
}

impl ModeAssignment {
    pub fn new(cluster_id: usize, k: usize, clustering_round: usize) -> Result<Self> {
        Ok(ModeAssignment {
            cluster_id,
            one_hot: one_hot(cluster_id, k)?,
            clustering_round,
        })
    }
}

pub fn one_hot(id: usize, k: usize) -> Result<Vec<f64>> {
    if id >= k {
        return Err(Error::InvalidArgument(format!("class id {id} out of range for k={k}")));
    }
    let mut v = vec![0.0; k];
    v[id] = 1.0;
    Ok(v)
}

/// Index of the largest entry (first one on ties).
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Differences of consecutive positions. Returns the last position as the
/// origin; callers that split a track re-anchor at their own boundary.
pub fn positions_to_displacements(positions: &[Point2]) -> Result<(Point2, Vec<Point2>)> {
    if positions.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 positions to form displacements, got {}",
            positions.len()
        )));
    }
    let displ = positions.windows(2).map(|w| w[1] - w[0]).collect();
    Ok((*positions.last().unwrap(), displ))
}

/// Cumulative sum of `displ` anchored at `origin`; the origin itself is not emitted.
pub fn displacements_to_positions(origin: Point2, displ: &[Point2]) -> Vec<Point2> {
    let mut cur = origin;
    displ
        .iter()
        .map(|d| {
            cur = cur + *d;
            cur
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct WindowRecord {
    source_id: String,
    label: String,
    origin_x: f64,
    origin_y: f64,
    obs: Vec<[f64; 2]>,
    fut: Vec<[f64; 2]>,
}

impl From<&TrackWindow> for WindowRecord {
    fn from(w: &TrackWindow) -> Self {
        WindowRecord {
            source_id: w.source_id.clone(),
            label: w.label.clone(),
            origin_x: w.origin.x,
            origin_y: w.origin.y,
            obs: w.obs.iter().map(|&p| p.into()).collect(),
            fut: w.fut.iter().map(|&p| p.into()).collect(),
        }
    }
}

impl From<WindowRecord> for TrackWindow {
    fn from(r: WindowRecord) -> Self {
        TrackWindow {
            source_id: r.source_id,
            label: r.label,
            origin: Point2::new(r.origin_x, r.origin_y),
            obs: r.obs.into_iter().map(Point2::from).collect(),
            fut: r.fut.into_iter().map(Point2::from).collect(),
        }
    }
}

/// Serializes windows in the canonical line-delimited JSON format.
pub fn write_windows<W: Write>(mut out: W, windows: &[TrackWindow]) -> Result<()> {
    for w in windows {
        let line = serde_json::to_string(&WindowRecord::from(w)).map_err(|e| Error::json("window record", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<window stream>", e))?;
    }
    Ok(())
}

pub fn read_windows<R: BufRead>(input: R) -> Result<Vec<TrackWindow>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<window stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WindowRecord =
            serde_json::from_str(&line).map_err(|e| Error::json(format!("window record on line {}", lineno + 1), e))?;
        out.push(rec.into());
    }
    Ok(out)
}

pub fn save_windows(path: &Path, windows: &[TrackWindow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_windows(&mut w, windows)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_windows(path: &Path) -> Result<Vec<TrackWindow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_windows(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
        v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    #[test]
    fn differencing() {
        let (origin, d) = positions_to_displacements(&pts(&[(0., 0.), (1., 0.), (1., 1.)])).unwrap();
        assert_eq!(d, pts(&[(1., 0.), (0., 1.)]));
        assert_eq!(origin, Point2::new(1., 1.));
    }

    #[test]
    fn constant_positions_give_zero_motion() {
        let (_, d) = positions_to_displacements(&vec![Point2::new(2., 3.); 5]).unwrap();
        assert_eq!(d, vec![Point2::ZERO; 4]);
    }

    #[test]
    fn too_few_positions() {
        assert!(matches!(
            positions_to_displacements(&pts(&[(1., 1.)])),
            Err(Error::InvalidInput(_))
        ));
        assert!(positions_to_displacements(&[]).is_err());
    }

    #[test]
    fn cumulative_sum() {
        let p = displacements_to_positions(Point2::ZERO, &pts(&[(1., 1.), (1., 1.)]));
        assert_eq!(p, pts(&[(1., 1.), (2., 2.)]));
        assert!(displacements_to_positions(Point2::new(5., 5.), &[]).is_empty());
    }

    #[test]
    fn round_trip_random_tracks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p: Vec<Point2> = (0..10)
                .map(|_| Point2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)))
                .collect();
            let (_, d) = positions_to_displacements(&p).unwrap();
            let back = displacements_to_positions(p[0], &d);
            assert_eq!(back.len(), 9);
            for (a, b) in back.iter().zip(&p[1..]) {
                assert!(a.dist(b) < 1e-9);
            }
        }
    }

    fn window(t: usize, h: usize) -> TrackWindow {
        TrackWindow {
            source_id: "e1#0".into(),
            label: "a".into(),
            origin: Point2::new(1.0, 2.0),
            obs: vec![Point2::new(0.1, 0.2); t],
            fut: vec![Point2::new(0.3, -0.1); h],
        }
    }

    #[test]
    fn full_track_lengths() {
        assert_eq!(concat_full_track(&window(2, 3)).len(), 5);
        assert_eq!(concat_full_track(&window(8, 12)).len(), 20);
        assert_eq!(concat_full_track(&window(20, 30)).len(), 50);
        let w = window(2, 3);
        let f = concat_full_track(&w);
        assert_eq!(&f.seq[..2], &w.obs[..]);
        assert_eq!(&f.seq[2..], &w.fut[..]);
    }

    #[test]
    fn observed_positions_end_at_origin() {
        let w = window(3, 2);
        let p = w.observed_positions();
        assert_eq!(p.len(), 4);
        assert!(p.last().unwrap().dist(&w.origin) < 1e-12);
    }

    #[test]
    fn trajectory_key_strips_window_index() {
        let mut w = window(1, 1);
        w.source_id = "ent:7#12".into();
        assert_eq!(w.trajectory_key(), "ent:7");
    }

    #[test]
    fn canonical_format_round_trip_is_bit_exact() {
        let w = TrackWindow {
            source_id: "x#1".into(),
            label: "workers".into(),
            origin: Point2::new(0.1 + 0.2, -1.0 / 3.0),
            obs: vec![Point2::new(std::f64::consts::PI, 1e-300), Point2::new(-0.0, 5e-324)],
            fut: vec![Point2::new(1.0 / 7.0, 123456.789012345)],
        };
        let mut buf = Vec::new();
        write_windows(&mut buf, std::slice::from_ref(&w)).unwrap();
        let back = read_windows(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        let b = &back[0];
        assert_eq!(b.origin.x.to_bits(), w.origin.x.to_bits());
        assert_eq!(b.origin.y.to_bits(), w.origin.y.to_bits());
        for (p, q) in b.obs.iter().chain(&b.fut).zip(w.obs.iter().chain(&w.fut)) {
            assert_eq!(p.x.to_bits(), q.x.to_bits());
            assert_eq!(p.y.to_bits(), q.y.to_bits());
        }
    }

    proptest! {
        #[test]
        fn translation_shifts_outputs(
            ox in -100.0f64..100.0, oy in -100.0f64..100.0,
            a in -10.0f64..10.0, b in -10.0f64..10.0,
            d in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 0..20),
        ) {
            let d: Vec<Point2> = d.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
            let p = displacements_to_positions(Point2::new(ox, oy), &d);
            let q = displacements_to_positions(Point2::new(ox + a, oy + b), &d);
            prop_assert_eq!(p.len(), d.len());
            for (u, v) in p.iter().zip(&q) {
                prop_assert!((v.x - u.x - a).abs() < 1e-9);
                prop_assert!((v.y - u.y - b).abs() < 1e-9);
            }
        }

        #[test]
        fn displacements_are_translation_invariant(
            a in -100.0f64..100.0, b in -100.0f64..100.0,
            p in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 2..15),
        ) {
            let p: Vec<Point2> = p.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
            let shifted: Vec<Point2> = p.iter().map(|q| *q + Point2::new(a, b)).collect();
            let (_, d1) = positions_to_displacements(&p).unwrap();
            let (_, d2) = positions_to_displacements(&shifted).unwrap();
            for (u, v) in d1.iter().zip(&d2) {
                prop_assert!(u.dist(v) < 1e-9);
            }
        }

        #[test]
        fn one_hot_argmax_recovers_id(k in 1usize..40, seed in 0usize..1000) {
            let id = seed % k;
            let m = ModeAssignment::new(id, k, 0).unwrap();
            prop_assert_eq!(m.one_hot.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(m.one_hot.iter().filter(|&&v| v == 0.0).count(), k - 1);
            prop_assert_eq!(argmax(&m.one_hot), Some(id));
        }
    }
}
