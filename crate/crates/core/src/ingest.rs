//! Dataset readers and the preprocessing pipeline.
//!
//! Order is fixed: downsample, split on long gaps, interpolate, smooth, window.
//! Profiles that record at the target rate (Argoverse) skip the first steps.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{positions_to_displacements, Point2, RawTrajectory, Sample, TrackWindow};
use crate::error::{Error, Result};
use crate::util::sha256_json;

const TIME_EPS: f64 = 1e-9;

/// Column mapping for tabular trajectory exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub timestamp: String,
    pub entity_id: String,
    pub label: String,
    pub x: String,
    pub y: String,
    pub delimiter: char,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            timestamp: "timestamp".into(),
            entity_id: "id".into(),
            label: "label".into(),
            x: "x".into(),
            y: "y".into(),
            delimiter: ',',
        }
    }
}

impl Schema {
    /// Argoverse forecasting CSV export (`TIMESTAMP,TRACK_ID,OBJECT_TYPE,X,Y,CITY_NAME`).
    pub fn argoverse() -> Self {
        Schema {
            timestamp: "TIMESTAMP".into(),
            entity_id: "TRACK_ID".into(),
            label: "OBJECT_TYPE".into(),
            x: "X".into(),
            y: "Y".into(),
            delimiter: ',',
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::util::load_config(path)
    }
}

/// Sampling and windowing parameters of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    /// Target sample period in seconds.
    pub sample_period: f64,
    pub obs_len: usize,
    pub pred_len: usize,
    /// Moving-average window in seconds; `None` disables smoothing.
    pub smoothing_window: Option<f64>,
    pub window_stride: usize,
    /// Downsample to `sample_period` before interpolation.
    pub resample: bool,
    /// Missing runs spanning more than this many seconds split the trajectory.
    pub max_gap: f64,
}

impl DatasetProfile {
    pub fn thor() -> Self {
        DatasetProfile {
            name: "thor".into(),
            sample_period: 0.4,
            obs_len: 8,
            pred_len: 12,
            smoothing_window: Some(0.8),
            window_stride: 20,
            resample: true,
            max_gap: 2.0,
        }
    }

    pub fn argoverse() -> Self {
        DatasetProfile {
            name: "argoverse".into(),
            sample_period: 0.1,
            obs_len: 20,
            pred_len: 30,
            smoothing_window: None,
            window_stride: 50,
            resample: false,
            max_gap: 2.0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "thor" => Some(Self::thor()),
            "argoverse" => Some(Self::argoverse()),
            _ => None,
        }
    }

    pub fn full_len(&self) -> usize {
        self.obs_len + self.pred_len
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_period > 0.0) {
            return Err(Error::Config(format!("profile `{}`: sample_period must be > 0", self.name)));
        }
        if self.obs_len == 0 || self.pred_len == 0 || self.window_stride == 0 {
            return Err(Error::Config(format!(
                "profile `{}`: obs_len, pred_len and window_stride must be >= 1",
                self.name
            )));
        }
        if let Some(w) = self.smoothing_window {
            if !(w > 0.0) {
                return Err(Error::Config(format!("profile `{}`: smoothing_window must be > 0", self.name)));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_json(self)
    }
}

/// Reads a delimited file and groups rows by entity. Entities keep the order
/// of their first row; samples are sorted by time.
pub fn read_tabular_trajectories(path: &Path, schema: &Schema) -> Result<Vec<RawTrajectory>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        // a zero-byte file has no header row at all
        Err(_) if std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(false) => return Ok(Vec::new()),
        Err(e) => return Err(Error::Csv { path: path.into(), source: e }),
    };
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let (ct, cid, clabel, cx, cy) = (
        col(&schema.timestamp)?,
        col(&schema.entity_id)?,
        col(&schema.label)?,
        col(&schema.x)?,
        col(&schema.y)?,
    );

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (String, Vec<Sample>)> = HashMap::new();
    for (row_idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv { path: path.into(), source: e })?;
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let t: f64 = field(ct).parse().map_err(|_| {
            Error::Data(format!(
                "{}: row {}: unparseable timestamp `{}`",
                path.display(),
                row_idx + 2,
                field(ct)
            ))
        })?;
        let id = field(cid).to_string();
        let pos = match (field(cx).parse::<f64>(), field(cy).parse::<f64>()) {
            (Ok(x), Ok(y)) if x.is_finite() && y.is_finite() => Some(Point2::new(x, y)),
            _ => None,
        };
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (field(clabel).to_string(), Vec::new())
        });
        entry.1.push(Sample { t, position: pos });
    }

    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let (label, mut samples) = groups.remove(&id).unwrap();
        samples.sort_by(|a, b| a.t.total_cmp(&b.t));
        // duplicate timestamps: keep the first detection that has a position
        let mut dedup: Vec<Sample> = Vec::with_capacity(samples.len());
        for s in samples {
            match dedup.last_mut() {
                Some(last) if (s.t - last.t).abs() <= TIME_EPS => {
                    if last.position.is_none() {
                        last.position = s.position;
                    }
                }
                _ => dedup.push(s),
            }
        }
        let traj = RawTrajectory::new(id, label, dedup)?;
        if traj.valid_count() < 2 {
            log::warn!("dropping entity `{}`: fewer than 2 valid samples", traj.entity_id);
            continue;
        }
        out.push(traj);
    }
    Ok(out)
}

fn median_interval(samples: &[Sample]) -> Option<f64> {
    if samples.len() < 2 {
        return None;
    }
    let mut d: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Some(if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) })
}

/// Keeps every n-th sample, `n = round(target / native median interval)`.
pub fn downsample(traj: &RawTrajectory, target_period: f64) -> Result<RawTrajectory> {
    if !(target_period > 0.0) {
        return Err(Error::InvalidArgument(format!("target period must be > 0, got {target_period}")));
    }
    let Some(native) = median_interval(&traj.samples) else {
        return Ok(traj.clone());
    };
    if target_period < native * (1.0 - 1e-6) {
        return Err(Error::InvalidArgument(format!(
            "target period {target_period} s is shorter than the native period {native} s"
        )));
    }
    let n = ((target_period / native).round() as usize).max(1);
    Ok(RawTrajectory {
        entity_id: traj.entity_id.clone(),
        label: traj.label.clone(),
        samples: traj.samples.iter().step_by(n).copied().collect(),
    })
}

fn trim_missing(samples: &[Sample]) -> &[Sample] {
    let first = samples.iter().position(|s| s.position.is_some());
    let last = samples.iter().rposition(|s| s.position.is_some());
    match (first, last) {
        (Some(a), Some(b)) => &samples[a..=b],
        _ => &[],
    }
}

/// Cuts the trajectory wherever a run of missing detections spans more than
/// `max_gap` seconds between its surrounding detections. Leading and trailing
/// missing runs are dropped.
pub fn split_on_gaps(traj: &RawTrajectory, max_gap: f64) -> Vec<RawTrajectory> {
    let samples = trim_missing(&traj.samples);
    let mut pieces: Vec<Vec<Sample>> = vec![Vec::new()];
    let mut last_valid: Option<f64> = None;
    let mut pending: Vec<Sample> = Vec::new();
    for s in samples {
        match s.position {
            None => pending.push(*s),
            Some(_) => {
                if let Some(t0) = last_valid {
                    if !pending.is_empty() && s.t - t0 > max_gap + TIME_EPS {
                        pieces.push(Vec::new());
                        pending.clear();
                    }
                }
                let cur = pieces.last_mut().unwrap();
                cur.append(&mut pending);
                cur.push(*s);
                last_valid = Some(s.t);
            }
        }
    }
    let multi = pieces.len() > 1;
    pieces
        .into_iter()
        .enumerate()
        .filter(|(_, p)| !p.is_empty())
        .map(|(i, samples)| RawTrajectory {
            entity_id: if multi {
                format!("{}~{}", traj.entity_id, i)
            } else {
                traj.entity_id.clone()
            },
            label: traj.label.clone(),
            samples,
        })
        .collect()
}

/// Fills missing detections by linear interpolation in time.
pub fn interpolate_gaps(traj: &RawTrajectory) -> Result<RawTrajectory> {
    let samples = trim_missing(&traj.samples);
    if samples.is_empty() {
        return Err(Error::EmptyTrajectory(format!(
            "trajectory `{}` has no valid detections",
            traj.entity_id
        )));
    }
    let mut out: Vec<Sample> = samples.to_vec();
    let mut prev: usize = 0;
    for i in 1..out.len() {
        if out[i].position.is_none() {
            continue;
        }
        if i > prev + 1 {
            let (t0, p0) = (out[prev].t, out[prev].position.unwrap());
            let (t1, p1) = (out[i].t, out[i].position.unwrap());
            let gaps = (i - prev) as f64;
            let step = (t1 - t0) / gaps;
            let regular = out[prev..=i].windows(2).all(|w| ((w[1].t - w[0].t) - step).abs() <= TIME_EPS);
            for (j, s) in out[prev + 1..i].iter_mut().enumerate() {
                // on a regular grid the index ratio avoids timestamp rounding
                let a = if regular { (j + 1) as f64 / gaps } else { (s.t - t0) / (t1 - t0) };
                s.position = Some(Point2::new(p0.x + a * (p1.x - p0.x), p0.y + a * (p1.y - p0.y)));
            }
        }
        prev = i;
    }
    Ok(RawTrajectory {
        entity_id: traj.entity_id.clone(),
        label: traj.label.clone(),
        samples: out,
    })
}

/// Centered moving average over `window` seconds. Near the ends the window
/// shrinks symmetrically so the filter never becomes one-sided.
pub fn smooth_moving_average(traj: &RawTrajectory, window: f64) -> Result<RawTrajectory> {
    if !(window > 0.0) {
        return Err(Error::InvalidArgument(format!("smoothing window must be > 0, got {window}")));
    }
    let pos = traj.positions().ok_or_else(|| {
        Error::InvalidInput(format!(
            "trajectory `{}` has missing samples; interpolate before smoothing",
            traj.entity_id
        ))
    })?;
    let ts: Vec<f64> = traj.samples.iter().map(|s| s.t).collect();
    let n = ts.len();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let half = (0.5 * window).min(ts[i] - ts[0]).min(ts[n - 1] - ts[i]);
        let mut lo = i;
        while lo > 0 && ts[i] - ts[lo - 1] <= half + TIME_EPS {
            lo -= 1;
        }
        let mut hi = i;
        while hi + 1 < n && ts[hi + 1] - ts[i] <= half + TIME_EPS {
            hi += 1;
        }
        let cnt = (hi - lo + 1) as f64;
        let (sx, sy) = pos[lo..=hi].iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
        samples.push(Sample::at(ts[i], Point2::new(sx / cnt, sy / cnt)));
    }
    Ok(RawTrajectory {
        entity_id: traj.entity_id.clone(),
        label: traj.label.clone(),
        samples,
    })
}

/// Slides a window of `obs_len + pred_len` displacement steps over the
/// trajectory. A trajectory of N positions has N-1 steps.
pub fn split_windows(traj: &RawTrajectory, profile: &DatasetProfile) -> Vec<TrackWindow> {
    let Some(pos) = traj.positions() else {
        log::warn!("split_windows: `{}` still has missing samples; skipped", traj.entity_id);
        return Vec::new();
    };
    let (t, h) = (profile.obs_len, profile.pred_len);
    let need = t + h;
    let Ok((_, displ)) = positions_to_displacements(&pos) else {
        return Vec::new();
    };
    if displ.len() < need {
        return Vec::new();
    }
    (0..=displ.len() - need)
        .step_by(profile.window_stride.max(1))
        .map(|s| TrackWindow {
            source_id: format!("{}#{}", traj.entity_id, s),
            label: traj.label.clone(),
            origin: pos[s + t],
            obs: displ[s..s + t].to_vec(),
            fut: displ[s + t..s + need].to_vec(),
        })
        .collect()
}

/// Full per-trajectory pipeline; may return several pieces after gap splitting.
pub fn preprocess_trajectory(traj: &RawTrajectory, profile: &DatasetProfile) -> Result<Vec<RawTrajectory>> {
    let base = if profile.resample {
        downsample(traj, profile.sample_period)?
    } else {
        traj.clone()
    };
    let mut out = Vec::new();
    for piece in split_on_gaps(&base, profile.max_gap) {
        if piece.valid_count() < 2 {
            continue;
        }
        let filled = interpolate_gaps(&piece)?;
        let smoothed = match profile.smoothing_window {
            Some(w) => smooth_moving_average(&filled, w)?,
            None => filled,
        };
        out.push(smoothed);
    }
    Ok(out)
}

/// Preprocesses and windows every trajectory. Output order follows input order.
pub fn preprocess(trajs: &[RawTrajectory], profile: &DatasetProfile) -> Result<Vec<TrackWindow>> {
    profile.validate()?;
    let per_traj: Vec<Result<Vec<TrackWindow>>> = trajs
        .par_iter()
        .map(|traj| {
            let pieces = preprocess_trajectory(traj, profile)?;
            Ok(pieces.iter().flat_map(|p| split_windows(p, profile)).collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in per_traj {
        out.extend(r?);
    }
    Ok(out)
}

/// Size of the validation or test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSize {
    Count(usize),
    /// Fraction of all input windows.
    Fraction(f64),
}

impl SplitSize {
    fn resolve(&self, total: usize) -> usize {
        match *self {
            SplitSize::Count(n) => n,
            SplitSize::Fraction(f) => (f * total as f64).round() as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Exact per-label training counts. Empty means "everything not in val/test".
    #[serde(default)]
    pub train: BTreeMap<String, usize>,
    pub val: SplitSize,
    pub test: SplitSize,
    pub seed: u64,
}

impl SplitSpec {
    /// Constrained split used for the Argoverse experiments.
    pub fn argoverse() -> Self {
        SplitSpec {
            train: [("av".to_string(), 2600), ("agent".to_string(), 2600), ("others".to_string(), 526)]
                .into_iter()
                .collect(),
            val: SplitSize::Count(2100),
            test: SplitSize::Count(1678),
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::util::load_config(path)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TrackWindow>,
    pub val: Vec<TrackWindow>,
    pub test: Vec<TrackWindow>,
}

struct Group {
    label: String,
    members: Vec<usize>,
}

/// Splits windows into disjoint train/val/test sets. All windows of one source
/// trajectory go to the same split; when a trajectory straddles a count
/// boundary its leftover windows are discarded rather than leaked.
pub fn make_splits(windows: &[TrackWindow], spec: &SplitSpec) -> Result<Splits> {
    let mut key_index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Group> = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        let gi = *key_index.entry(w.trajectory_key()).or_insert_with(|| {
            groups.push(Group {
                label: w.label.clone(),
                members: Vec::new(),
            });
            groups.len() - 1
        });
        groups[gi].members.push(i);
    }

    let mut label_totals: BTreeMap<&str, usize> = BTreeMap::new();
    for w in windows {
        *label_totals.entry(w.label.as_str()).or_default() += 1;
    }
    for (label, &req) in &spec.train {
        let avail = label_totals.get(label.as_str()).copied().unwrap_or(0);
        if avail < req {
            return Err(Error::InsufficientSamples {
                label: label.clone(),
                requested: req,
                available: avail,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng);
    let mut used = vec![false; groups.len()];

    // takes whole groups from `order` (filtered by `accept`) until `need` windows are collected
    let take = |need: usize, accept: &dyn Fn(&Group) -> bool, used: &mut Vec<bool>| -> Vec<usize> {
        let mut got = Vec::with_capacity(need);
        for &gi in &order {
            if got.len() >= need {
                break;
            }
            if used[gi] || !accept(&groups[gi]) {
                continue;
            }
            used[gi] = true;
            let room = need - got.len();
            got.extend(groups[gi].members.iter().take(room));
        }
        got
    };

    let total = windows.len();
    let (val_n, test_n) = (spec.val.resolve(total), spec.test.resolve(total));
    let mut train_idx = Vec::new();
    let (val_idx, test_idx);
    if spec.train.is_empty() {
        val_idx = take(val_n, &|_| true, &mut used);
        test_idx = take(test_n, &|_| true, &mut used);
        let rest: Vec<usize> = order
            .iter()
            .filter(|&&g| !used[g])
            .flat_map(|&g| groups[g].members.iter().copied())
            .collect();
        train_idx = rest;
    } else {
        for (label, &req) in &spec.train {
            let got = take(req, &|g: &Group| g.label == *label, &mut used);
            if got.len() < req {
                return Err(Error::InsufficientSamples {
                    label: label.clone(),
                    requested: req,
                    available: got.len(),
                });
            }
            train_idx.extend(got);
        }
        val_idx = take(val_n, &|_| true, &mut used);
        test_idx = take(test_n, &|_| true, &mut used);
    }
    for (name, idx, n) in [("val", &val_idx, val_n), ("test", &test_idx, test_n)] {
        if idx.len() < n {
            return Err(Error::InsufficientSamples {
                label: format!("<{name} split>"),
                requested: n,
                available: idx.len(),
            });
        }
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: pick(&train_idx),
        val: pick(&val_idx),
        test: pick(&test_idx),
    })
}

/// Per-split label counts written next to the window files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub profile: String,
    pub profile_hash: String,
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
}

impl SplitManifest {
    pub fn new(splits: &Splits, spec: &SplitSpec, profile: &DatasetProfile) -> Self {
        let mut counts = BTreeMap::new();
        for (name, ws) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            counts.insert(name.to_string(), label_counts(ws));
        }
        SplitManifest {
            seed: spec.seed,
            profile: profile.name.clone(),
            profile_hash: profile.hash(),
            counts,
        }
    }
}

pub fn label_counts(windows: &[TrackWindow]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for w in windows {
        *m.entry(w.label.clone()).or_default() += 1;
    }
    m
}
