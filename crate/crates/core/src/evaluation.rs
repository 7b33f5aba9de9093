//! Displacement metrics, grouped reports and their aggregation over runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{displacements_to_positions, Point2, TrackWindow};
use crate::error::{Error, Result};
use crate::forecast::Predictor;
use crate::nn::row_to_points;
use crate::tensor::Mat;
use crate::util::{mean, sample_std};

/// How per-step distances are reduced into ADE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    #[default]
    Mean,
    Rmse,
}

fn check_len(pred: &[Point2], truth: &[Point2]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} steps, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty trajectories".into()));
    }
    Ok(())
}

pub fn ade(pred: &[Point2], truth: &[Point2], mode: MetricMode) -> Result<f64> {
    check_len(pred, truth)?;
    let n = pred.len() as f64;
    Ok(match mode {
        MetricMode::Mean => pred.iter().zip(truth).map(|(a, b)| a.dist(b)).sum::<f64>() / n,
        MetricMode::Rmse => (pred.iter().zip(truth).map(|(a, b)| a.dist_sq(b)).sum::<f64>() / n).sqrt(),
    })
}

pub fn fde(pred: &[Point2], truth: &[Point2]) -> Result<f64> {
    check_len(pred, truth)?;
    Ok(pred.last().unwrap().dist(truth.last().unwrap()))
}

/// Per-window `(ade, fde)` for predicted displacements (`n x 2h`), decoded
/// from each window's origin.
pub fn window_errors(windows: &[TrackWindow], pred: &Mat, mode: MetricMode) -> Result<Vec<(f64, f64)>> {
    if pred.rows != windows.len() {
        return Err(Error::Shape(format!("{} predictions for {} windows", pred.rows, windows.len())));
    }
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let p = displacements_to_positions(w.origin, &row_to_points(pred, i));
            let t = w.future_positions();
            Ok((ade(&p, &t, mode)?, fde(&p, &t)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub n: usize,
    /// Absent for an empty group.
    pub ade: Option<f64>,
    pub fde: Option<f64>,
}

impl GroupMetrics {
    fn from_errors(group: &str, errs: &[(f64, f64)]) -> Self {
        let n = errs.len();
        let (ade, fde) = if n == 0 {
            (None, None)
        } else {
            (
                Some(errs.iter().map(|e| e.0).sum::<f64>() / n as f64),
                Some(errs.iter().map(|e| e.1).sum::<f64>() / n as f64),
            )
        };
        GroupMetrics {
            group: group.to_string(),
            n,
            ade,
            fde,
        }
    }
}

/// Group key of every test window plus the row order of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    pub keys: Vec<String>,
    pub order: Vec<String>,
}

impl Partition {
    pub fn by_label(windows: &[TrackWindow]) -> Self {
        let keys: Vec<String> = windows.iter().map(|w| w.label.clone()).collect();
        let mut order = keys.clone();
        order.sort();
        order.dedup();
        Partition {
            name: "label".into(),
            keys,
            order,
        }
    }

    pub fn by_cluster(ids: &[usize], k: usize) -> Self {
        Partition {
            name: "cluster".into(),
            keys: ids.iter().map(|c| c.to_string()).collect(),
            order: (0..k).map(|c| c.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub name: String,
    pub groups: Vec<GroupMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub seed: u64,
    pub z_seed: u64,
    pub metric_mode: MetricMode,
    pub overall: GroupMetrics,
    pub partitions: Vec<PartitionMetrics>,
}

impl RunReport {
    pub fn partition(&self, name: &str) -> Option<&PartitionMetrics> {
        self.partitions.iter().find(|p| p.name == name)
    }

    pub fn group(&self, partition: &str, group: &str) -> Option<&GroupMetrics> {
        self.partition(partition)?.groups.iter().find(|g| g.group == group)
    }
}

/// Builds a report from per-window errors.
pub fn report_from_errors(
    model: &str,
    seed: u64,
    z_seed: u64,
    mode: MetricMode,
    errors: &[(f64, f64)],
    partitions: &[Partition],
) -> Result<RunReport> {
    let mut parts = Vec::with_capacity(partitions.len());
    for p in partitions {
        if p.keys.len() != errors.len() {
            return Err(Error::Shape(format!(
                "partition `{}` covers {} windows, expected {}",
                p.name,
                p.keys.len(),
                errors.len()
            )));
        }
        let mut buckets: BTreeMap<&str, Vec<(f64, f64)>> = p.order.iter().map(|g| (g.as_str(), Vec::new())).collect();
        for (key, e) in p.keys.iter().zip(errors) {
            buckets
                .get_mut(key.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("group `{key}` missing from partition `{}`", p.name)))?
                .push(*e);
        }
        parts.push(PartitionMetrics {
            name: p.name.clone(),
            groups: p.order.iter().map(|g| GroupMetrics::from_errors(g, &buckets[g.as_str()])).collect(),
        });
    }
    Ok(RunReport {
        model: model.to_string(),
        seed,
        z_seed,
        metric_mode: mode,
        overall: GroupMetrics::from_errors("overall", errors),
        partitions: parts,
    })
}

/// Evaluates predictions (`n x 2h` displacements) against the windows.
pub fn evaluate_predictions(
    model: &str,
    seed: u64,
    z_seed: u64,
    windows: &[TrackWindow],
    pred: &Mat,
    partitions: &[Partition],
    mode: MetricMode,
) -> Result<RunReport> {
    let errs = window_errors(windows, pred, mode)?;
    report_from_errors(model, seed, z_seed, mode, &errs, partitions)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        MeanStd {
            mean: mean(v),
            std: sample_std(v),
        }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub group: String,
    pub n: usize,
    pub ade: Option<MeanStd>,
    pub fde: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionAggregate {
    pub name: String,
    pub groups: Vec<GroupAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub model: String,
    pub metric_mode: MetricMode,
    pub seeds: Vec<u64>,
    pub overall: GroupAggregate,
    pub partitions: Vec<PartitionAggregate>,
}

impl AggregateReport {
    pub fn group(&self, partition: &str, group: &str) -> Option<&GroupAggregate> {
        self.partitions
            .iter()
            .find(|p| p.name == partition)?
            .groups
            .iter()
            .find(|g| g.group == group)
    }
}

fn aggregate_group(groups: &[&GroupMetrics]) -> GroupAggregate {
    let ade: Vec<f64> = groups.iter().filter_map(|g| g.ade).collect();
    let fde: Vec<f64> = groups.iter().filter_map(|g| g.fde).collect();
    GroupAggregate {
        group: groups[0].group.clone(),
        n: groups[0].n,
        ade: (!ade.is_empty()).then(|| MeanStd::of(&ade)),
        fde: (!fde.is_empty()).then(|| MeanStd::of(&fde)),
    }
}

/// Mean and sample standard deviation of every cell across runs of one model.
pub fn aggregate_runs(runs: &[RunReport]) -> Result<AggregateReport> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no runs to aggregate".into()))?;
    for r in runs {
        let same_layout = r.partitions.len() == first.partitions.len()
            && r.partitions.iter().zip(&first.partitions).all(|(a, b)| {
                a.name == b.name && a.groups.iter().map(|g| &g.group).eq(b.groups.iter().map(|g| &g.group))
            });
        if r.model != first.model || r.metric_mode != first.metric_mode || !same_layout {
            return Err(Error::InvalidInput("runs differ in model, metric mode or grouping".into()));
        }
    }
    let overall = aggregate_group(&runs.iter().map(|r| &r.overall).collect::<Vec<_>>());
    let partitions = first
        .partitions
        .iter()
        .enumerate()
        .map(|(pi, p)| PartitionAggregate {
            name: p.name.clone(),
            groups: (0..p.groups.len())
                .map(|gi| aggregate_group(&runs.iter().map(|r| &r.partitions[pi].groups[gi]).collect::<Vec<_>>()))
                .collect(),
        })
        .collect();
    Ok(AggregateReport {
        model: first.model.clone(),
        metric_mode: first.metric_mode,
        seeds: runs.iter().map(|r| r.seed).collect(),
        overall,
        partitions,
    })
}

fn cell(g: Option<&GroupAggregate>) -> String {
    match g {
        Some(GroupAggregate {
            ade: Some(a),
            fde: Some(f),
            ..
        }) => format!("{a} / {f}"),
        _ => "-".into(),
    }
}

/// Aligned text table with one row per model and one `ADE / FDE` column per
/// group of `partition` (or a single overall column when `None`).
pub fn render_table(title: &str, reports: &[AggregateReport], partition: Option<&str>) -> String {
    let groups: Vec<String> = match partition {
        None => vec!["overall".into()],
        Some(p) => reports
            .first()
            .and_then(|r| r.partitions.iter().find(|x| x.name == p))
            .map(|x| x.groups.iter().map(|g| g.group.clone()).collect())
            .unwrap_or_default(),
    };
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("model".to_string()).chain(groups.iter().cloned()).collect()];
    for r in reports {
        let mut row = vec![r.model.clone()];
        for g in &groups {
            row.push(match partition {
                None => cell(Some(&r.overall)),
                Some(p) => cell(r.group(p, g)),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mode = reports.first().map_or(MetricMode::Mean, |r| r.metric_mode);
    let mut out = format!("{title} (ADE / FDE in meters, mean ± std over runs, ade mode: {mode:?})\n");
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

/// Latent seed of draw `j`; draw 0 is `z_seed` itself.
pub fn sample_seed(z_seed: u64, j: usize) -> u64 {
    if j == 0 {
        z_seed
    } else {
        crate::util::derive_seed(z_seed, &format!("sample/{j}"))
    }
}

/// Per-window errors of the draw with the lowest ADE among `num_samples`.
pub fn best_of_errors(
    predictor: &dyn Predictor,
    windows: &[TrackWindow],
    z_seed: u64,
    num_samples: usize,
    mode: MetricMode,
) -> Result<Vec<(f64, f64)>> {
    if num_samples == 0 {
        return Err(Error::InvalidArgument("num_samples must be >= 1".into()));
    }
    let mut best = window_errors(windows, &predictor.predict(windows, z_seed)?, mode)?;
    for j in 1..num_samples {
        let e = window_errors(windows, &predictor.predict(windows, sample_seed(z_seed, j))?, mode)?;
        for (b, e) in best.iter_mut().zip(e) {
            if e.0 < b.0 {
                *b = e;
            }
        }
    }
    Ok(best)
}

/// Evaluates a forecaster on every partition. Generative models draw one
/// latent per window per sample.
pub fn evaluate_model(
    predictor: &dyn Predictor,
    seed: u64,
    windows: &[TrackWindow],
    partitions: &[Partition],
    z_seed: u64,
    num_samples: usize,
    mode: MetricMode,
) -> Result<RunReport> {
    let errs = best_of_errors(predictor, windows, z_seed, num_samples, mode)?;
    report_from_errors(predictor.name(), seed, z_seed, mode, &errs, partitions)
}
