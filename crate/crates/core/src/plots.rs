//! Static SVG figures: forecast overlays, per-cluster galleries and
//! wrong-mode comparisons.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::data::{displacements_to_positions, Point2, TrackWindow};
use crate::error::{Error, Result};

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(23, 190, 207),
];

fn plot_err(e: impl std::fmt::Debug) -> Error {
    Error::Data(format!("plot rendering failed: {e:?}"))
}

/// Filesystem-safe version of an identifier.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn bounds<'a>(curves: impl Iterator<Item = &'a [Point2]>) -> (std::ops::Range<f64>, std::ops::Range<f64>) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in curves {
        for p in c {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
    }
    if !x0.is_finite() {
        return (-1.0..1.0, -1.0..1.0);
    }
    // equal aspect with a margin
    let span = (x1 - x0).max(y1 - y0).max(1e-3) * 0.55;
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    (cx - span..cx + span, cy - span..cy + span)
}

/// A named polyline with an optional start marker.
pub struct Curve {
    pub name: String,
    pub points: Vec<Point2>,
    pub mark_start: bool,
}

fn draw(path: &Path, title: &str, curves: &[Curve]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (xr, yr) = bounds(curves.iter().map(|c| c.points.as_slice()));
    let root = SVGBackend::new(path, (560, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(xr, yr)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("x [m]").y_desc("y [m]").draw().map_err(plot_err)?;
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.x, p.y)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(c.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        if c.mark_start {
            if let Some(&s) = pts.first() {
                chart.draw_series(std::iter::once(Cross::new(s, 5, color.stroke_width(2)))).map_err(plot_err)?;
            }
        }
    }
    if curves.iter().any(|c| !c.name.is_empty()) {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Observed track, ground-truth future and one predicted future per method.
/// `predictions` holds displacement rows decoded from the window origin.
pub fn forecast_overlay(
    out_dir: &Path,
    experiment: &str,
    window: &TrackWindow,
    predictions: &[(String, Vec<Point2>)],
) -> Result<PathBuf> {
    let path = out_dir.join(format!("{}_{}_overlay.svg", file_stem(experiment), file_stem(&window.source_id)));
    overlay_at(&path, window, predictions)?;
    Ok(path)
}

fn overlay_at(path: &Path, window: &TrackWindow, predictions: &[(String, Vec<Point2>)]) -> Result<()> {
    let mut truth = vec![window.origin];
    truth.extend(window.future_positions());
    let mut curves = vec![
        Curve {
            name: "observed".into(),
            points: window.observed_positions(),
            mark_start: true,
        },
        Curve {
            name: "ground truth".into(),
            points: truth,
            mark_start: false,
        },
    ];
    for (name, displ) in predictions {
        let mut pts = vec![window.origin];
        pts.extend(displacements_to_positions(window.origin, displ));
        curves.push(Curve {
            name: name.clone(),
            points: pts,
            mark_start: false,
        });
    }
    draw(path, &window.source_id, &curves)
}

/// Full tracks of the windows in `cluster`, each translated to start at the
/// origin, with a cross on every starting point.
pub fn cluster_gallery(
    out_dir: &Path,
    experiment: &str,
    windows: &[TrackWindow],
    cluster_ids: &[usize],
    cluster: usize,
    max_tracks: usize,
) -> Result<PathBuf> {
    let curves: Vec<Curve> = windows
        .iter()
        .zip(cluster_ids)
        .filter(|(_, &c)| c == cluster)
        .take(max_tracks)
        .map(|(w, _)| {
            let all: Vec<Point2> = w.obs.iter().chain(&w.fut).copied().collect();
            let mut pts = vec![Point2::ZERO];
            pts.extend(displacements_to_positions(Point2::ZERO, &all));
            Curve {
                name: String::new(),
                points: pts,
                mark_start: true,
            }
        })
        .collect();
    let path = out_dir.join(format!("{}_cluster{cluster}.svg", file_stem(experiment)));
    draw(&path, &format!("cluster {cluster} ({} tracks)", curves.len()), &curves)?;
    Ok(path)
}

/// Generator outputs for one window under each listed mode.
pub fn wrong_mode_comparison(
    out_dir: &Path,
    experiment: &str,
    window: &TrackWindow,
    true_mode: usize,
    per_mode: &[(usize, Vec<Point2>)],
) -> Result<PathBuf> {
    let preds: Vec<(String, Vec<Point2>)> = per_mode
        .iter()
        .map(|(m, d)| {
            let tag = if *m == true_mode { " (true)" } else { "" };
            (format!("mode {m}{tag}"), d.clone())
        })
        .collect();
    let path = out_dir.join(format!("{}_{}_modes.svg", file_stem(experiment), file_stem(&window.source_id)));
    overlay_at(&path, window, &preds)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(id: &str) -> TrackWindow {
        TrackWindow {
            source_id: id.into(),
            label: "a".into(),
            origin: Point2::new(1.0, 1.0),
            obs: vec![Point2::new(0.5, 0.0); 3],
            fut: vec![Point2::new(0.5, 0.1); 4],
        }
    }

    #[test]
    fn overlay_has_one_curve_per_method_plus_truth() {
        let dir = tempfile::tempdir().unwrap();
        let w = window("track#3");
        let preds = vec![
            ("vanilla".to_string(), vec![Point2::new(0.4, 0.0); 4]),
            ("wb".to_string(), vec![Point2::new(0.6, 0.0); 4]),
        ];
        let p = forecast_overlay(dir.path(), "exp 1", &w, &preds).unwrap();
        assert_eq!(p.file_name().unwrap(), "exp_1_track_3_overlay.svg");
        let svg = std::fs::read_to_string(&p).unwrap();
        assert!(svg.matches("<polyline").count() >= 4);
        for name in ["ground truth", "vanilla", "wb", "observed"] {
            assert!(svg.contains(name), "{name}");
        }
    }

    #[test]
    fn one_gallery_per_requested_cluster() {
        let dir = tempfile::tempdir().unwrap();
        let ws: Vec<TrackWindow> = (0..6).map(|i| window(&format!("t{i}#0"))).collect();
        let ids = [0, 1, 0, 1, 1, 0];
        let files: Vec<PathBuf> = (0..2).map(|c| cluster_gallery(dir.path(), "e", &ws, &ids, c, 10).unwrap()).collect();
        assert_eq!(files.len(), 2);
        assert!(files.iter().all(|f| f.exists()));
        assert_ne!(files[0], files[1]);
    }

    #[test]
    fn naming_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let w = window("x#1");
        let p1 = wrong_mode_comparison(a.path(), "e", &w, 0, &[(0, vec![Point2::ZERO; 4]), (1, vec![Point2::ZERO; 4])]).unwrap();
        let p2 = wrong_mode_comparison(a.path(), "e", &w, 0, &[(0, vec![Point2::ZERO; 4])]).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.ends_with("e_x_1_modes.svg"));
        let o = forecast_overlay(a.path(), "e", &w, &[]).unwrap();
        wrong_mode_comparison(a.path(), "e", &w, 0, &[(0, vec![Point2::ZERO; 4])]).unwrap();
        assert!(o.exists());
    }
}
