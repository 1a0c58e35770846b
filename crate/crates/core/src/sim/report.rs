use std::path::{Path, PathBuf};

use super::episode::EpisodeLog;
use super::metrics::MetricReport;
use super::svg::{moving_mean, Chart, Series};
use crate::error::{Error, Result};
use crate::track::TrackGeometry;

/// Samples in the moving mean drawn over per-step series.
pub const SMOOTHING_WINDOW: usize = 50;

pub const METRICS_FILE: &str = "metrics.csv";

const METRIC_COLUMNS: [&str; 16] = [
    "label",
    "track",
    "termination",
    "steps",
    "theta_dmae",
    "dma_delta",
    "seg_accuracy",
    "seg_precision",
    "seg_recall",
    "seg_f1",
    "heading_mae",
    "c1_accuracy",
    "c2_accuracy",
    "distance",
    "mean_speed",
    "max_abs_delta",
];

pub fn episode_file(label: &str) -> String {
    format!("episode_{label}.csv")
}

/// The four plot names written per episode.
pub fn plot_files(label: &str) -> [String; 4] {
    [
        format!("theta_{label}.svg"),
        format!("delta_{label}.svg"),
        format!("curvature_{label}.svg"),
        format!("trajectory_{label}.svg"),
    ]
}

/// Writes metrics.csv, with a header even when `rows` is empty.
pub fn write_metrics(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    w.write_record(&METRIC_COLUMNS).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::csv(path, e))).collect()
}

fn check_label(label: &str) -> Result<()> {
    let ok = !label.is_empty() && label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("episode label {label:?} is not a safe file stem")))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one episode CSV and four plots per episode, then metrics.csv.
/// Returns the paths written.
pub fn emit_report(
    episodes: &[(&EpisodeLog, &TrackGeometry)],
    metrics: &[MetricReport],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    for (log, _) in episodes {
        check_label(&log.label)?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (log, geom) in episodes {
        let path = out_dir.join(episode_file(&log.label));
        log.write_csv(&path)?;
        written.push(path);
        let charts = plots(log, geom);
        for (name, chart) in plot_files(&log.label).iter().zip(charts) {
            let path = out_dir.join(name);
            write_text(&path, &chart.render())?;
            written.push(path);
        }
    }
    let path = out_dir.join(METRICS_FILE);
    write_metrics(&path, metrics)?;
    written.push(path);
    Ok(written)
}

fn plots<'a>(log: &EpisodeLog, geom: &TrackGeometry) -> [Chart<'a>; 4] {
    let r = &log.records;
    let s: Vec<f64> = r.iter().map(|r| r.s).collect();
    let zip = |v: &[f64]| s.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
    let theta_hat: Vec<f64> = r.iter().map(|r| r.theta_hat).collect();
    let theta_true: Vec<f64> = r.iter().map(|r| r.theta_true).collect();
    let delta_true: Vec<f64> = r.iter().map(|r| r.delta_true).collect();
    let delta_hat: Vec<f64> = r.iter().map(|r| r.delta_hat).collect();
    let mean = format!("{SMOOTHING_WINDOW}-step moving mean");

    let theta = Chart {
        title: format!("Heading angle, {}", log.label),
        x_label: "arc length s (m)".into(),
        y_label: "theta (rad)".into(),
        series: vec![
            Series { name: "estimated".into(), color: "#9ecae1", points: zip(&theta_hat), width: 1.0 },
            Series { name: "true".into(), color: "#d62728", points: zip(&theta_true), width: 1.5 },
            Series {
                name: format!("estimated, {mean}"),
                color: "#08519c",
                points: zip(&moving_mean(&theta_hat, SMOOTHING_WINDOW)),
                width: 1.5,
            },
        ],
        equal_aspect: false,
    };
    let delta = Chart {
        title: format!("Lateral offset, {}", log.label),
        x_label: "arc length s (m)".into(),
        y_label: "delta (m)".into(),
        series: vec![
            Series { name: "estimated".into(), color: "#c7e9c0", points: zip(&delta_hat), width: 1.0 },
            Series { name: "true".into(), color: "#2ca02c", points: zip(&delta_true), width: 1.5 },
            Series {
                name: format!("true, {mean}"),
                color: "#00441b",
                points: zip(&moving_mean(&delta_true, SMOOTHING_WINDOW)),
                width: 1.5,
            },
        ],
        equal_aspect: false,
    };
    let frames = geom.frames();
    let curvature = Chart {
        title: format!("Curvature profile, {}", geom.track().name),
        x_label: "arc length s (m)".into(),
        y_label: "curvature (1/m)".into(),
        series: vec![Series {
            name: "curvature".into(),
            color: "#1f77b4",
            points: frames.iter().map(|f| (f.s, f.curvature)).collect(),
            width: 1.5,
        }],
        equal_aspect: false,
    };
    let trajectory = Chart {
        title: format!("Trajectory, {}", log.label),
        x_label: "x (m)".into(),
        y_label: "y (m)".into(),
        series: vec![
            Series {
                name: "centerline".into(),
                color: "#7f7f7f",
                points: frames.iter().map(|f| (f.x, f.y)).collect(),
                width: 3.0,
            },
            Series {
                name: "vehicle (rear axle)".into(),
                color: "#d62728",
                points: r.iter().map(|r| (r.x, r.y)).collect(),
                width: 1.0,
            },
        ],
        equal_aspect: true,
    };
    [theta, delta, curvature, trajectory]
}
