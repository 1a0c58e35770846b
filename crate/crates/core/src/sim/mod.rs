//! Closed-loop episodes, static and dynamic measures, and reports.

mod episode;
mod metrics;
mod report;
mod svg;

pub use episode::{
    read_records, run_episode, write_records, EpisodeConfig, EpisodeLog, StartMode, StepRecord, Termination,
};
pub use metrics::{
    dynamic_metrics, eval_static, seg_metrics, Confusion, DynamicMetrics, MetricReport, SegMetrics, StaticMetrics,
    MOVING_SPEED,
};
pub use report::{
    emit_report, episode_file, plot_files, read_metrics, write_metrics, METRICS_FILE, SMOOTHING_WINDOW,
};
pub use svg::moving_mean;
