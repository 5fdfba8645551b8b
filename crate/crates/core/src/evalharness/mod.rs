//! Scoring, leave-one-out orchestration and report files.

mod loocv;
mod metrics;
mod report;

pub use loocv::{
    parse_kinds, run_loocv, run_loocv_with, FoldPrediction, FoldRecord, LoocvOptions, LoocvReport, LoocvRow, ModelKind,
    FIXED_TAU,
};
pub use metrics::{compute_metrics, Metrics};
pub use report::{
    format_table, metrics_csv, summarize, write_metrics_csv, write_overlays, write_report, KindSummary, Stat, CSV_HEADER,
};
