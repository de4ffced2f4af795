//! Session metrics and cohort statistics.

use std::path::PathBuf;

use thiserror::Error;

use crate::sessionlog::{Arm, LogError};

pub mod cohort;
pub mod metrics;
pub mod stats;

pub use cohort::{cohort_report, load_sessions, read_cohort_csv, write_cohort_csv, CohortReport, CohortRow, ReportConfig};
pub use metrics::{metrics_from_records, reconstruct_scores, session_metrics, MetricsConfig, SessionMetrics};
pub use stats::{oneway_anova, spearman, student_t, t_from_summary, GroupStats, StatsError, TestResult};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("metrics are undefined for an empty log")]
    EmptyLog,
    #[error("session `{0}` has no records")]
    EmptySession(String),
    #[error("invalid metrics config: {0}")]
    Config(String),
    #[error("cohort table line {line}: missing `{field}`")]
    MissingField { field: &'static str, line: usize },
    #[error("cohort table line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("session `{0}` has no metadata sidecar and no cohort row giving its group")]
    UnknownGroup(String),
    #[error("session `{session_id}` is logged as {log} but listed as {cohort}")]
    GroupMismatch { session_id: String, log: Arm, cohort: Arm },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("cohort table: {0}")]
    Csv(#[from] csv::Error),
    #[error("report: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
