//! Cohort metadata, group comparisons and report output.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::sessionlog::{from_csv, Arm, SessionLog, SessionMetadata};

use super::metrics::{session_metrics, MetricsConfig, SessionMetrics};
use super::stats::{oneway_anova, spearman, student_t, GroupStats, TestResult};
use super::AnalyticsError;

pub const COHORT_FIELDS: [&str; 5] = [
    "session_id",
    "group",
    "friendship_duration",
    "intimacy_pre",
    "intimacy_post",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub session_id: String,
    pub group: Arm,
    pub friendship_duration: Option<f64>,
    pub intimacy_pre: Option<f64>,
    pub intimacy_post: Option<f64>,
}

impl CohortRow {
    pub fn from_log(log: &SessionLog) -> Self {
        Self {
            session_id: log.session_id.clone(),
            group: log.group,
            friendship_duration: log.metadata.friendship_duration,
            intimacy_pre: log.metadata.intimacy_pre,
            intimacy_post: log.metadata.intimacy_post,
        }
    }
}

fn opt_cell(s: &str) -> Option<&str> {
    let s = s.trim();
    (!s.is_empty() && !s.eq_ignore_ascii_case("na")).then_some(s)
}

/// Parses the cohort metadata table. Every column must be present; numeric
/// cells may be blank or `NA`.
pub fn read_cohort_csv(text: &str) -> Result<Vec<CohortRow>, AnalyticsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 5];
    for (slot, field) in idx.iter_mut().zip(COHORT_FIELDS) {
        *slot = headers
            .iter()
            .position(|h| h == field)
            .ok_or(AnalyticsError::MissingField { field, line: 1 })?;
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let cell = |k: usize| rec.get(idx[k]).unwrap_or("");
        let session_id = opt_cell(cell(0))
            .ok_or(AnalyticsError::MissingField {
                field: COHORT_FIELDS[0],
                line,
            })?
            .to_string();
        let group = opt_cell(cell(1))
            .ok_or(AnalyticsError::MissingField {
                field: COHORT_FIELDS[1],
                line,
            })?
            .parse::<Arm>()
            .map_err(|reason| AnalyticsError::Parse { line, reason })?;
        let num = |k: usize| -> Result<Option<f64>, AnalyticsError> {
            opt_cell(cell(k))
                .map(|s| {
                    s.parse::<f64>().map_err(|_| AnalyticsError::Parse {
                        line,
                        reason: format!("{}: `{s}` is not a number", COHORT_FIELDS[k]),
                    })
                })
                .transpose()
        };
        rows.push(CohortRow {
            session_id,
            group,
            friendship_duration: num(2)?,
            intimacy_pre: num(3)?,
            intimacy_post: num(4)?,
        });
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_cohort_csv(rows: &[CohortRow]) -> String {
    let mut out = COHORT_FIELDS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.session_id,
            r.group,
            fmt_opt(r.friendship_duration),
            fmt_opt(r.intimacy_pre),
            fmt_opt(r.intimacy_post)
        ));
    }
    out
}

/// Loads every `*.csv` session in `dir`. Sessions with a metadata sidecar
/// load it; others need a cohort row to know their group.
pub fn load_sessions(dir: &Path, cohort: &[CohortRow]) -> Result<Vec<SessionLog>, AnalyticsError> {
    let by_id: HashMap<&str, &CohortRow> = cohort.iter().map(|r| (r.session_id.as_str(), r)).collect();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| AnalyticsError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut logs = Vec::new();
    for path in paths {
        let id = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        if path.with_extension("meta.json").exists() {
            logs.push(SessionLog::read(&path)?);
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|source| AnalyticsError::Io {
            path: path.clone(),
            source,
        })?;
        if !text.starts_with(crate::sessionlog::CSV_HEADER) {
            // cohort tables and report outputs share the directory sometimes
            continue;
        }
        let row = by_id.get(id.as_str()).ok_or_else(|| AnalyticsError::UnknownGroup(id.clone()))?;
        let records = from_csv(&text)?;
        let start_time = records.first().map(|r| r.time).unwrap_or_default();
        let metadata = SessionMetadata {
            start_time,
            friendship_duration: row.friendship_duration,
            intimacy_pre: row.intimacy_pre,
            intimacy_post: row.intimacy_post,
            preferred_genres: Vec::new(),
            config: EngineConfig::default().for_arm(row.group),
            notes: Vec::new(),
        };
        logs.push(SessionLog::with_records(id, row.group, metadata, records)?);
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub metrics: MetricsConfig,
    /// Also run a one-way ANOVA on speech ratio across arms.
    pub anova: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            metrics: MetricsConfig::default(),
            anova: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub session_id: String,
    pub group: Arm,
    pub duration: u64,
    pub speech_ratio: f64,
    pub lull_count: u64,
    pub nudge_count: u64,
    pub nudge_successes: usize,
    pub friendship_duration: Option<f64>,
    pub intimacy_pre: Option<f64>,
    pub intimacy_post: Option<f64>,
}

impl SessionRow {
    fn intimacy_change(&self) -> Option<f64> {
        Some(self.intimacy_post? - self.intimacy_pre?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub group: Arm,
    pub n: usize,
    pub speech_ratio: GroupStats,
    pub lull_count: GroupStats,
    pub nudge_count: GroupStats,
}

/// A test that was either computed or skipped with a reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub test: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<TestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl Comparison {
    fn from(metric: &str, test: &str, r: Result<TestResult, super::stats::StatsError>) -> Self {
        match r {
            Ok(result) => Self {
                metric: metric.into(),
                test: test.into(),
                result: Some(result),
                skipped: None,
            },
            Err(e) => Self::skip(metric, test, e.to_string()),
        }
    }

    fn skip(metric: &str, test: &str, reason: String) -> Self {
        Self {
            metric: metric.into(),
            test: test.into(),
            result: None,
            skipped: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// `experiment`, `control` or `combined`.
    pub scope: String,
    pub x: String,
    pub y: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<TestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub config: ReportConfig,
    pub sessions: Vec<SessionRow>,
    pub arms: Vec<ArmSummary>,
    /// Two-group tests are (experiment, control): positive statistics mean
    /// the experiment arm is higher.
    pub comparisons: Vec<Comparison>,
    pub correlations: Vec<Correlation>,
    pub notes: Vec<String>,
}

impl CohortReport {
    pub fn arm(&self, group: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.group == group)
    }

    pub fn comparison(&self, metric: &str, test: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.metric == metric && c.test == test)
    }

    pub fn correlation(&self, scope: &str) -> Option<&Correlation> {
        self.correlations.iter().find(|c| c.scope == scope)
    }

    pub fn sessions_csv(&self) -> String {
        let mut out = String::from(
            "session_id,group,duration,speech_ratio,lull_count,nudge_count,nudge_successes,friendship_duration,intimacy_pre,intimacy_post\n",
        );
        for s in &self.sessions {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.session_id,
                s.group,
                s.duration,
                s.speech_ratio,
                s.lull_count,
                s.nudge_count,
                s.nudge_successes,
                fmt_opt(s.friendship_duration),
                fmt_opt(s.intimacy_pre),
                fmt_opt(s.intimacy_post)
            ));
        }
        out
    }

    pub fn tests_csv(&self) -> String {
        let mut out = String::from("kind,metric,test_or_scope,n,statistic,df,df2,p_value,skipped\n");
        let result_cells = |r: &Option<TestResult>| match r {
            Some(r) => format!("{},{},{},{}", r.statistic, r.df, fmt_opt(r.df2), r.p_value),
            None => ",,,".to_string(),
        };
        for c in &self.comparisons {
            out.push_str(&format!(
                "comparison,{},{},,{},{}\n",
                c.metric,
                c.test,
                result_cells(&c.result),
                c.skipped.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        for c in &self.correlations {
            out.push_str(&format!(
                "correlation,{}~{},{},{},{},{}\n",
                c.x,
                c.y,
                c.scope,
                c.n,
                result_cells(&c.result),
                c.skipped.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        out
    }

    /// Writes `report.json`, `sessions.csv` and `tests.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), AnalyticsError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::create_dir_all(dir).map_err(|source| AnalyticsError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (name, body) in [
            ("report.json", json),
            ("sessions.csv", self.sessions_csv()),
            ("tests.csv", self.tests_csv()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| AnalyticsError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Builds the cohort report. Cohort rows, when given, override the
/// per-session metadata for matching session ids.
pub fn cohort_report(
    logs: &[SessionLog],
    cohort: &[CohortRow],
    cfg: &ReportConfig,
) -> Result<CohortReport, AnalyticsError> {
    cfg.metrics.validate()?;
    let by_id: HashMap<&str, &CohortRow> = cohort.iter().map(|r| (r.session_id.as_str(), r)).collect();
    let mut notes = Vec::new();
    let mut sessions = Vec::with_capacity(logs.len());
    for log in logs {
        let m: SessionMetrics = session_metrics(log, &cfg.metrics)?;
        let meta = match by_id.get(log.session_id.as_str()) {
            Some(row) if row.group != log.group => {
                return Err(AnalyticsError::GroupMismatch {
                    session_id: log.session_id.clone(),
                    log: log.group,
                    cohort: row.group,
                })
            }
            Some(row) => (*row).clone(),
            None => CohortRow::from_log(log),
        };
        sessions.push(SessionRow {
            session_id: log.session_id.clone(),
            group: log.group,
            duration: m.duration,
            speech_ratio: m.speech_ratio,
            lull_count: m.lull_count,
            nudge_count: m.nudge_count,
            nudge_successes: m.successes(),
            friendship_duration: meta.friendship_duration,
            intimacy_pre: meta.intimacy_pre,
            intimacy_post: meta.intimacy_post,
        });
    }
    for row in cohort {
        if !logs.iter().any(|l| l.session_id == row.session_id) {
            notes.push(format!("cohort row `{}` has no session log", row.session_id));
        }
    }

    let mut per_arm: BTreeMap<Arm, Vec<&SessionRow>> = BTreeMap::new();
    for s in &sessions {
        per_arm.entry(s.group).or_default().push(s);
    }
    let column = |rows: &[&SessionRow], f: fn(&SessionRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let speech = |r: &SessionRow| r.speech_ratio;
    let lulls = |r: &SessionRow| r.lull_count as f64;
    let nudges = |r: &SessionRow| r.nudge_count as f64;

    let arms = per_arm
        .iter()
        .map(|(&group, rows)| ArmSummary {
            group,
            n: rows.len(),
            speech_ratio: GroupStats::of(&column(rows, speech)).expect("non-empty arm"),
            lull_count: GroupStats::of(&column(rows, lulls)).expect("non-empty arm"),
            nudge_count: GroupStats::of(&column(rows, nudges)).expect("non-empty arm"),
        })
        .collect();

    let mut comparisons = Vec::new();
    match (per_arm.get(&Arm::Experiment), per_arm.get(&Arm::Control)) {
        (Some(exp), Some(ctl)) => {
            for (name, f) in [("speech_ratio", speech as fn(&SessionRow) -> f64), ("lull_count", lulls)] {
                let (a, b) = (column(exp, f), column(ctl, f));
                comparisons.push(Comparison::from(name, "student_t", student_t(&a, &b)));
                if cfg.anova && name == "speech_ratio" {
                    comparisons.push(Comparison::from(name, "oneway_anova", oneway_anova(&[&a, &b])));
                }
            }
            let change = |rows: &[&SessionRow]| rows.iter().filter_map(|r| r.intimacy_change()).collect::<Vec<_>>();
            let (a, b) = (change(exp), change(ctl));
            if a.is_empty() && b.is_empty() {
                comparisons.push(Comparison::skip(
                    "intimacy_change",
                    "student_t",
                    "no intimacy ratings".into(),
                ));
            } else {
                comparisons.push(Comparison::from("intimacy_change", "student_t", student_t(&a, &b)));
            }
        }
        _ => notes.push("only one arm present; group tests omitted".into()),
    }

    let mut correlations = Vec::new();
    let mut scopes: Vec<(String, Vec<&SessionRow>)> = per_arm
        .iter()
        .map(|(arm, rows)| (arm.to_string(), rows.clone()))
        .collect();
    scopes.push(("combined".into(), sessions.iter().collect()));
    for (scope, rows) in scopes {
        let (x, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|r| Some((r.friendship_duration?, r.speech_ratio)))
            .unzip();
        let (result, skipped) = match spearman(&x, &y) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        correlations.push(Correlation {
            scope,
            x: "friendship_duration".into(),
            y: "speech_ratio".into(),
            n: x.len(),
            result,
            skipped,
        });
    }

    Ok(CohortReport {
        config: cfg.clone(),
        sessions,
        arms,
        comparisons,
        correlations,
        notes,
    })
}
