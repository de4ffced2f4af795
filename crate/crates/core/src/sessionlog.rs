//! Per-second session records, the session CSV format, and telemetry batches.
//!
//! CSV layout (one row per second, `\n` line endings):
//!
//! ```text
//! Time,Amount of Conversation,Speech,Intervention
//! 2022-11-15 11:54:08,100,TRUE,FALSE
//! 2022-11-15 11:54:14,0,-,TRUE
//! ```
//!
//! Rows where the device played a nudge carry `-` instead of a speech flag.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use backoff::backoff::Backoff;
use backoff::ExponentialBackoffBuilder;
use chrono::{Datelike, NaiveDate, NaiveDateTime, TimeDelta, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineConfig;

pub const CSV_HEADER: &str = "Time,Amount of Conversation,Speech,Intervention";
pub const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("record at {got} does not follow {last} by exactly one second")]
    Sequencing { last: NaiveDateTime, got: NaiveDateTime },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observation {
    Speech(bool),
    Intervention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SessionRecord {
    pub time: NaiveDateTime,
    pub score: u8,
    pub observation: Observation,
}

impl SessionRecord {
    pub fn observed(time: NaiveDateTime, score: u8, speech: bool) -> Self {
        Self {
            time,
            score,
            observation: Observation::Speech(speech),
        }
    }

    pub fn intervention(time: NaiveDateTime, score: u8) -> Self {
        Self {
            time,
            score,
            observation: Observation::Intervention,
        }
    }

    /// Speech flag, `None` on intervention rows.
    pub fn speech(&self) -> Option<bool> {
        match self.observation {
            Observation::Speech(s) => Some(s),
            Observation::Intervention => None,
        }
    }

    pub fn is_intervention(&self) -> bool {
        self.observation == Observation::Intervention
    }

    pub fn to_csv_row(&self) -> String {
        let mut out = String::with_capacity(40);
        self.write_row(&mut out);
        out
    }

    fn write_row(&self, out: &mut String) {
        let (speech, intervention) = match self.observation {
            Observation::Speech(s) => (bool_cell(s), "FALSE"),
            Observation::Intervention => ("-", "TRUE"),
        };
        let (d, t) = (self.time.date(), self.time.time());
        let _ = write!(
            out,
            "{:04}-{:02}-{:02} {:02}:{:02}:{:02},{},{},{}",
            d.year(),
            d.month(),
            d.day(),
            t.hour(),
            t.minute(),
            t.second(),
            self.score,
            speech,
            intervention
        );
    }
}

/// Reads a `YYYY-MM-DD HH:MM:SS` timestamp.
fn parse_time(s: &str) -> Option<NaiveDateTime> {
    let b = s.as_bytes();
    if b.len() != 19 || b[4] != b'-' || b[7] != b'-' || b[10] != b' ' || b[13] != b':' || b[16] != b':' {
        return None;
    }
    let num = |r: std::ops::Range<usize>| -> Option<u32> {
        b[r].iter().try_fold(0u32, |acc, &c| c.is_ascii_digit().then(|| acc * 10 + u32::from(c - b'0')))
    };
    NaiveDate::from_ymd_opt(num(0..4)? as i32, num(5..7)?, num(8..10)?)?.and_hms_opt(num(11..13)?, num(14..16)?, num(17..19)?)
}

fn bool_cell(b: bool) -> &'static str {
    if b {
        "TRUE"
    } else {
        "FALSE"
    }
}

pub fn to_csv(records: &[SessionRecord]) -> String {
    let mut out = String::with_capacity(40 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        r.write_row(&mut out);
        out.push('\n');
    }
    out
}

/// Parses a session CSV. Rows must be exactly one second apart.
pub fn from_csv(text: &str) -> Result<Vec<SessionRecord>, LogError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == CSV_HEADER => {}
        other => {
            return Err(LogError::Parse {
                line: 1,
                reason: format!(
                    "expected header `{CSV_HEADER}`, found `{}`",
                    other.map(|(_, h)| h).unwrap_or("")
                ),
            })
        }
    }
    let mut records: Vec<SessionRecord> = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let err = |reason: String| LogError::Parse { line, reason };
        let fields: Vec<&str> = raw.split(',').collect();
        let [time, score, speech, intervention] = fields[..] else {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        };
        let time = parse_time(time).ok_or_else(|| err(format!("bad timestamp `{time}`, expected {TIME_FORMAT}")))?;
        let score: u8 = score
            .parse()
            .ok()
            .filter(|s| *s <= 100)
            .ok_or_else(|| err(format!("score must be an integer in 0..=100, found `{score}`")))?;
        let observation = match (speech, intervention) {
            ("TRUE", "FALSE") => Observation::Speech(true),
            ("FALSE", "FALSE") => Observation::Speech(false),
            ("-", "TRUE") => Observation::Intervention,
            ("TRUE" | "FALSE", "TRUE") => {
                return Err(err("intervention rows must have `-` as speech".into()))
            }
            ("-", "FALSE") => return Err(err("`-` speech is only valid on intervention rows".into())),
            _ => {
                return Err(err(format!(
                    "bad speech/intervention cells `{speech}`,`{intervention}`"
                )))
            }
        };
        if let Some(last) = records.last() {
            if time - last.time != TimeDelta::seconds(1) {
                return Err(err(format!(
                    "timestamp {} does not follow {} by one second",
                    time.format(TIME_FORMAT),
                    last.time.format(TIME_FORMAT)
                )));
            }
        }
        records.push(SessionRecord {
            time,
            score,
            observation,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Control,
    Experiment,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Control => "control",
            Arm::Experiment => "experiment",
        })
    }
}

impl std::str::FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "control" => Ok(Arm::Control),
            "experiment" => Ok(Arm::Experiment),
            other => Err(format!("unknown group `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub t: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetadata {
    pub start_time: NaiveDateTime,
    #[serde(default)]
    pub friendship_duration: Option<f64>,
    #[serde(default)]
    pub intimacy_pre: Option<f64>,
    #[serde(default)]
    pub intimacy_post: Option<f64>,
    #[serde(default)]
    pub preferred_genres: Vec<String>,
    pub config: EngineConfig,
    #[serde(default)]
    pub notes: Vec<Note>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub session_id: String,
    pub group: Arm,
    pub metadata: SessionMetadata,
    records: Vec<SessionRecord>,
}

/// JSON sidecar written next to the CSV.
#[derive(Serialize, Deserialize)]
struct Sidecar {
    session_id: String,
    group: Arm,
    #[serde(flatten)]
    metadata: SessionMetadata,
}

impl SessionLog {
    pub fn new(session_id: impl Into<String>, group: Arm, metadata: SessionMetadata) -> Self {
        Self {
            session_id: session_id.into(),
            group,
            metadata,
            records: Vec::new(),
        }
    }

    pub fn with_records(
        session_id: impl Into<String>,
        group: Arm,
        metadata: SessionMetadata,
        records: Vec<SessionRecord>,
    ) -> Result<Self, LogError> {
        let mut log = Self::new(session_id, group, metadata);
        for r in records {
            log.append(r)?;
        }
        Ok(log)
    }

    pub fn records(&self) -> &[SessionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn append(&mut self, record: SessionRecord) -> Result<(), LogError> {
        if let Some(last) = self.records.last() {
            if record.time - last.time != TimeDelta::seconds(1) {
                return Err(LogError::Sequencing {
                    last: last.time,
                    got: record.time,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        to_csv(&self.records)
    }

    pub fn csv_path(dir: &Path, session_id: &str) -> PathBuf {
        dir.join(format!("{session_id}.csv"))
    }

    pub fn meta_path(dir: &Path, session_id: &str) -> PathBuf {
        dir.join(format!("{session_id}.meta.json"))
    }

    pub fn metadata_json(&self) -> Result<String, LogError> {
        Ok(serde_json::to_string_pretty(&Sidecar {
            session_id: self.session_id.clone(),
            group: self.group,
            metadata: self.metadata.clone(),
        })?)
    }

    /// Writes `<id>.csv` and `<id>.meta.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf, LogError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv = Self::csv_path(dir, &self.session_id);
        std::fs::write(&csv, self.to_csv()).map_err(io_err(&csv))?;
        let meta = Self::meta_path(dir, &self.session_id);
        std::fs::write(&meta, self.metadata_json()?).map_err(io_err(&meta))?;
        Ok(csv)
    }

    /// Reads a session back from its CSV and the sidecar next to it.
    pub fn read(csv_path: &Path) -> Result<Self, LogError> {
        let text = std::fs::read_to_string(csv_path).map_err(io_err(csv_path))?;
        let records = from_csv(&text)?;
        let meta_path = csv_path.with_extension("meta.json");
        let meta_text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let sidecar: Sidecar = serde_json::from_str(&meta_text)?;
        Self::with_records(sidecar.session_id, sidecar.group, sidecar.metadata, records)
    }

    /// Speech labels for replaying this session through a detector.
    /// Intervention rows replay as silence.
    pub fn replay_flags(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.speech().unwrap_or(false)).collect()
    }
}

// ---------------------------------------------------------------------------
// Telemetry

/// JSON form of one record on the telemetry wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRecord {
    pub t: u64,
    pub time: String,
    pub score: u8,
    pub speech: Option<bool>,
    pub intervention: bool,
}

impl WireRecord {
    pub fn new(t: u64, r: &SessionRecord) -> Self {
        Self {
            t,
            time: r.time.format(TIME_FORMAT).to_string(),
            score: r.score,
            speech: r.speech(),
            intervention: r.is_intervention(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordBatch {
    pub session_id: String,
    pub first_t: u64,
    pub last_t: u64,
    pub records: Vec<WireRecord>,
}

impl RecordBatch {
    pub fn idempotency_key(&self) -> String {
        format!("{}:{}:{}", self.session_id, self.first_t, self.last_t)
    }
}

/// Accumulates records into fixed-size batches.
#[derive(Debug, Clone)]
pub struct BatchAssembler {
    session_id: String,
    size: usize,
    buf: Vec<WireRecord>,
}

impl BatchAssembler {
    pub fn new(session_id: impl Into<String>, size: usize) -> Self {
        Self {
            session_id: session_id.into(),
            size: size.max(1),
            buf: Vec::new(),
        }
    }

    pub fn push(&mut self, t: u64, record: &SessionRecord) -> Option<RecordBatch> {
        self.buf.push(WireRecord::new(t, record));
        (self.buf.len() >= self.size).then(|| self.take())
    }

    pub fn finish(&mut self) -> Option<RecordBatch> {
        (!self.buf.is_empty()).then(|| self.take())
    }

    fn take(&mut self) -> RecordBatch {
        let records = std::mem::take(&mut self.buf);
        RecordBatch {
            session_id: self.session_id.clone(),
            first_t: records[0].t,
            last_t: records[records.len() - 1].t,
            records,
        }
    }
}

/// Splits a whole session into batches of `size` records.
pub fn batches(session_id: &str, records: &[SessionRecord], size: usize) -> Vec<RecordBatch> {
    let mut asm = BatchAssembler::new(session_id, size);
    let mut out: Vec<RecordBatch> = records
        .iter()
        .enumerate()
        .filter_map(|(t, r)| asm.push(t as u64, r))
        .collect();
    out.extend(asm.finish());
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub key: String,
    #[serde(default)]
    pub duplicate: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("server rejected batch with status {status}: {body}")]
    Rejected { status: u16, body: String },
}

impl TransportError {
    /// 4xx other than 408/429 will not succeed on retry.
    pub fn is_permanent(&self) -> bool {
        matches!(self, TransportError::Rejected { status, .. }
            if (400..500).contains(status) && *status != 408 && *status != 429)
    }
}

pub trait TelemetryTransport {
    fn send(&mut self, batch: &RecordBatch) -> Result<Ack, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_ms: u64,
    pub multiplier: f64,
    pub max_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_ms: 500,
            multiplier: 2.0,
            max_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delays between successive attempts (`max_attempts - 1` of them).
    pub fn delays(&self) -> Vec<Duration> {
        let mut b = ExponentialBackoffBuilder::new()
            .with_initial_interval(Duration::from_millis(self.initial_ms))
            .with_multiplier(self.multiplier)
            .with_randomization_factor(0.0)
            .with_max_interval(Duration::from_millis(self.max_ms))
            .with_max_elapsed_time(None)
            .build();
        (1..self.max_attempts.max(1))
            .map(|_| b.next_backoff().expect("no elapsed-time cap"))
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("batch {key} not delivered after {attempts} attempt(s): {last}")]
pub struct UploadError {
    pub key: String,
    pub attempts: u32,
    pub last: TransportError,
}

/// Sends one batch, retrying transient failures with exponential back-off.
pub fn upload_batch(
    transport: &mut dyn TelemetryTransport,
    batch: &RecordBatch,
    retry: &RetryPolicy,
    sleep: &mut dyn FnMut(Duration),
) -> Result<Ack, UploadError> {
    let delays = retry.delays();
    let mut attempts = 0;
    loop {
        attempts += 1;
        match transport.send(batch) {
            Ok(ack) => return Ok(ack),
            Err(e) if e.is_permanent() || attempts as usize > delays.len() => {
                return Err(UploadError {
                    key: batch.idempotency_key(),
                    attempts,
                    last: e,
                })
            }
            Err(_) => sleep(delays[attempts as usize - 1]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TelemetryStatus {
    Disabled,
    Ok,
    Degraded,
}

/// Queue of batches awaiting delivery. Undelivered batches stay queued in
/// order; the local CSV is unaffected either way.
pub struct Uploader<T> {
    transport: T,
    retry: RetryPolicy,
    queue: VecDeque<RecordBatch>,
    acked: HashSet<String>,
    status: TelemetryStatus,
    sleep: Box<dyn FnMut(Duration) + Send>,
}

impl<T: TelemetryTransport> Uploader<T> {
    pub fn new(transport: T, retry: RetryPolicy) -> Self {
        Self::with_sleep(transport, retry, Box::new(std::thread::sleep))
    }

    pub fn with_sleep(transport: T, retry: RetryPolicy, sleep: Box<dyn FnMut(Duration) + Send>) -> Self {
        Self {
            transport,
            retry,
            queue: VecDeque::new(),
            acked: HashSet::new(),
            status: TelemetryStatus::Ok,
            sleep,
        }
    }

    pub fn enqueue(&mut self, batch: RecordBatch) {
        if !self.acked.contains(&batch.idempotency_key()) {
            self.queue.push_back(batch);
        }
    }

    pub fn status(&self) -> TelemetryStatus {
        self.status
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn acked(&self) -> &HashSet<String> {
        &self.acked
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Delivers queued batches in order until one fails for good.
    pub fn flush(&mut self) -> TelemetryStatus {
        while let Some(batch) = self.queue.front() {
            match upload_batch(&mut self.transport, batch, &self.retry, &mut *self.sleep) {
                Ok(_) => {
                    let batch = self.queue.pop_front().expect("front exists");
                    self.acked.insert(batch.idempotency_key());
                }
                Err(_) => {
                    self.status = TelemetryStatus::Degraded;
                    return self.status;
                }
            }
        }
        self.status = TelemetryStatus::Ok;
        self.status
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    pub(crate) fn excerpt() -> Vec<SessionRecord> {
        let t0 = NaiveDate::from_ymd_opt(2022, 11, 15)
            .unwrap()
            .and_hms_opt(11, 54, 8)
            .unwrap();
        let at = |s: i64| t0 + TimeDelta::seconds(s);
        vec![
            SessionRecord::observed(at(0), 100, true),
            SessionRecord::observed(at(1), 100, true),
            SessionRecord::observed(at(2), 90, false),
            SessionRecord::observed(at(3), 50, false),
            SessionRecord::observed(at(4), 20, false),
            SessionRecord::observed(at(5), 10, false),
            SessionRecord::intervention(at(6), 0),
            SessionRecord::observed(at(7), 50, true),
            SessionRecord::observed(at(8), 55, true),
        ]
    }

    const EXCERPT_CSV: &str = "Time,Amount of Conversation,Speech,Intervention
2022-11-15 11:54:08,100,TRUE,FALSE
2022-11-15 11:54:09,100,TRUE,FALSE
2022-11-15 11:54:10,90,FALSE,FALSE
2022-11-15 11:54:11,50,FALSE,FALSE
2022-11-15 11:54:12,20,FALSE,FALSE
2022-11-15 11:54:13,10,FALSE,FALSE
2022-11-15 11:54:14,0,-,TRUE
2022-11-15 11:54:15,50,TRUE,FALSE
2022-11-15 11:54:16,55,TRUE,FALSE
";

    #[test]
    fn excerpt_serializes_exactly() {
        assert_eq!(to_csv(&excerpt()), EXCERPT_CSV);
        assert_eq!(excerpt()[0].to_csv_row(), "2022-11-15 11:54:08,100,TRUE,FALSE");
        assert_eq!(from_csv(EXCERPT_CSV).unwrap(), excerpt());
    }

    #[test]
    fn intervention_row_shape() {
        let r = excerpt()[6];
        assert_eq!((r.score, r.speech(), r.is_intervention()), (0, None, true));
        assert_eq!(r.to_csv_row(), "2022-11-15 11:54:14,0,-,TRUE");
    }

    fn meta() -> SessionMetadata {
        SessionMetadata {
            start_time: excerpt()[0].time,
            friendship_duration: Some(2.0),
            intimacy_pre: None,
            intimacy_post: None,
            preferred_genres: vec![],
            config: EngineConfig::default(),
            notes: vec![],
        }
    }

    #[test]
    fn append_enforces_one_second_steps() {
        let recs = excerpt();
        let mut log = SessionLog::new("s", Arm::Experiment, meta());
        log.append(recs[0]).unwrap();
        assert_eq!(log.len(), 1);
        assert!(matches!(log.append(recs[2]), Err(LogError::Sequencing { .. })));
        assert!(matches!(log.append(recs[0]), Err(LogError::Sequencing { .. })));
        log.append(recs[1]).unwrap();
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let both = EXCERPT_CSV.replace("11:54:14,0,-,TRUE", "11:54:14,0,TRUE,TRUE");
        let e = from_csv(&both).unwrap_err();
        assert!(matches!(e, LogError::Parse { line: 8, .. }), "{e}");

        let dash = EXCERPT_CSV.replace("11:54:10,90,FALSE,FALSE", "11:54:10,90,-,FALSE");
        assert!(matches!(from_csv(&dash), Err(LogError::Parse { line: 4, .. })));

        let gap = EXCERPT_CSV.replace("11:54:16", "11:54:17");
        assert!(matches!(from_csv(&gap), Err(LogError::Parse { line: 10, .. })));

        let bad_time = EXCERPT_CSV.replace("2022-11-15 11:54:09", "2022/11/15 11:54:09");
        assert!(matches!(from_csv(&bad_time), Err(LogError::Parse { line: 3, .. })));

        let bad_score = EXCERPT_CSV.replace(",55,", ",101,");
        assert!(matches!(from_csv(&bad_score), Err(LogError::Parse { line: 10, .. })));

        assert!(matches!(from_csv("Time,Score\n"), Err(LogError::Parse { line: 1, .. })));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = SessionLog::with_records("s1", Arm::Control, meta(), excerpt()).unwrap();
        let path = log.write_to_dir(dir.path()).unwrap();
        let back = SessionLog::read(&path).unwrap();
        assert_eq!(back, log);
        assert_eq!(
            back.replay_flags(),
            vec![true, true, false, false, false, false, false, true, true]
        );
    }

    #[test]
    fn batching_arithmetic() {
        let t0 = excerpt()[0].time;
        let recs: Vec<SessionRecord> = (0..3600)
            .map(|s| SessionRecord::observed(t0 + TimeDelta::seconds(s), 0, false))
            .collect();
        let b = batches("s", &recs, 60);
        assert_eq!(b.len(), 60);
        assert_eq!(b[1].idempotency_key(), "s:60:119");
        assert_eq!(batches("s", &recs[..61], 60).len(), 2);
    }

    #[test]
    fn retry_delays_grow_geometrically() {
        let p = RetryPolicy {
            max_attempts: 5,
            initial_ms: 100,
            multiplier: 2.0,
            max_ms: 500,
        };
        let ms: Vec<u128> = p.delays().iter().map(Duration::as_millis).collect();
        assert_eq!(ms, vec![100, 200, 400, 500]);
    }

    /// Fails the first `fail_first` sends of each key, and remembers what was
    /// stored server-side by key.
    struct Flaky {
        fail_first: usize,
        attempts: std::collections::HashMap<String, usize>,
        stored: std::collections::BTreeMap<String, RecordBatch>,
        down: bool,
    }

    impl TelemetryTransport for Flaky {
        fn send(&mut self, batch: &RecordBatch) -> Result<Ack, TransportError> {
            if self.down {
                return Err(TransportError::Unreachable("connection refused".into()));
            }
            let key = batch.idempotency_key();
            let n = self.attempts.entry(key.clone()).or_default();
            *n += 1;
            // The server stores the batch even when the ack gets lost.
            let duplicate = self.stored.insert(key.clone(), batch.clone()).is_some();
            if *n <= self.fail_first {
                return Err(TransportError::Unreachable("ack lost".into()));
            }
            Ok(Ack { key, duplicate })
        }
    }

    fn no_sleep() -> Box<dyn FnMut(Duration) + Send> {
        Box::new(|_| {})
    }

    #[test]
    fn flaky_endpoint_loses_nothing() {
        let t0 = excerpt()[0].time;
        let recs: Vec<SessionRecord> = (0..600)
            .map(|s| SessionRecord::observed(t0 + TimeDelta::seconds(s), (s % 101) as u8, s % 3 == 0))
            .collect();
        let flaky = Flaky {
            fail_first: 2,
            attempts: Default::default(),
            stored: Default::default(),
            down: false,
        };
        let mut up = Uploader::with_sleep(flaky, RetryPolicy::default(), no_sleep());
        for b in batches("s", &recs, 60) {
            up.enqueue(b);
        }
        assert_eq!(up.flush(), TelemetryStatus::Ok);
        assert_eq!(up.acked().len(), 10);
        let stored: Vec<WireRecord> = up
            .transport()
            .stored
            .values()
            .flat_map(|b| b.records.clone())
            .collect();
        assert_eq!(stored.len(), 600);
        // Resending an acked batch is a no-op on the client.
        up.enqueue(batches("s", &recs, 60).remove(0));
        assert_eq!(up.pending(), 0);
    }

    #[test]
    fn unreachable_endpoint_degrades_without_touching_the_log() {
        let log = SessionLog::with_records("s", Arm::Experiment, meta(), excerpt()).unwrap();
        let before = log.to_csv();
        let mut slept = Vec::new();
        let down = Flaky {
            fail_first: 0,
            attempts: Default::default(),
            stored: Default::default(),
            down: true,
        };
        let mut up = Uploader::with_sleep(down, RetryPolicy::default(), no_sleep());
        for b in batches(&log.session_id, log.records(), 4) {
            up.enqueue(b);
        }
        let mut recorder = |d: Duration| slept.push(d);
        let e = upload_batch(
            &mut Flaky {
                fail_first: 0,
                attempts: Default::default(),
                stored: Default::default(),
                down: true,
            },
            &batches("s", log.records(), 4)[0],
            &RetryPolicy::default(),
            &mut recorder,
        )
        .unwrap_err();
        assert_eq!(e.attempts, 5);
        assert_eq!(slept.len(), 4);
        assert_eq!(up.flush(), TelemetryStatus::Degraded);
        assert_eq!(up.pending(), 3);
        assert_eq!(log.to_csv(), before);
        // Endpoint comes back: the queue drains.
        up.transport.down = false;
        assert_eq!(up.flush(), TelemetryStatus::Ok);
        assert_eq!(up.pending(), 0);
    }

    #[test]
    fn permanent_rejection_is_not_retried() {
        struct Reject(u32);
        impl TelemetryTransport for Reject {
            fn send(&mut self, _: &RecordBatch) -> Result<Ack, TransportError> {
                self.0 += 1;
                Err(TransportError::Rejected {
                    status: 401,
                    body: "bad token".into(),
                })
            }
        }
        let mut r = Reject(0);
        let e = upload_batch(&mut r, &batches("s", &excerpt(), 9)[0], &RetryPolicy::default(), &mut |_| {})
            .unwrap_err();
        assert_eq!((e.attempts, r.0), (1, 1));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        pub(crate) fn arb_records() -> impl Strategy<Value = Vec<SessionRecord>> {
            (
                0i64..2_000_000_000,
                proptest::collection::vec((0u8..=100, 0u8..3), 0..200),
            )
                .prop_map(|(start, rows)| {
                    let t0 = chrono::DateTime::from_timestamp(start, 0).unwrap().naive_utc();
                    rows.into_iter()
                        .enumerate()
                        .map(|(i, (score, kind))| {
                            let time = t0 + TimeDelta::seconds(i as i64);
                            match kind {
                                0 => SessionRecord::observed(time, score, false),
                                1 => SessionRecord::observed(time, score, true),
                                _ => SessionRecord::intervention(time, score),
                            }
                        })
                        .collect()
                })
        }

        proptest! {
            #[test]
            fn csv_round_trip(recs in arb_records()) {
                let text = to_csv(&recs);
                prop_assert_eq!(from_csv(&text).unwrap(), recs.clone());
                prop_assert_eq!(text.lines().count(), recs.len() + 1);
            }
        }
    }
}
