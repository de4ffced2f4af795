//! The tick loop and its controller.
//!
//! One thread owns the [`Engine`] for the whole session. API handlers talk to
//! it through a command channel and read a status snapshot that is replaced
//! whole once per tick, so no reader ever sees fields from two different
//! seconds. Commands are only applied between ticks.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::sync::atomic::AtomicU8;
use std::sync::{mpsc, Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};

use lull_core::content::{ContentError, Corpus, NudgeRef, NudgeRequest, StoryLibrary};
use lull_core::detect::{
    ClassifiedSecond, DetectError, Detector, DetectorConfig, EnergyDetector, Label, TraceDetector, WavFrames,
};
use lull_core::engine::{Engine, EngineError, TickEvent};
use lull_core::policy::{Mode, PolicyError, PolicyEvent};
use lull_core::sessionlog::{Arm, BatchAssembler, Note, SessionLog, SessionMetadata, TelemetryStatus};
use lull_core::sim::Dyad;

use crate::config::{RunMode, SessionConfig};
use crate::telemetry::{load_status, TelemetryWorker};
use crate::ServiceError;

/// Capacity of the event broadcast; slow subscribers see a `lagged` event.
pub const EVENT_BUFFER: usize = 1024;

/// Row timestamps for replay and simulate start here unless configured.
pub fn fixed_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 8)
        .unwrap()
        .and_hms_opt(10, 0, 0)
        .unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    Running,
    Finished,
    Stopped,
    Aborted,
}

impl SessionState {
    pub fn is_over(self) -> bool {
        matches!(self, Self::Finished | Self::Stopped | Self::Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorMode {
    Auto,
    Wizard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub state: SessionState,
    pub arm: Arm,
    pub run_mode: RunMode,
    /// Last completed second; `None` before the first tick.
    pub t: Option<u64>,
    pub score: u8,
    pub speech: Option<bool>,
    pub light_on: bool,
    pub operator: OperatorMode,
    pub policy_mode: Mode,
    pub attempts_failed: u32,
    pub last_action: Option<PolicyEvent>,
    pub telemetry: TelemetryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndEvent {
    pub state: SessionState,
    pub ticks: u64,
    pub telemetry: TelemetryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// What the event stream carries.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", content = "data", rename_all = "snake_case")]
pub enum ServerEvent {
    Tick(TickEvent),
    Policy(PolicyEvent),
    End(EndEvent),
}

impl ServerEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ServerEvent::Tick(_) => "tick",
            ServerEvent::Policy(_) => "policy",
            ServerEvent::End(_) => "end",
        }
    }

    pub fn data_json(&self) -> String {
        match self {
            ServerEvent::Tick(e) => serde_json::to_string(e),
            ServerEvent::Policy(e) => serde_json::to_string(e),
            ServerEvent::End(e) => serde_json::to_string(e),
        }
        .expect("event serializes")
    }
}

/// Machine-readable command failure. `status` is the HTTP status to use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("{reason}: {message}")]
pub struct CommandError {
    #[serde(skip)]
    pub status: u16,
    pub reason: &'static str,
    pub message: String,
}

impl CommandError {
    pub fn conflict(reason: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: 409,
            reason,
            message: message.into(),
        }
    }

    pub fn unprocessable(reason: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: 422,
            reason,
            message: message.into(),
        }
    }

    fn from_engine(e: EngineError) -> Self {
        let msg = e.to_string();
        match e {
            EngineError::ControlArm => Self::conflict("control_arm", msg),
            EngineError::Policy(PolicyError::RateLimited(_)) => Self::conflict("rate_limited", msg),
            EngineError::Content(c) => {
                let reason = match c {
                    ContentError::NoContent => "no_content",
                    ContentError::StoryExhausted { .. } => "story_exhausted",
                    ContentError::UnknownGenre(_) => "unknown_genre",
                    ContentError::UnknownItem(_) => "unknown_item",
                    ContentError::UnknownStory(_) => "unknown_story",
                    ContentError::OutOfOrderSegment { .. } => "out_of_order_segment",
                    _ => "content",
                };
                Self::unprocessable(reason, msg)
            }
            _ => Self {
                status: 500,
                reason: "internal",
                message: msg,
            },
        }
    }

    fn not_running() -> Self {
        Self::conflict("not_running", "no session is running")
    }
}

type Reply<T> = oneshot::Sender<Result<T, CommandError>>;

enum Command {
    Nudge(NudgeRequest, Reply<NudgeRef>),
    SetMode(OperatorMode, Reply<OperatorMode>),
    Note(String, Option<u64>, Reply<Note>),
    Stop(Reply<()>),
}

/// Why a session ended early, for exit-code mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortKind {
    Source,
    Engine,
    Io,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub status: SessionStatus,
    pub log: SessionLog,
    pub abort: Option<AbortKind>,
}

enum SourceSpec {
    Trace(TraceDetector),
    Audio(PathBuf, DetectorConfig),
    Dyad(Box<Dyad>),
}

enum TickSource {
    Detector(Box<dyn Detector + Send>),
    Dyad(Box<Dyad>),
}

impl SourceSpec {
    fn open(self) -> Result<TickSource, DetectError> {
        Ok(match self {
            SourceSpec::Trace(d) => TickSource::Detector(Box::new(d)),
            SourceSpec::Audio(path, cfg) => {
                let frames = WavFrames::new(BufReader::new(File::open(&path)?))?;
                TickSource::Detector(Box::new(EnergyDetector::new(frames, cfg)?))
            }
            SourceSpec::Dyad(d) => TickSource::Dyad(d),
        })
    }
}

impl TickSource {
    fn next(&mut self, t: u64) -> Result<Option<ClassifiedSecond>, DetectError> {
        match self {
            TickSource::Detector(d) => d.next_second(),
            TickSource::Dyad(d) => Ok(Some(ClassifiedSecond {
                t,
                label: Label::from_speech(d.step(t)),
                confidence: 1.0,
            })),
        }
    }

    /// Simulated dyads react to the nudges they hear.
    fn feedback(&mut self, t: u64, intervention: bool) {
        if let (TickSource::Dyad(d), true) = (self, intervention) {
            d.nudge(t);
        }
    }
}

struct Prepared {
    cfg: SessionConfig,
    engine: Engine,
    source: Option<SourceSpec>,
    operator: OperatorMode,
}

impl Prepared {
    fn new(cfg: SessionConfig) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let corpus = Arc::new(match &cfg.corpus {
            Some(p) => Corpus::from_path(p).map_err(|e| ServiceError::Input(format!("{}: {e}", p.display())))?,
            None => Corpus::fixture(),
        });
        let stories = Arc::new(match &cfg.stories {
            Some(p) => StoryLibrary::from_path(p).map_err(|e| ServiceError::Input(format!("{}: {e}", p.display())))?,
            None => StoryLibrary::fixture(),
        });
        let (source, default_id) = match cfg.mode {
            RunMode::Replay => {
                let path = cfg.source.trace.as_ref().expect("validated");
                let det = TraceDetector::from_path(path)
                    .map_err(|e| ServiceError::Input(format!("{}: {e}", path.display())))?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("replay").to_string();
                (SourceSpec::Trace(det), stem)
            }
            RunMode::Live => {
                let path = cfg.source.audio.clone().expect("validated");
                (SourceSpec::Audio(path, cfg.engine.detector), String::new())
            }
            RunMode::Simulate => {
                let profile = cfg
                    .source
                    .profile
                    .as_ref()
                    .expect("validated")
                    .resolve()
                    .map_err(|e| ServiceError::Config(crate::ConfigError::Invalid(e.to_string())))?;
                (
                    SourceSpec::Dyad(Box::new(Dyad::new(profile, cfg.source.seed))),
                    format!("sim-{}", cfg.source.seed),
                )
            }
        };
        let start_time = match (cfg.participants.start_time, cfg.mode) {
            (Some(t), _) => t,
            (None, RunMode::Live) => {
                let now = chrono::Local::now().naive_local();
                now.with_nanosecond(0).unwrap_or(now)
            }
            (None, _) => fixed_start(),
        };
        let session_id = cfg.session_id.clone().unwrap_or_else(|| {
            if default_id.is_empty() {
                format!("session-{}", start_time.format("%Y%m%d-%H%M%S"))
            } else {
                default_id
            }
        });
        let metadata = SessionMetadata {
            start_time,
            friendship_duration: cfg.participants.friendship_duration,
            intimacy_pre: cfg.participants.intimacy_pre,
            intimacy_post: cfg.participants.intimacy_post,
            preferred_genres: Vec::new(),
            config: cfg.engine.clone(),
            notes: Vec::new(),
        };
        let engine = Engine::new(session_id, cfg.arm, &cfg.engine, metadata, corpus, stories)
            .map_err(|e| ServiceError::Config(crate::ConfigError::Invalid(e.to_string())))?;
        let operator = if engine.config().policy.auto_enabled {
            OperatorMode::Auto
        } else {
            OperatorMode::Wizard
        };
        Ok(Self {
            cfg,
            engine,
            source: Some(source),
            operator,
        })
    }

    fn status(&self, state: SessionState) -> SessionStatus {
        let e = &self.engine;
        SessionStatus {
            session_id: e.log().session_id.clone(),
            state,
            arm: e.log().group,
            run_mode: self.cfg.mode,
            t: None,
            score: e.conversation().score(),
            speech: None,
            light_on: e.policy().light_on(),
            operator: self.operator,
            policy_mode: e.policy().mode(),
            attempts_failed: e.policy().attempts_failed(),
            last_action: None,
            telemetry: if self.cfg.telemetry.url.is_some() {
                TelemetryStatus::Ok
            } else {
                TelemetryStatus::Disabled
            },
            log_path: None,
            error: None,
        }
    }

    fn set_mode(&mut self, mode: OperatorMode) -> Result<OperatorMode, CommandError> {
        if self.engine.log().group == Arm::Control {
            return Err(CommandError::conflict("control_arm", "control-arm sessions have no nudges to switch"));
        }
        self.engine.set_auto(mode == OperatorMode::Auto);
        self.operator = mode;
        Ok(mode)
    }

    fn add_note(&mut self, text: String, t: Option<u64>) -> Result<Note, CommandError> {
        if text.trim().is_empty() {
            return Err(CommandError::unprocessable("empty_note", "note text is empty"));
        }
        let note = Note {
            t: t.unwrap_or_else(|| self.engine.next_t().saturating_sub(1)),
            text,
        };
        self.engine.log_mut().metadata.notes.push(note.clone());
        Ok(note)
    }
}

struct Shared {
    status: RwLock<SessionStatus>,
    events: broadcast::Sender<ServerEvent>,
    prepared: Mutex<Option<Prepared>>,
    commands: Mutex<Option<mpsc::Sender<Command>>>,
    handle: Mutex<Option<JoinHandle<SessionOutcome>>>,
}

/// Handle shared by the CLI and HTTP handlers. Cheap to clone.
#[derive(Clone)]
pub struct SessionController {
    shared: Arc<Shared>,
}

impl SessionController {
    /// Loads corpus, content and the trace (if any) and builds the engine.
    /// Nothing is written until the session runs.
    pub fn prepare(cfg: SessionConfig) -> Result<Self, ServiceError> {
        let prepared = Prepared::new(cfg)?;
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        Ok(Self {
            shared: Arc::new(Shared {
                status: RwLock::new(prepared.status(SessionState::Idle)),
                events,
                prepared: Mutex::new(Some(prepared)),
                commands: Mutex::new(None),
                handle: Mutex::new(None),
            }),
        })
    }

    pub fn status(&self) -> SessionStatus {
        self.shared.status.read().expect("status lock").clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ServerEvent> {
        self.shared.events.subscribe()
    }

    pub fn start(&self) -> Result<SessionStatus, CommandError> {
        let Some(prepared) = self.shared.prepared.lock().expect("prepared lock").take() else {
            let state = self.status().state;
            return Err(if state.is_over() {
                CommandError::conflict("session_over", "the session has already ended")
            } else {
                CommandError::conflict("already_running", "the session is already running")
            });
        };
        let (tx, rx) = mpsc::channel();
        *self.shared.commands.lock().expect("commands lock") = Some(tx);
        {
            let mut st = self.shared.status.write().expect("status lock");
            st.state = SessionState::Running;
        }
        let shared = self.shared.clone();
        let handle = std::thread::Builder::new()
            .name("tick-loop".into())
            .spawn(move || run_loop(shared, prepared, rx))
            .expect("spawn tick loop");
        *self.shared.handle.lock().expect("handle lock") = Some(handle);
        Ok(self.status())
    }

    fn send(&self, make: impl FnOnce() -> Command) -> Result<(), CommandError> {
        let guard = self.shared.commands.lock().expect("commands lock");
        let tx = guard.as_ref().ok_or_else(CommandError::not_running)?;
        tx.send(make()).map_err(|_| CommandError::not_running())
    }

    /// Queues an operator nudge; it plays at the next tick.
    pub async fn nudge(&self, req: NudgeRequest) -> Result<NudgeRef, CommandError> {
        let (tx, rx) = oneshot::channel();
        self.send(|| Command::Nudge(req, tx))?;
        rx.await.map_err(|_| CommandError::not_running())?
    }

    pub async fn set_mode(&self, mode: OperatorMode) -> Result<OperatorMode, CommandError> {
        if let Some(p) = self.shared.prepared.lock().expect("prepared lock").as_mut() {
            let out = p.set_mode(mode)?;
            self.shared.status.write().expect("status lock").operator = out;
            return Ok(out);
        }
        let (tx, rx) = oneshot::channel();
        self.send(|| Command::SetMode(mode, tx))?;
        rx.await.map_err(|_| CommandError::not_running())?
    }

    pub async fn note(&self, text: String, t: Option<u64>) -> Result<Note, CommandError> {
        if let Some(p) = self.shared.prepared.lock().expect("prepared lock").as_mut() {
            return p.add_note(text, t);
        }
        let (tx, rx) = oneshot::channel();
        self.send(|| Command::Note(text, t, tx))?;
        rx.await.map_err(|_| CommandError::not_running())?
    }

    pub async fn stop(&self) -> Result<(), CommandError> {
        let (tx, rx) = oneshot::channel();
        self.send(|| Command::Stop(tx))?;
        rx.await.map_err(|_| CommandError::not_running())?
    }

    /// Blocking variant of [`stop`](Self::stop) for non-async callers.
    pub fn stop_blocking(&self) -> Result<(), CommandError> {
        let (tx, rx) = oneshot::channel();
        self.send(|| Command::Stop(tx))?;
        rx.blocking_recv().map_err(|_| CommandError::not_running())?
    }

    /// Waits for the tick loop to finish. Returns `None` if the session was
    /// never started or another caller already collected the outcome.
    pub fn wait(&self) -> Option<SessionOutcome> {
        let handle = self.shared.handle.lock().expect("handle lock").take()?;
        Some(handle.join().expect("tick loop panicked"))
    }

    /// Starts the session and blocks until it ends.
    pub fn run_to_end(&self) -> Result<SessionOutcome, ServiceError> {
        self.start().map_err(|e| ServiceError::Runtime(e.to_string()))?;
        self.wait()
            .ok_or_else(|| ServiceError::Runtime("session outcome already collected".into()))
    }
}

/// Convenience: prepare, run in virtual or paced time, return the outcome.
pub fn run_session(cfg: SessionConfig) -> Result<SessionOutcome, ServiceError> {
    SessionController::prepare(cfg)?.run_to_end()
}

struct Loop {
    shared: Arc<Shared>,
    p: Prepared,
    telemetry_status: Option<Arc<AtomicU8>>,
    last_action: Option<PolicyEvent>,
    last_t: Option<u64>,
    last_speech: Option<bool>,
}

enum Flow {
    Continue,
    Stop,
}

impl Loop {
    fn handle(&mut self, cmd: Command) -> Flow {
        match cmd {
            Command::Nudge(req, reply) => {
                let _ = reply.send(self.p.engine.queue_nudge(&req).map_err(CommandError::from_engine));
            }
            Command::SetMode(mode, reply) => {
                let r = self.p.set_mode(mode);
                if r.is_ok() {
                    self.publish_status(SessionState::Running);
                }
                let _ = reply.send(r);
            }
            Command::Note(text, t, reply) => {
                let _ = reply.send(self.p.add_note(text, t));
            }
            Command::Stop(reply) => {
                let _ = reply.send(Ok(()));
                return Flow::Stop;
            }
        }
        Flow::Continue
    }

    fn telemetry(&self) -> TelemetryStatus {
        self.telemetry_status
            .as_deref()
            .map(load_status)
            .unwrap_or(TelemetryStatus::Disabled)
    }

    fn publish_status(&self, state: SessionState) {
        let mut st = self.p.status(state);
        st.t = self.last_t;
        st.speech = self.last_speech;
        st.last_action = self.last_action.clone();
        st.telemetry = self.telemetry();
        *self.shared.status.write().expect("status lock") = st;
    }
}

fn run_loop(shared: Arc<Shared>, mut p: Prepared, rx: mpsc::Receiver<Command>) -> SessionOutcome {
    let tick = p.cfg.tick_ms();
    let max = p.cfg.max_seconds();
    let tel = p.cfg.telemetry.clone();
    let output_dir = p.cfg.output_dir();
    let source = p.source.take().expect("source taken once");
    let worker = match &tel.url {
        Some(url) => TelemetryWorker::http(url.clone(), tel.token.clone(), tel.retry),
        None => TelemetryWorker::disabled(),
    };
    let mut batches = BatchAssembler::new(p.engine.log().session_id.clone(), tel.batch_size);
    let mut lp = Loop {
        telemetry_status: tel.url.is_some().then(|| worker.status_handle()),
        shared,
        p,
        last_action: None,
        last_t: None,
        last_speech: None,
    };

    let mut error = None;
    let mut abort = None;
    let mut state = SessionState::Finished;
    let mut source = match source.open() {
        Ok(s) => Some(s),
        Err(e) => {
            error = Some(format!("audio source: {e}"));
            abort = Some(AbortKind::Source);
            state = SessionState::Aborted;
            None
        }
    };

    let clock = Instant::now();
    'ticks: while let Some(src) = source.as_mut() {
        let t = lp.p.engine.next_t();
        if max.is_some_and(|m| t >= m) {
            break;
        }
        // Serve commands until this second is due. The deadline is measured
        // from session start, so a slow tick does not push later ones back.
        let deadline = clock + Duration::from_millis(tick.saturating_mul(t + 1));
        loop {
            let now = Instant::now();
            let cmd = if now >= deadline {
                match rx.try_recv() {
                    Ok(c) => c,
                    Err(_) => break,
                }
            } else {
                match rx.recv_timeout(deadline - now) {
                    Ok(c) => c,
                    Err(mpsc::RecvTimeoutError::Timeout) => break,
                    Err(mpsc::RecvTimeoutError::Disconnected) => {
                        std::thread::sleep(deadline.saturating_duration_since(Instant::now()));
                        break;
                    }
                }
            };
            if let Flow::Stop = lp.handle(cmd) {
                state = SessionState::Stopped;
                break 'ticks;
            }
        }
        let ev = match src.next(t) {
            Ok(Some(ev)) => ev,
            Ok(None) => break,
            Err(e) => {
                error = Some(format!("audio source failed at second {t}: {e}"));
                abort = Some(AbortKind::Source);
                state = SessionState::Aborted;
                break;
            }
        };
        let report = match lp.p.engine.tick(&ev) {
            Ok(r) => r,
            Err(e) => {
                error = Some(format!("engine failed at second {t}: {e}"));
                abort = Some(AbortKind::Engine);
                state = SessionState::Aborted;
                break;
            }
        };
        src.feedback(t, report.record.is_intervention());
        if let Some(batch) = batches.push(t, &report.record) {
            worker.submit(batch);
        }
        let event = report.event();
        let policy = report.policy_events();
        if let Some(last) = policy.last() {
            lp.last_action = Some(last.clone());
        }
        lp.last_t = Some(t);
        lp.last_speech = report.record.speech();
        lp.publish_status(SessionState::Running);
        let _ = lp.shared.events.send(ServerEvent::Tick(event));
        for pe in policy {
            let _ = lp.shared.events.send(ServerEvent::Policy(pe));
        }
    }

    // Refuse anything that raced with the end of the session.
    lp.shared.commands.lock().expect("commands lock").take();
    for cmd in rx.try_iter() {
        let err = CommandError::not_running;
        match cmd {
            Command::Nudge(_, r) => drop(r.send(Err(err()))),
            Command::SetMode(_, r) => drop(r.send(Err(err()))),
            Command::Note(_, _, r) => drop(r.send(Err(err()))),
            Command::Stop(r) => drop(r.send(Ok(()))),
        }
    }

    if let Some(batch) = batches.finish() {
        worker.submit(batch);
    }
    let drained = worker.drain(Duration::from_millis(tel.drain_timeout_ms));
    if drained.pending > 0 {
        log::warn!("telemetry: {} batch(es) not delivered; the local log is complete", drained.pending);
    }

    let mut log_path = None;
    if !lp.p.engine.log().is_empty() {
        match lp.p.engine.log().write_to_dir(&output_dir) {
            Ok(path) => log_path = Some(path),
            Err(e) => {
                error = Some(match error {
                    Some(prev) => format!("{prev}; also failed to write log: {e}"),
                    None => format!("failed to write log: {e}"),
                });
                abort = abort.or(Some(AbortKind::Io));
                if state != SessionState::Stopped {
                    state = SessionState::Aborted;
                }
            }
        }
    }

    let mut status = lp.p.status(state);
    status.t = lp.last_t;
    status.speech = lp.last_speech;
    status.last_action = lp.last_action.clone();
    status.telemetry = drained.status;
    status.log_path = log_path.clone();
    status.error = error.clone();
    *lp.shared.status.write().expect("status lock") = status.clone();
    let _ = lp.shared.events.send(ServerEvent::End(EndEvent {
        state,
        ticks: lp.p.engine.next_t(),
        telemetry: drained.status,
        log_path,
        error,
    }));
    SessionOutcome {
        status,
        log: lp.p.engine.log().clone(),
        abort,
    }
}
