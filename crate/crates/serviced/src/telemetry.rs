//! Batch upload to the telemetry endpoint, plus a mock endpoint for tests
//! and local runs.
//!
//! Wire contract: `POST {url}/v1/sessions/{id}/records` with a JSON array of
//! records, `Authorization: Bearer <token>` when a token is configured, and an
//! `Idempotency-Key` header naming the batch. 2xx acknowledges; 409 means the
//! server already holds that key and also counts as delivered.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU8, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use lull_core::sessionlog::{
    Ack, RecordBatch, RetryPolicy, TelemetryStatus, TelemetryTransport, TransportError, Uploader, WireRecord,
};

pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

pub fn records_url(base: &str, session_id: &str) -> String {
    format!("{}/v1/sessions/{}/records", base.trim_end_matches('/'), session_id)
}

/// Blocking HTTP transport. Must not be driven from inside an async runtime.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    base: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(base: impl Into<String>, token: Option<String>) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(10))
            .connect_timeout(Duration::from_secs(3))
            .build()
            .map_err(|e| TransportError::Unreachable(e.to_string()))?;
        Ok(Self {
            client,
            base: base.into(),
            token,
        })
    }
}

impl TelemetryTransport for HttpTransport {
    fn send(&mut self, batch: &RecordBatch) -> Result<Ack, TransportError> {
        let key = batch.idempotency_key();
        let mut req = self
            .client
            .post(records_url(&self.base, &batch.session_id))
            .header(IDEMPOTENCY_HEADER, &key)
            .json(&batch.records);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| TransportError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            return Ok(Ack { key, duplicate: false });
        }
        if status == reqwest::StatusCode::CONFLICT {
            return Ok(Ack { key, duplicate: true });
        }
        Err(TransportError::Rejected {
            status: status.as_u16(),
            body: resp.text().unwrap_or_default(),
        })
    }
}

fn encode(s: TelemetryStatus) -> u8 {
    match s {
        TelemetryStatus::Disabled => 0,
        TelemetryStatus::Ok => 1,
        TelemetryStatus::Degraded => 2,
    }
}

fn decode(v: u8) -> TelemetryStatus {
    match v {
        0 => TelemetryStatus::Disabled,
        1 => TelemetryStatus::Ok,
        _ => TelemetryStatus::Degraded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DrainReport {
    pub status: TelemetryStatus,
    /// Batches still undelivered when the worker stopped (or when the drain
    /// timed out).
    pub pending: usize,
    pub timed_out: bool,
}

/// Background consumer of record batches. The tick loop only ever does a
/// channel send; delivery, retries and back-off happen on this thread.
pub struct TelemetryWorker {
    tx: Option<mpsc::Sender<RecordBatch>>,
    status: Arc<AtomicU8>,
    pending: Arc<AtomicUsize>,
    done: mpsc::Receiver<()>,
    handle: Option<JoinHandle<()>>,
}

impl TelemetryWorker {
    pub fn disabled() -> Self {
        let (done_tx, done) = mpsc::channel();
        drop(done_tx);
        Self {
            tx: None,
            status: Arc::new(AtomicU8::new(encode(TelemetryStatus::Disabled))),
            pending: Arc::new(AtomicUsize::new(0)),
            done,
            handle: None,
        }
    }

    pub fn http(base: String, token: Option<String>, retry: RetryPolicy) -> Self {
        Self::spawn(move || HttpTransport::new(base, token), retry)
    }

    /// `make` runs on the worker thread, so transports that own a runtime
    /// are built outside the caller's context.
    pub fn spawn<T, F>(make: F, retry: RetryPolicy) -> Self
    where
        T: TelemetryTransport + 'static,
        F: FnOnce() -> Result<T, TransportError> + Send + 'static,
    {
        let (tx, rx) = mpsc::channel::<RecordBatch>();
        let (done_tx, done) = mpsc::channel();
        let status = Arc::new(AtomicU8::new(encode(TelemetryStatus::Ok)));
        let pending = Arc::new(AtomicUsize::new(0));
        let (st, pd) = (status.clone(), pending.clone());
        let handle = std::thread::Builder::new()
            .name("telemetry".into())
            .spawn(move || {
                let transport = match make() {
                    Ok(t) => t,
                    Err(e) => {
                        log::warn!("telemetry disabled: {e}");
                        st.store(encode(TelemetryStatus::Degraded), Ordering::SeqCst);
                        let n = rx.iter().count();
                        pd.fetch_add(n, Ordering::SeqCst);
                        let _ = done_tx.send(());
                        return;
                    }
                };
                let mut up = Uploader::new(transport, retry);
                for batch in rx.iter() {
                    up.enqueue(batch);
                    // Pick up anything else already waiting before a slow flush.
                    while let Ok(more) = rx.try_recv() {
                        up.enqueue(more);
                    }
                    pd.store(up.pending(), Ordering::SeqCst);
                    let s = up.flush();
                    if s == TelemetryStatus::Degraded {
                        log::warn!("telemetry degraded, {} batch(es) queued", up.pending());
                    }
                    st.store(encode(s), Ordering::SeqCst);
                    pd.store(up.pending(), Ordering::SeqCst);
                }
                // One last attempt for batches left over from an outage.
                if up.pending() > 0 {
                    st.store(encode(up.flush()), Ordering::SeqCst);
                    pd.store(up.pending(), Ordering::SeqCst);
                }
                let _ = done_tx.send(());
            })
            .expect("spawn telemetry thread");
        Self {
            tx: Some(tx),
            status,
            pending,
            done,
            handle: Some(handle),
        }
    }

    pub fn status(&self) -> TelemetryStatus {
        decode(self.status.load(Ordering::SeqCst))
    }

    pub fn status_handle(&self) -> Arc<AtomicU8> {
        self.status.clone()
    }

    pub fn submit(&self, batch: RecordBatch) {
        if let Some(tx) = &self.tx {
            self.pending.fetch_add(1, Ordering::SeqCst);
            let _ = tx.send(batch);
        }
    }

    /// Closes the queue and waits up to `timeout` for delivery to finish.
    /// On timeout the worker is left to finish (or give up) on its own.
    pub fn drain(mut self, timeout: Duration) -> DrainReport {
        if self.tx.take().is_none() {
            return DrainReport {
                status: self.status(),
                pending: 0,
                timed_out: false,
            };
        }
        let timed_out = matches!(self.done.recv_timeout(timeout), Err(mpsc::RecvTimeoutError::Timeout));
        if timed_out {
            self.handle.take();
        } else if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        let pending = self.pending.load(Ordering::SeqCst);
        let mut status = self.status();
        if timed_out && status == TelemetryStatus::Ok {
            status = TelemetryStatus::Degraded;
            self.status.store(encode(status), Ordering::SeqCst);
        }
        DrainReport {
            status,
            pending,
            timed_out,
        }
    }
}

/// Decodes a status published through [`TelemetryWorker::status_handle`].
pub fn load_status(handle: &AtomicU8) -> TelemetryStatus {
    decode(handle.load(Ordering::SeqCst))
}

// ---------------------------------------------------------------------------
// Mock endpoint

#[derive(Debug, Default)]
pub struct MockTelemetry {
    pub token: Option<String>,
    /// Answer this many POSTs with 503 before accepting any.
    fail_first: AtomicUsize,
    posts: AtomicUsize,
    // session id -> idempotency key -> records
    store: Mutex<BTreeMap<String, BTreeMap<String, Vec<WireRecord>>>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MockAck {
    pub key: String,
    pub accepted: usize,
}

impl MockTelemetry {
    pub fn new(token: Option<String>, fail_first: usize) -> Arc<Self> {
        Arc::new(Self {
            token,
            fail_first: AtomicUsize::new(fail_first),
            ..Self::default()
        })
    }

    pub fn router(self: Arc<Self>) -> Router {
        Router::new()
            .route("/v1/sessions/{id}/records", post(mock_post).get(mock_get))
            .with_state(self)
    }

    /// Makes the next `n` POSTs fail with 503.
    pub fn fail_next(&self, n: usize) {
        self.fail_first.store(n, Ordering::SeqCst);
    }

    pub fn post_count(&self) -> usize {
        self.posts.load(Ordering::SeqCst)
    }

    /// All records received for a session, ordered by `t`, one per second
    /// even if a batch was delivered twice.
    pub fn records(&self, session_id: &str) -> Vec<WireRecord> {
        let store = self.store.lock().expect("mock store");
        let mut out: Vec<WireRecord> = store
            .get(session_id)
            .map(|m| m.values().flatten().cloned().collect())
            .unwrap_or_default();
        out.sort_by_key(|r| r.t);
        out
    }
}

type MockReply = (StatusCode, Json<serde_json::Value>);

fn mock_error(status: StatusCode, msg: &str) -> MockReply {
    (status, Json(serde_json::json!({ "error": msg })))
}

async fn mock_post(
    State(mock): State<Arc<MockTelemetry>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(records): Json<Vec<WireRecord>>,
) -> MockReply {
    mock.posts.fetch_add(1, Ordering::SeqCst);
    if let Some(token) = &mock.token {
        let expected = format!("Bearer {token}");
        if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some(expected.as_str()) {
            return mock_error(StatusCode::UNAUTHORIZED, "bad or missing bearer token");
        }
    }
    let failing = mock
        .fail_first
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if failing {
        return mock_error(StatusCode::SERVICE_UNAVAILABLE, "injected failure");
    }
    let Some(key) = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()) else {
        return mock_error(StatusCode::BAD_REQUEST, "missing Idempotency-Key");
    };
    let mut store = mock.store.lock().expect("mock store");
    let session = store.entry(id).or_default();
    if session.contains_key(key) {
        return mock_error(StatusCode::CONFLICT, "duplicate batch");
    }
    let accepted = records.len();
    session.insert(key.to_string(), records);
    (
        StatusCode::CREATED,
        Json(serde_json::json!(MockAck {
            key: key.to_string(),
            accepted
        })),
    )
}

async fn mock_get(State(mock): State<Arc<MockTelemetry>>, Path(id): Path<String>) -> Json<Vec<WireRecord>> {
    Json(mock.records(&id))
}
