//! HTTP scoring client and an in-process mock server.
//!
//! The wire protocol is JSON over HTTP/1.1:
//!
//! ```text
//! POST /score  {"episode_id", "frame_ids", "question", "options", "request_id"}
//!           -> {"logits": [...], "request_id": "..."}
//! GET /healthz -> 200
//! ```
//!
//! Frame ids are sent in temporal order; the server is expected to resolve
//! them to pixels itself.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::synthenv::{oracle_logits, sorted_subset, Episode, OptionLogits, Oracle, OracleConfig};

/// Environment variable that overrides the configured endpoint.
pub const ENDPOINT_ENV: &str = "REFOCUS_SCORE_ENDPOINT";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("server answered HTTP {0}")]
    Status(u16),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ServiceError> },
}

impl ServiceError {
    /// Timeouts, connection failures, 429 and 5xx are worth retrying.
    pub fn is_retriable(&self) -> bool {
        match self {
            ServiceError::Timeout | ServiceError::Transport(_) => true,
            ServiceError::Status(code) => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

type SvcResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub episode_id: String,
    /// Strictly increasing frame indices.
    pub frame_ids: Vec<usize>,
    pub question: String,
    pub options: Vec<String>,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logits: Vec<f64>,
    pub request_id: String,
}

/// Hex SHA-256 of the episode id and the sorted frame ids.
pub fn request_id(episode_id: &str, sorted_frames: &[usize]) -> String {
    let mut h = Sha256::new();
    h.update((episode_id.len() as u64).to_le_bytes());
    h.update(episode_id.as_bytes());
    for &f in sorted_frames {
        h.update((f as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl ScoreRequest {
    /// Request for scoring `subset` (any order) of `episode`.
    pub fn new(episode: &Episode, subset: &[usize]) -> SvcResult<Self> {
        let frame_ids = sorted_subset(subset, episode.t).map_err(|e| ServiceError::InvalidRequest(e.to_string()))?;
        let req = Self {
            request_id: request_id(&episode.id, &frame_ids),
            episode_id: episode.id.clone(),
            frame_ids,
            question: format!("Which option does episode {} support?", episode.id),
            options: episode.options.clone(),
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> SvcResult<()> {
        if self.frame_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ServiceError::InvalidRequest("frame_ids must be strictly increasing".into()));
        }
        if self.options.len() < 2 {
            return Err(ServiceError::InvalidRequest("at least two options are required".into()));
        }
        Ok(())
    }
}

impl ScoreResponse {
    /// Check the response against the request it answers.
    pub fn validate(&self, req: &ScoreRequest) -> SvcResult<()> {
        if self.request_id != req.request_id {
            return Err(ServiceError::Protocol(format!(
                "request_id {} does not match {}",
                self.request_id, req.request_id
            )));
        }
        if self.logits.len() != req.options.len() {
            return Err(ServiceError::Protocol(format!(
                "{} logits for {} options",
                self.logits.len(),
                req.options.len()
            )));
        }
        if self.logits.iter().any(|z| !z.is_finite()) {
            return Err(ServiceError::Protocol("non-finite logit".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    /// Per-request timeout.
    pub timeout_ms: u64,
    /// Maximum attempts per request, including the first.
    pub retries: u32,
    /// Delay before the second attempt; doubles on every further attempt.
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
    /// Concurrent requests allowed from one client.
    pub max_inflight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080".into(),
            timeout_ms: 10_000,
            retries: 3,
            backoff_ms: 50,
            max_backoff_ms: 2_000,
            max_inflight: 8,
        }
    }
}

impl ClientConfig {
    /// This config with the endpoint replaced by `override_endpoint` when set.
    pub fn with_override(mut self, override_endpoint: Option<String>) -> Self {
        if let Some(e) = override_endpoint.filter(|e| !e.trim().is_empty()) {
            self.endpoint = e;
        }
        self
    }

    /// Apply the [`ENDPOINT_ENV`] override from the process environment.
    pub fn from_env(self) -> Self {
        self.with_override(std::env::var(ENDPOINT_ENV).ok())
    }

    pub fn validate(&self) -> SvcResult<()> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(ServiceError::InvalidRequest(format!("endpoint {:?} is not an http URL", self.endpoint)));
        }
        if self.retries == 0 || self.max_inflight == 0 || self.timeout_ms == 0 {
            return Err(ServiceError::InvalidRequest(
                "retries, max_inflight and timeout_ms must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn backoff(&self, failed_attempts: u32) -> Duration {
        let factor = 1u64 << (failed_attempts - 1).min(20);
        Duration::from_millis(self.backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

/// Counting semaphore.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

/// A successful call and the attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutcome {
    pub response: ScoreResponse,
    pub attempts: u32,
}

/// Blocking client, shareable across threads.
pub struct ScoreClient {
    cfg: ClientConfig,
    agent: ureq::Agent,
    gate: Gate,
}

impl std::fmt::Debug for ScoreClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreClient").field("cfg", &self.cfg).finish()
    }
}

fn map_transport(e: ureq::Error) -> ServiceError {
    match e {
        ureq::Error::Timeout(_) => ServiceError::Timeout,
        ureq::Error::StatusCode(code) => ServiceError::Status(code),
        ureq::Error::Io(e) if matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            ServiceError::Timeout
        }
        e @ (ureq::Error::Io(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound
        | ureq::Error::BodyStalled) => ServiceError::Transport(e.to_string()),
        other => ServiceError::Protocol(other.to_string()),
    }
}

impl ScoreClient {
    pub fn new(cfg: ClientConfig) -> SvcResult<Self> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .max_idle_connections_per_host(cfg.max_inflight)
            .build()
            .new_agent();
        Ok(Self {
            gate: Gate::new(cfg.max_inflight),
            cfg,
            agent,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.cfg.endpoint.trim_end_matches('/'))
    }

    /// `GET /healthz`.
    pub fn health(&self) -> SvcResult<()> {
        let resp = self.agent.get(self.url("/healthz")).call().map_err(map_transport)?;
        match resp.status().as_u16() {
            200 => Ok(()),
            code => Err(ServiceError::Status(code)),
        }
    }

    fn attempt(&self, req: &ScoreRequest) -> SvcResult<ScoreResponse> {
        let _permit = self.gate.acquire();
        let mut resp = self
            .agent
            .post(self.url("/score"))
            .send_json(req)
            .map_err(map_transport)?;
        let code = resp.status().as_u16();
        if code != 200 {
            return Err(ServiceError::Status(code));
        }
        let parsed: ScoreResponse = resp.body_mut().read_json().map_err(|e| match map_transport(e) {
            ServiceError::Protocol(m) => ServiceError::Protocol(format!("bad response body: {m}")),
            other => other,
        })?;
        parsed.validate(req)?;
        Ok(parsed)
    }

    /// Score one request, retrying transient failures with exponential
    /// backoff up to `retries` attempts.
    pub fn score(&self, req: &ScoreRequest) -> SvcResult<ScoreOutcome> {
        req.validate()?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(req) {
                Ok(response) => {
                    if attempts > 1 {
                        log::info!("request {} succeeded after {attempts} attempts", req.request_id);
                    }
                    return Ok(ScoreOutcome { response, attempts });
                }
                Err(e) if e.is_retriable() && attempts < self.cfg.retries => {
                    log::warn!("request {} attempt {attempts} failed: {e}", req.request_id);
                    std::thread::sleep(self.cfg.backoff(attempts));
                }
                Err(e) if e.is_retriable() => {
                    return Err(ServiceError::Exhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// One-shot call with a throwaway client.
pub fn score_remote(endpoint: &str, req: &ScoreRequest, timeout_ms: u64, retries: u32) -> SvcResult<ScoreResponse> {
    let client = ScoreClient::new(ClientConfig {
        endpoint: endpoint.into(),
        timeout_ms,
        retries,
        ..ClientConfig::default()
    })?;
    Ok(client.score(req)?.response)
}

/// An [`Oracle`] answered by a remote scoring service.
#[derive(Debug)]
pub struct RemoteOracle {
    client: ScoreClient,
}

impl RemoteOracle {
    pub fn new(cfg: ClientConfig) -> SvcResult<Self> {
        Ok(Self {
            client: ScoreClient::new(cfg)?,
        })
    }

    pub fn client(&self) -> &ScoreClient {
        &self.client
    }
}

impl Oracle for RemoteOracle {
    fn logits(&self, episode: &Episode, subset: &[usize]) -> crate::Result<OptionLogits> {
        let req = ScoreRequest::new(episode, subset)?;
        Ok(OptionLogits(self.client.score(&req)?.response.logits))
    }
}

/// How the mock answers `POST /score`.
#[derive(Debug, Clone)]
pub enum MockBehavior {
    /// The same logits for every request.
    Fixed(Vec<f64>),
    /// The synthetic oracle over a known set of episodes.
    Oracle {
        episodes: HashMap<String, Episode>,
        config: OracleConfig,
    },
}

#[derive(Debug, Clone)]
pub struct MockConfig {
    pub behavior: MockBehavior,
    /// The first this-many score requests fail with `fail_status`.
    pub fail_first: usize,
    pub fail_status: u16,
    /// Sleep before answering each score request.
    pub delay: Duration,
    /// Handler threads.
    pub threads: usize,
}

impl MockConfig {
    pub fn new(behavior: MockBehavior) -> Self {
        Self {
            behavior,
            fail_first: 0,
            fail_status: 503,
            delay: Duration::ZERO,
            threads: 8,
        }
    }
}

#[derive(Debug, Default)]
struct MockStats {
    requests: AtomicUsize,
    inflight: AtomicUsize,
    max_inflight: AtomicUsize,
}

/// In-process scoring server on an ephemeral local port.
pub struct MockServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    stats: Arc<MockStats>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

fn json_response(code: u16, body: String) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    tiny_http::Response::from_string(body)
        .with_status_code(code)
        .with_header(header)
}

fn answer(cfg: &MockConfig, body: &str) -> (u16, String) {
    let req: ScoreRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return (400, format!("{{\"error\":{:?}}}", e.to_string())),
    };
    let logits = match &cfg.behavior {
        MockBehavior::Fixed(z) => z.clone(),
        MockBehavior::Oracle { episodes, config } => {
            let Some(ep) = episodes.get(&req.episode_id) else {
                return (404, format!("{{\"error\":\"unknown episode {}\"}}", req.episode_id));
            };
            match oracle_logits(ep, &req.frame_ids, config) {
                Ok(z) => z.0,
                Err(e) => return (400, format!("{{\"error\":{:?}}}", e.to_string())),
            }
        }
    };
    let resp = ScoreResponse {
        logits,
        request_id: req.request_id,
    };
    (200, serde_json::to_string(&resp).expect("serialisable response"))
}

fn handle(cfg: &MockConfig, stats: &MockStats, mut req: tiny_http::Request) {
    let url = req.url().to_string();
    let method = req.method().clone();
    let (code, body) = match (method, url.as_str()) {
        (tiny_http::Method::Get, "/healthz") => (200, "{\"ok\":true}".to_string()),
        (tiny_http::Method::Post, "/score") => {
            let n = stats.requests.fetch_add(1, Ordering::SeqCst);
            let now = stats.inflight.fetch_add(1, Ordering::SeqCst) + 1;
            stats.max_inflight.fetch_max(now, Ordering::SeqCst);
            let mut body = String::new();
            let out = if req.as_reader().read_to_string(&mut body).is_err() {
                (400, "{\"error\":\"unreadable body\"}".to_string())
            } else {
                if !cfg.delay.is_zero() {
                    std::thread::sleep(cfg.delay);
                }
                if n < cfg.fail_first {
                    (cfg.fail_status, "{\"error\":\"injected failure\"}".to_string())
                } else {
                    answer(cfg, &body)
                }
            };
            stats.inflight.fetch_sub(1, Ordering::SeqCst);
            out
        }
        _ => (404, "{\"error\":\"not found\"}".to_string()),
    };
    let _ = req.respond(json_response(code, body));
}

impl MockServer {
    pub fn start(cfg: MockConfig) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("mock server has no IP address"))?;
        let server = Arc::new(server);
        let stats = Arc::new(MockStats::default());
        let stop = Arc::new(AtomicBool::new(false));
        let cfg = Arc::new(cfg);
        let workers = (0..cfg.threads.max(1))
            .map(|_| {
                let (server, stats, stop, cfg) = (server.clone(), stats.clone(), stop.clone(), cfg.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match server.recv_timeout(Duration::from_millis(20)) {
                            Ok(Some(req)) => handle(&cfg, &stats, req),
                            Ok(None) => {}
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(Self {
            addr,
            server,
            stats,
            stop,
            workers,
        })
    }

    /// Base URL for [`ClientConfig::endpoint`].
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Score requests received so far.
    pub fn requests(&self) -> usize {
        self.stats.requests.load(Ordering::SeqCst)
    }

    /// Highest number of score requests handled at once.
    pub fn max_concurrent(&self) -> usize {
        self.stats.max_inflight.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
