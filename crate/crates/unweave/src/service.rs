//! HTTP service behind the annotation tool.
//!
//! State lives in memory and in one append-only JSONL log. Every state change
//! is written and flushed to the log before it is applied, so replaying the
//! log on start-up rebuilds the ledger exactly.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::display::attach_display;
use crate::io::{ClipDisplay, StoryRecord};

/// One saved annotation or skip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub story_id: String,
    pub annotator: String,
    /// 0-based canonical labels; absent when skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<Vec<usize>>,
    #[serde(default)]
    pub skipped: bool,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

/// A line of the log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Served {
        story_id: String,
        annotator: String,
        timestamp_ms: u64,
    },
    Annotation(AnnotationRecord),
}

/// Body of `POST /api/annotations`. The partition may be given as labels or
/// as tracks of clip indices.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub story_id: String,
    pub annotator: String,
    #[serde(default)]
    pub assignment: Option<Vec<usize>>,
    #[serde(default)]
    pub threads: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipView {
    pub index: usize,
    pub xy: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_url: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryView {
    pub id: String,
    pub clips: Vec<ClipView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<AnnotationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub stories: usize,
    pub annotated: usize,
    pub assigned: usize,
}

/// Why a submitted partition is rejected.
pub fn check_assignment(labels: &[usize], clips: usize) -> Result<(), String> {
    if labels.len() != clips {
        return Err(format!("assignment has {} labels for {clips} clips", labels.len()));
    }
    let mut next = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l > next {
            return Err(format!(
                "clip {i} has thread {l} before thread {next} appears; threads must be numbered in order of their first clip"
            ));
        }
        if l == next {
            next += 1;
        }
    }
    Ok(())
}

/// Converts tracks of clip indices to labels, rejecting any track whose clips
/// are out of temporal order.
pub fn labels_from_threads(threads: &[Vec<usize>], clips: usize) -> Result<Vec<usize>, String> {
    let mut labels = vec![usize::MAX; clips];
    for (k, track) in threads.iter().enumerate() {
        if track.is_empty() {
            return Err(format!("thread {k} is empty"));
        }
        if track.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("thread {k} reorders clips; clips within a thread must keep stream order"));
        }
        for &c in track {
            if c >= clips {
                return Err(format!("clip index {c} out of range for {clips} clips"));
            }
            if labels[c] != usize::MAX {
                return Err(format!("clip {c} appears in more than one thread"));
            }
            labels[c] = k;
        }
    }
    if let Some(c) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(format!("clip {c} is in no thread"));
    }
    Ok(labels)
}

#[derive(Debug, Default)]
struct Ledger {
    /// Story → annotator currently holding it.
    assigned: HashMap<String, String>,
    /// Annotator → story they hold.
    holding: HashMap<String, String>,
    /// Annotators who skipped a story are not served it again.
    skipped_by: HashMap<String, HashSet<String>>,
    done: HashMap<String, AnnotationRecord>,
}

impl Ledger {
    fn apply(&mut self, e: &LogEntry) {
        match e {
            LogEntry::Served { story_id, annotator, .. } => {
                self.assigned.insert(story_id.clone(), annotator.clone());
                self.holding.insert(annotator.clone(), story_id.clone());
            }
            LogEntry::Annotation(r) => {
                if self.assigned.get(&r.story_id) == Some(&r.annotator) {
                    self.assigned.remove(&r.story_id);
                }
                if self.holding.get(&r.annotator) == Some(&r.story_id) {
                    self.holding.remove(&r.annotator);
                }
                if r.skipped {
                    self.skipped_by.entry(r.story_id.clone()).or_default().insert(r.annotator.clone());
                } else {
                    self.done.insert(r.story_id.clone(), r.clone());
                }
            }
        }
    }
}

struct Inner {
    ledger: Ledger,
    log: File,
    rng: ChaCha8Rng,
}

impl Inner {
    /// Writes, flushes, then applies.
    fn commit(&mut self, e: LogEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(&e).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.flush()?;
        self.log.sync_data()?;
        self.ledger.apply(&e);
        Ok(())
    }
}

pub struct AppState {
    stories: Vec<StoryRecord>,
    index: HashMap<String, usize>,
    inner: Mutex<Inner>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl AppState {
    /// Opens (or creates) `log_path` and replays it over the pool.
    pub fn open(mut stories: Vec<StoryRecord>, log_path: &Path, seed: u64) -> anyhow::Result<Self> {
        attach_display(&mut stories);
        let mut index = HashMap::new();
        for (i, s) in stories.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                bail!("duplicate story id {}", s.id);
            }
        }
        let mut ledger = Ledger::default();
        if log_path.exists() {
            let f = File::open(log_path).with_context(|| format!("opening {}", log_path.display()))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: LogEntry =
                    serde_json::from_str(&line).with_context(|| format!("{}:{}", log_path.display(), n + 1))?;
                let id = match &e {
                    LogEntry::Served { story_id, .. } => story_id,
                    LogEntry::Annotation(r) => &r.story_id,
                };
                if !index.contains_key(id) {
                    bail!("{}:{}: unknown story {id}", log_path.display(), n + 1);
                }
                ledger.apply(&e);
            }
        }
        if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .with_context(|| format!("opening {}", log_path.display()))?;
        Ok(Self {
            stories,
            index,
            inner: Mutex::new(Inner {
                ledger,
                log,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
        })
    }

    fn view(&self, i: usize, annotation: Option<AnnotationRecord>) -> StoryView {
        let s = &self.stories[i];
        let display = s.display.clone().unwrap_or_default();
        let clips = (0..s.clips.len())
            .map(|k| {
                let d = display.get(k).cloned().unwrap_or(ClipDisplay {
                    xy: [0.0, 0.0],
                    media_url: None,
                });
                ClipView {
                    index: k,
                    xy: d.xy,
                    media_url: d.media_url,
                }
            })
            .collect();
        StoryView {
            id: s.id.clone(),
            clips,
            annotation,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// The annotator's held story, else a random free one it has not skipped.
    pub fn next(&self, annotator: &str) -> Result<Option<StoryView>, ApiError> {
        let mut inner = self.lock();
        if let Some(id) = inner.ledger.holding.get(annotator) {
            return Ok(Some(self.view(self.index[id], None)));
        }
        let free: Vec<usize> = self
            .stories
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                let l = &inner.ledger;
                !l.done.contains_key(&s.id)
                    && !l.assigned.contains_key(&s.id)
                    && !l.skipped_by.get(&s.id).is_some_and(|a| a.contains(annotator))
            })
            .map(|(i, _)| i)
            .collect();
        if free.is_empty() {
            return Ok(None);
        }
        let i = free[inner.rng.random_range(0..free.len())];
        inner
            .commit(LogEntry::Served {
                story_id: self.stories[i].id.clone(),
                annotator: annotator.into(),
                timestamp_ms: now_ms(),
            })
            .map_err(ApiError::internal)?;
        Ok(Some(self.view(i, None)))
    }

    pub fn submit(&self, sub: Submission) -> Result<AnnotationRecord, ApiError> {
        let i = *self
            .index
            .get(&sub.story_id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown story {}", sub.story_id)))?;
        if sub.annotator.trim().is_empty() {
            return Err(ApiError::unprocessable("annotator must be non-empty"));
        }
        let clips = self.stories[i].clips.len();
        let assignment = match (sub.skipped, sub.assignment, sub.threads) {
            (true, None, None) => None,
            (true, _, _) => return Err(ApiError::unprocessable("a skip carries no assignment")),
            (false, Some(_), Some(_)) => {
                return Err(ApiError::unprocessable("give either assignment or threads, not both"))
            }
            (false, None, None) => return Err(ApiError::unprocessable("missing assignment")),
            (false, Some(labels), None) => {
                check_assignment(&labels, clips).map_err(ApiError::unprocessable)?;
                Some(labels)
            }
            (false, None, Some(threads)) => {
                let labels = labels_from_threads(&threads, clips).map_err(ApiError::unprocessable)?;
                check_assignment(&labels, clips).map_err(ApiError::unprocessable)?;
                Some(labels)
            }
        };
        let mut inner = self.lock();
        if inner.ledger.done.contains_key(&sub.story_id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("story {} is already annotated", sub.story_id),
            ));
        }
        if let Some(holder) = inner.ledger.assigned.get(&sub.story_id) {
            if holder != &sub.annotator {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("story {} is assigned to another annotator", sub.story_id),
                ));
            }
        }
        let record = AnnotationRecord {
            story_id: sub.story_id,
            annotator: sub.annotator,
            assignment,
            skipped: sub.skipped,
            timestamp_ms: now_ms(),
        };
        inner
            .commit(LogEntry::Annotation(record.clone()))
            .map_err(ApiError::internal)?;
        Ok(record)
    }

    pub fn story(&self, id: &str) -> Result<StoryView, ApiError> {
        let i = *self
            .index
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown story {id}")))?;
        let annotation = self.lock().ledger.done.get(id).cloned();
        Ok(self.view(i, annotation))
    }

    pub fn health(&self) -> Health {
        let inner = self.lock();
        Health {
            status: "ok".into(),
            stories: self.stories.len(),
            annotated: inner.ledger.done.len(),
            assigned: inner.ledger.assigned.len(),
        }
    }

    /// Completed annotations keyed by story id.
    pub fn annotations(&self) -> HashMap<String, AnnotationRecord> {
        self.lock().ledger.done.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub reason: String,
}

impl ApiError {
    pub fn new(status: StatusCode, reason: impl Into<String>) -> Self {
        Self {
            status,
            reason: reason.into(),
        }
    }

    fn unprocessable(reason: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, reason)
    }

    fn internal(e: std::io::Error) -> Self {
        log::error!("annotation log write failed: {e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "could not persist the change")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.reason }))).into_response()
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next_handler(State(st): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    if q.annotator.trim().is_empty() {
        return Err(ApiError::unprocessable("annotator must be non-empty"));
    }
    Ok(match st.next(&q.annotator)? {
        Some(v) => Json(v).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn annotate_handler(
    State(st): State<Arc<AppState>>,
    body: axum::body::Bytes,
) -> Result<(StatusCode, Json<AnnotationRecord>), ApiError> {
    let sub: Submission = serde_json::from_slice(&body)
        .map_err(|e| ApiError::unprocessable(format!("malformed submission: {e}")))?;
    Ok((StatusCode::CREATED, Json(st.submit(sub)?)))
}

async fn story_handler(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<StoryView>, ApiError> {
    Ok(Json(st.story(&id)?))
}

async fn health_handler(State(st): State<Arc<AppState>>) -> Json<Health> {
    Json(st.health())
}

/// API routes, plus static files from `static_dir` for everything else.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/next", get(next_handler))
        .route("/api/annotations", post(annotate_handler))
        .route("/api/stories/{id}", get(story_handler))
        .route("/healthz", get(health_handler))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds and serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
