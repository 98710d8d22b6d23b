//! Session service behind the HTTP API and the CLI.
//!
//! The transport lives in the CLI crate; this module owns sessions, payload
//! validation and the mapping from errors to HTTP status codes.

mod session;
pub mod wire;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

pub use session::{replay, Session};
use wire::*;

use crate::error::Error;
use crate::model::Model;
use crate::synth::{generate_case, SynthSpec};
use crate::vgrid::decode;

/// Idle time after which a session is exported (if configured) and dropped.
pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

/// An error with the HTTP status and machine-readable code it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn not_found(what: impl Into<String>) -> Self {
        Self { status: 404, code: "not_found", message: what.into() }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.status, self.code, self.message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::Protocol(_) => (409, "protocol"),
            Error::Format(_) | Error::Truncated { .. } | Error::PayloadMismatch { .. } | Error::Json(_) => {
                (400, "format")
            }
            Error::OutOfGrid { .. } => (400, "out_of_grid"),
            Error::ShapeMismatch { .. }
            | Error::InvalidArgument(_)
            | Error::EmptyForeground(_)
            | Error::Degenerate(_) => (400, "invalid"),
            Error::Checkpoint(_) => (404, "checkpoint"),
            Error::NonFiniteLoss { .. } | Error::Io(_) => (500, "internal"),
        };
        Self { status, code, message: e.to_string() }
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

/// Checkpoints by id, shared read-only by all sessions.
#[derive(Default)]
pub struct ModelRegistry {
    models: HashMap<String, Arc<Model>>,
    default: Option<String>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The first model inserted becomes the default.
    pub fn insert(&mut self, id: impl Into<String>, model: Model) {
        let id = id.into();
        self.default.get_or_insert_with(|| id.clone());
        self.models.insert(id, Arc::new(model));
    }

    /// Every `*.ckpt` in `dir`, keyed by file stem; `default` (if present) becomes the default.
    pub fn from_dir(dir: &Path, default: Option<&str>) -> crate::Result<Self> {
        let mut reg = Self::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        paths.sort();
        for p in paths {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            reg.insert(id, Model::load(&p)?);
        }
        if let Some(d) = default {
            if !reg.models.contains_key(d) {
                return Err(Error::Checkpoint(format!("default checkpoint {d} not found in {}", dir.display())));
            }
            reg.default = Some(d.to_string());
        }
        Ok(reg)
    }

    pub fn get(&self, id: Option<&str>) -> ApiResult<(String, Arc<Model>)> {
        let id = id
            .map(str::to_string)
            .or_else(|| self.default.clone())
            .ok_or_else(|| ApiError { status: 404, code: "checkpoint", message: "no checkpoint loaded".into() })?;
        let m = self.models.get(&id).ok_or_else(|| ApiError {
            status: 404,
            code: "checkpoint",
            message: format!("unknown checkpoint {id:?}"),
        })?;
        Ok((id, Arc::clone(m)))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut v: Vec<_> = self.models.keys().cloned().collect();
        v.sort();
        v
    }
}

pub struct ManagerConfig {
    pub ttl: Duration,
    /// Evicted sessions are written here as `<id>.json` export bodies.
    pub export_dir: Option<PathBuf>,
    /// Generator seed of synthetic sessions that do not bring their own spec.
    pub seed: u64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self { ttl: DEFAULT_TTL, export_dir: None, seed: 0 }
    }
}

/// All live sessions. Each session has its own lock: one prompt submission at a
/// time per session, with reads taking the shared side.
pub struct SessionManager {
    registry: ModelRegistry,
    cfg: ManagerConfig,
    sessions: Mutex<HashMap<String, Arc<RwLock<Session>>>>,
    next_id: AtomicU64,
}

impl SessionManager {
    pub fn new(registry: ModelRegistry, cfg: ManagerConfig) -> Self {
        Self { registry, cfg, sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1) }
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }

    fn get(&self, id: &str) -> ApiResult<Arc<RwLock<Session>>> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id:?}")))
    }

    pub fn create(&self, req: CreateSessionRequest) -> ApiResult<CreateSessionResponse> {
        check_version(req.version)?;
        let (ckpt, model) = self.registry.get(req.checkpoint.as_deref())?;
        let (volume, label, source) = match (&req.volume, &req.synthetic) {
            (Some(v), None) => {
                let volume = decode(&b64_decode(v)?)?.into_volume()?;
                let label = match &req.label {
                    Some(l) => Some(decode(&b64_decode(l)?)?.into_mask()?),
                    None => None,
                };
                (volume, label, None)
            }
            (None, Some(s)) => {
                let spec = s.spec.clone().unwrap_or_else(|| SynthSpec {
                    seed: self.cfg.seed,
                    ..SynthSpec::for_grid(model.config().patch_size)
                });
                let case = generate_case(&spec, s.case_seed)?;
                // The resolved spec is logged so replays do not depend on server settings.
                (case.image, Some(case.label), Some(SyntheticSource { spec: Some(spec), case_seed: s.case_seed }))
            }
            _ => {
                return Err(Error::Format("exactly one of `volume` or `synthetic` is required".into()).into());
            }
        };
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let id = format!("s{n:06}");
        let session = Session::create(id.clone(), ckpt.clone(), model, volume, label, source)?;
        let resp = CreateSessionResponse {
            version: WIRE_VERSION,
            id: id.clone(),
            shape: session.mask().shape().0,
            spacing: session.mask().spacing(),
            has_ground_truth: session.patch_label().is_some(),
            checkpoint: ckpt,
        };
        self.sessions.lock().expect("session table poisoned").insert(id, Arc::new(RwLock::new(session)));
        Ok(resp)
    }

    pub fn submit(&self, id: &str, req: &PromptRequest) -> ApiResult<PromptResponse> {
        let s = self.get(id)?;
        let mut guard = s.write().expect("session lock poisoned");
        Ok(guard.submit(req)?)
    }

    pub fn slice(&self, id: &str, axis: Axis, index: usize, layer: Layer) -> ApiResult<SliceResponse> {
        let s = self.get(id)?;
        let guard = s.read().expect("session lock poisoned");
        guard.slice(axis, index, layer).map_err(|e| match e {
            Error::OutOfGrid { .. } => ApiError::not_found(format!("slice {index} is out of range")),
            other => other.into(),
        })
    }

    pub fn state(&self, id: &str) -> ApiResult<StateResponse> {
        Ok(self.get(id)?.read().expect("session lock poisoned").state())
    }

    pub fn export(&self, id: &str) -> ApiResult<ExportResponse> {
        Ok(self.get(id)?.read().expect("session lock poisoned").export())
    }

    /// Drop sessions idle for longer than the TTL at `now`, exporting each first
    /// when an export directory is configured. Returns the evicted ids.
    pub fn evict_idle(&self, now: Instant) -> crate::Result<Vec<String>> {
        let mut table = self.sessions.lock().expect("session table poisoned");
        let stale: Vec<String> = table
            .iter()
            .filter(|(_, s)| {
                let last = s.read().expect("session lock poisoned").last_active;
                now.saturating_duration_since(last) >= self.cfg.ttl
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in &stale {
            if let Some(s) = table.remove(id) {
                if let Some(dir) = &self.cfg.export_dir {
                    std::fs::create_dir_all(dir)?;
                    let body = s.read().expect("session lock poisoned").export();
                    std::fs::write(dir.join(format!("{id}.json")), serde_json::to_vec_pretty(&body)?)?;
                }
            }
        }
        Ok(stale)
    }
}
