//! Stateless virtual-session lifecycle over real directories: open derives a
//! copy-on-write overlay from an immutable golden image, close deletes every
//! trace of the session, and orphans left by crashed owners are reaped.
//!
//! No hypervisor is involved: the broker manages the storage contract (an
//! overlay delta directory plus a manifest naming the base image and its
//! digest). An optional exec hook can launch whatever emulator a deployment
//! wants; it is disabled by default.

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::audit::{AuditAction, AuditError, AuditLog, EventDraft};
use crate::fsutil::{pid_alive, sha256_file};
use crate::lock::FileLock;
use crate::record;

pub const DEFAULT_MEMORY_MB: u32 = 8192;
pub const DEFAULT_CPU_CORES: u32 = 2;

/// Requested shape of a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSpec {
    pub memory_mb: u32,
    pub cpu_cores: u32,
    pub golden_image: PathBuf,
    pub user: String,
}

impl SessionSpec {
    pub fn new(user: impl Into<String>, golden_image: impl Into<PathBuf>) -> Self {
        Self {
            memory_mb: DEFAULT_MEMORY_MB,
            cpu_cores: DEFAULT_CPU_CORES,
            golden_image: golden_image.into(),
            user: user.into(),
        }
    }

    pub fn memory_mb(mut self, mb: u32) -> Self {
        self.memory_mb = mb;
        self
    }

    pub fn cpu_cores(mut self, cores: u32) -> Self {
        self.cpu_cores = cores;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Open,
    Closed,
}

impl std::fmt::Display for SessionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SessionState::Open => "Open",
            SessionState::Closed => "Closed",
        })
    }
}

/// A live (or finished) session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionHandle {
    pub session_id: String,
    pub spec: SessionSpec,
    pub overlay_path: PathBuf,
    pub share_path: PathBuf,
    pub state: SessionState,
    pub opened_at: DateTime<Utc>,
    pub closed_at: Option<DateTime<Utc>>,
    /// Pid whose liveness decides orphanhood: the exec hook child if one was
    /// launched, otherwise the opening process.
    pub owner_pid: u32,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("user '{0}' already has an open session")]
    SessionAlreadyOpen(String),
    #[error("golden image missing: {0}")]
    MissingGoldenImage(PathBuf),
    #[error("session spec invalid: {0}")]
    BadSpec(String),
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("session record corrupt for '{session_id}': {reason}")]
    Corrupt { session_id: String, reason: String },
    #[error("io failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Audit(#[from] AuditError),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub struct SessionBroker {
    sessions_dir: PathBuf,
    locks_dir: PathBuf,
    homes_root: PathBuf,
    audit: Arc<AuditLog>,
    exec_hook: Option<String>,
}

impl SessionBroker {
    pub fn open(
        layout: &crate::domain::ZoneLayout,
        homes_root: impl Into<PathBuf>,
        audit: Arc<AuditLog>,
    ) -> Result<Self, SessionError> {
        let sessions_dir = layout.sessions_dir();
        fs::create_dir_all(&sessions_dir).map_err(io_at(&sessions_dir))?;
        let locks_dir = layout.locks_dir();
        fs::create_dir_all(&locks_dir).map_err(io_at(&locks_dir))?;
        let homes_root = homes_root.into();
        fs::create_dir_all(&homes_root).map_err(io_at(&homes_root))?;
        Ok(Self {
            sessions_dir,
            locks_dir,
            homes_root,
            audit,
            exec_hook: None,
        })
    }

    /// Command template run after the overlay is created, with `{overlay}`,
    /// `{memory_mb}`, and `{cores}` placeholders. Off by default.
    pub fn set_exec_hook(&mut self, template: Option<String>) {
        self.exec_hook = template;
    }

    pub fn sessions_dir(&self) -> &Path {
        &self.sessions_dir
    }

    fn session_dir(&self, session_id: &str) -> PathBuf {
        self.sessions_dir.join(session_id)
    }

    fn handle_path(&self, session_id: &str) -> PathBuf {
        self.session_dir(session_id).join("handle")
    }

    fn user_lock(&self, user: &str) -> Result<FileLock, SessionError> {
        let path = self.locks_dir.join(format!("session-{user}.lock"));
        FileLock::acquire(&path).map_err(io_at(&path))
    }

    /// Open a session: derive the copy-on-write overlay from the golden
    /// image, attach the user's home share, journal the handle, and emit
    /// SessionOpened. One open session per user.
    pub fn open_session(&self, spec: SessionSpec) -> Result<SessionHandle, SessionError> {
        if spec.memory_mb == 0 || spec.cpu_cores == 0 {
            return Err(SessionError::BadSpec(
                "memory_mb and cpu_cores must be positive".into(),
            ));
        }
        let _lock = self.user_lock(&spec.user)?;
        if !spec.golden_image.is_file() {
            return Err(SessionError::MissingGoldenImage(spec.golden_image.clone()));
        }
        if self
            .list_sessions()?
            .iter()
            .any(|h| h.spec.user == spec.user && h.state == SessionState::Open)
        {
            return Err(SessionError::SessionAlreadyOpen(spec.user.clone()));
        }

        let base_digest = sha256_file(&spec.golden_image).map_err(io_at(&spec.golden_image))?;
        let session_id = uuid::Uuid::new_v4().to_string();
        let sdir = self.session_dir(&session_id);
        let overlay_path = sdir.join("overlay");
        fs::create_dir_all(&overlay_path).map_err(io_at(&overlay_path))?;

        // The home share persists across sessions and is the only writable
        // surface that survives close.
        let share_path = self.homes_root.join(&spec.user);
        fs::create_dir_all(&share_path).map_err(io_at(&share_path))?;
        fs::set_permissions(&share_path, fs::Permissions::from_mode(0o700))
            .map_err(io_at(&share_path))?;

        let opened_at = Utc::now();
        let manifest = sdir.join("manifest");
        record::write_atomic(
            &manifest,
            &[
                (
                    "base_image".into(),
                    spec.golden_image.to_string_lossy().into_owned(),
                ),
                ("base_digest".into(), base_digest),
                ("session_id".into(), session_id.clone()),
                ("user".into(), spec.user.clone()),
                (
                    "opened_at".into(),
                    opened_at.to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
                ),
            ],
        )
        .map_err(io_at(&manifest))?;

        let mut owner_pid = std::process::id();
        if let Some(template) = &self.exec_hook {
            let argv: Vec<String> = template
                .split_whitespace()
                .map(|tok| {
                    tok.replace("{overlay}", &overlay_path.to_string_lossy())
                        .replace("{memory_mb}", &spec.memory_mb.to_string())
                        .replace("{cores}", &spec.cpu_cores.to_string())
                })
                .collect();
            if let Some(program) = argv.first() {
                let child = std::process::Command::new(program)
                    .args(&argv[1..])
                    .spawn()
                    .map_err(io_at(Path::new(program)))?;
                owner_pid = child.id();
            }
        }

        let handle = SessionHandle {
            session_id: session_id.clone(),
            spec,
            overlay_path,
            share_path,
            state: SessionState::Open,
            opened_at,
            closed_at: None,
            owner_pid,
        };
        self.store_handle(&handle)?;
        self.audit.append(
            EventDraft::new(&handle.spec.user, AuditAction::SessionOpened)
                .with("session_id", &session_id)
                .with("memory_mb", handle.spec.memory_mb.to_string())
                .with("cpu_cores", handle.spec.cpu_cores.to_string()),
        )?;
        Ok(handle)
    }

    /// Close: delete the overlay and every session artifact, emit
    /// SessionClosed. Closing a closed session is a no-op.
    pub fn close_session(&self, handle: &SessionHandle) -> Result<SessionHandle, SessionError> {
        self.close_with_reason(handle, "user")
    }

    fn close_with_reason(
        &self,
        handle: &SessionHandle,
        reason: &str,
    ) -> Result<SessionHandle, SessionError> {
        let _lock = self.user_lock(&handle.spec.user)?;
        let mut closed = handle.clone();
        if handle.state == SessionState::Closed && !self.session_dir(&handle.session_id).exists() {
            return Ok(closed);
        }
        let sdir = self.session_dir(&handle.session_id);
        if sdir.exists() {
            fs::remove_dir_all(&sdir).map_err(io_at(&sdir))?;
        }
        closed.state = SessionState::Closed;
        closed.closed_at = Some(Utc::now());
        self.audit.append(
            EventDraft::new(&handle.spec.user, AuditAction::SessionClosed)
                .with("session_id", &handle.session_id)
                .with("reason", reason),
        )?;
        Ok(closed)
    }

    /// Close every open session belonging to `user` (used when a project
    /// freeze pulls the rug out from under its members).
    pub fn close_all_for_user(
        &self,
        user: &str,
        reason: &str,
    ) -> Result<Vec<SessionHandle>, SessionError> {
        let mut closed = Vec::new();
        for handle in self.list_sessions()? {
            if handle.spec.user == user && handle.state == SessionState::Open {
                closed.push(self.close_with_reason(&handle, reason)?);
            }
        }
        Ok(closed)
    }

    /// Force-close journaled open sessions whose owning process is gone.
    /// Returns the number reaped.
    pub fn reap_orphans(&self) -> Result<u32, SessionError> {
        let mut reaped = 0;
        for handle in self.list_sessions()? {
            if handle.state == SessionState::Open && !pid_alive(handle.owner_pid) {
                self.close_with_reason(&handle, "orphan")?;
                reaped += 1;
            }
        }
        Ok(reaped)
    }

    pub fn load_session(&self, session_id: &str) -> Result<SessionHandle, SessionError> {
        let path = self.handle_path(session_id);
        if !path.is_file() {
            return Err(SessionError::UnknownSession(session_id.to_string()));
        }
        let pairs = record::read(&path).map_err(io_at(&path))?;
        parse_handle(session_id, &pairs)
    }

    /// Every journaled session, sorted by id. Closed sessions delete their
    /// journals, so in practice this lists open (or crashed) ones.
    pub fn list_sessions(&self) -> Result<Vec<SessionHandle>, SessionError> {
        let mut ids: Vec<String> = Vec::new();
        for entry in fs::read_dir(&self.sessions_dir).map_err(io_at(&self.sessions_dir))? {
            let entry = entry.map_err(io_at(&self.sessions_dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') && entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                ids.push(name);
            }
        }
        ids.sort();
        let mut out = Vec::new();
        for id in ids {
            out.push(self.load_session(&id)?);
        }
        Ok(out)
    }

    fn store_handle(&self, handle: &SessionHandle) -> Result<(), SessionError> {
        let path = self.handle_path(&handle.session_id);
        let pairs: Vec<(String, String)> = vec![
            ("session_id".into(), handle.session_id.clone()),
            ("user".into(), handle.spec.user.clone()),
            ("state".into(), handle.state.to_string()),
            (
                "overlay".into(),
                handle.overlay_path.to_string_lossy().into_owned(),
            ),
            (
                "share".into(),
                handle.share_path.to_string_lossy().into_owned(),
            ),
            (
                "golden_image".into(),
                handle.spec.golden_image.to_string_lossy().into_owned(),
            ),
            ("memory_mb".into(), handle.spec.memory_mb.to_string()),
            ("cpu_cores".into(), handle.spec.cpu_cores.to_string()),
            (
                "opened_at".into(),
                handle
                    .opened_at
                    .to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
            ),
            (
                "closed_at".into(),
                handle
                    .closed_at
                    .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Micros, true))
                    .unwrap_or_default(),
            ),
            ("pid".into(), handle.owner_pid.to_string()),
        ];
        record::write_atomic(&path, &pairs).map_err(io_at(&path))
    }
}

fn parse_handle(
    session_id: &str,
    pairs: &[(String, String)],
) -> Result<SessionHandle, SessionError> {
    let corrupt = |reason: &str| SessionError::Corrupt {
        session_id: session_id.to_string(),
        reason: reason.to_string(),
    };
    let need =
        |key: &str| record::get(pairs, key).ok_or_else(|| corrupt(&format!("missing {key}")));
    let state = match need("state")? {
        "Open" => SessionState::Open,
        "Closed" => SessionState::Closed,
        other => return Err(corrupt(&format!("bad state '{other}'"))),
    };
    let opened_at = DateTime::parse_from_rfc3339(need("opened_at")?)
        .map_err(|_| corrupt("bad opened_at"))?
        .with_timezone(&Utc);
    let closed_raw = need("closed_at")?;
    let closed_at = if closed_raw.is_empty() {
        None
    } else {
        Some(
            DateTime::parse_from_rfc3339(closed_raw)
                .map_err(|_| corrupt("bad closed_at"))?
                .with_timezone(&Utc),
        )
    };
    Ok(SessionHandle {
        session_id: session_id.to_string(),
        spec: SessionSpec {
            memory_mb: need("memory_mb")?.parse().map_err(|_| corrupt("bad memory_mb"))?,
            cpu_cores: need("cpu_cores")?.parse().map_err(|_| corrupt("bad cpu_cores"))?,
            golden_image: PathBuf::from(need("golden_image")?),
            user: need("user")?.to_string(),
        },
        overlay_path: PathBuf::from(need("overlay")?),
        share_path: PathBuf::from(need("share")?),
        state,
        opened_at,
        closed_at,
        owner_pid: need("pid")?.parse().map_err(|_| corrupt("bad pid"))?,
    })
}
