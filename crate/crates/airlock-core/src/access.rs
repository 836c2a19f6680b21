//! Project membership, effective-access decisions, single-approver egress
//! authorization, and the freeze/restore lifecycle.
//!
//! Projects persist as one record file each under `state_root/projects/`.
//! Freezing a project snapshots its membership and every (path, mode) pair
//! under its data root into a receipt, then locks the tree down to 700/600;
//! restore replays the receipt exactly. The receipt carries a phase marker
//! and is written before any file operation, so an interrupted freeze or
//! restore is completed at the next startup, never left half-applied.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::audit::{AuditAction, AuditError, AuditLog, EventDraft};
use crate::domain::{Membership, Principal, ProjectRecord, ProjectState, Role, ZoneLayout};
use crate::fault::{FaultPlan, FaultPoint};
use crate::lock::FileLock;
use crate::record;
use crate::session::SessionBroker;
use crate::transfer::{TransferDirection, TransferJob};

/// Directory mode applied to a frozen tree.
pub const FROZEN_DIR_MODE: u32 = 0o700;
/// File mode applied to a frozen tree.
pub const FROZEN_FILE_MODE: u32 = 0o600;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessDecision {
    pub allowed: bool,
    /// Machine-stable token; non-empty exactly when denied.
    pub reason: String,
}

impl AccessDecision {
    pub fn allow() -> Self {
        Self {
            allowed: true,
            reason: String::new(),
        }
    }

    pub fn deny(reason: &str) -> Self {
        Self {
            allowed: false,
            reason: reason.to_string(),
        }
    }
}

/// Lifecycle marker inside a persisted receipt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePhase {
    Freezing,
    Frozen,
    Restoring,
}

impl FreezePhase {
    fn as_str(&self) -> &'static str {
        match self {
            FreezePhase::Freezing => "freezing",
            FreezePhase::Frozen => "frozen",
            FreezePhase::Restoring => "restoring",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "freezing" => Some(FreezePhase::Freezing),
            "frozen" => Some(FreezePhase::Frozen),
            "restoring" => Some(FreezePhase::Restoring),
            _ => None,
        }
    }
}

/// Everything needed to restore a project to its pre-freeze state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeReceipt {
    pub project_id: String,
    pub frozen_at: DateTime<Utc>,
    pub phase: FreezePhase,
    pub prior_membership: BTreeMap<String, Membership>,
    /// (path relative to data_root, octal mode), sorted by path. Symlinks
    /// are not recorded; their modes are not meaningful on this platform.
    pub prior_modes: Vec<(String, u32)>,
}

#[derive(Debug, Error)]
pub enum AccessError {
    #[error("actor '{0}' is not authorized for this operation")]
    NotAuthorized(String),
    #[error("subject '{0}' is not attested as a US person")]
    NonUsPerson(String),
    #[error("project '{0}' is frozen; membership is immutable until restore")]
    FrozenProject(String),
    #[error("project '{0}' is already frozen")]
    AlreadyFrozen(String),
    #[error("project '{0}' is not frozen")]
    NotFrozen(String),
    #[error("receipt is for project '{receipt}', not '{requested}'")]
    ReceiptMismatch { receipt: String, requested: String },
    #[error("unknown project '{0}'")]
    UnknownProject(String),
    #[error("project '{0}' already exists")]
    ProjectExists(String),
    #[error("project store corrupt for '{project_id}': {reason}")]
    Corrupt { project_id: String, reason: String },
    #[error("io failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("injected crash at {0:?}")]
    Injected(FaultPoint),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> AccessError + '_ {
    move |source| AccessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-job egress grants, persisted so a cycle after a restart still honors
/// an approval. A grant expires with its job: the engine revokes it when the
/// job reaches a terminal state.
pub struct GrantStore {
    dir: PathBuf,
}

impl GrantStore {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn path_of(&self, job_id: &str) -> PathBuf {
        self.dir.join(job_id)
    }

    pub fn grant(&self, job_id: &str, actor: &str, now: DateTime<Utc>) -> io::Result<()> {
        record::write_atomic(
            &self.path_of(job_id),
            &[
                ("job_id".into(), job_id.to_string()),
                ("actor".into(), actor.to_string()),
                (
                    "granted_at".into(),
                    now.to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
                ),
            ],
        )
    }

    pub fn is_granted(&self, job_id: &str) -> bool {
        self.path_of(job_id).is_file()
    }

    pub fn granted_by(&self, job_id: &str) -> Option<String> {
        let pairs = record::read(&self.path_of(job_id)).ok()?;
        record::get(&pairs, "actor").map(str::to_string)
    }

    pub fn revoke(&self, job_id: &str) -> io::Result<()> {
        match fs::remove_file(self.path_of(job_id)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e),
        }
    }
}

/// Pure access decision over a project snapshot. `is_system_admin` reflects
/// the global role, which a single record cannot know by itself.
pub fn decide_access(
    project: &ProjectRecord,
    subject: &str,
    is_system_admin: bool,
) -> AccessDecision {
    if is_system_admin || project.has_role(subject, Role::SystemAdmin) {
        return AccessDecision::allow();
    }
    match project.access_state {
        ProjectState::Frozen => AccessDecision::deny("frozen"),
        ProjectState::Active => {
            if project.is_member(subject) {
                AccessDecision::allow()
            } else {
                AccessDecision::deny("not-a-member")
            }
        }
    }
}

/// The membership and freeze/restore store, writing through the audit log.
pub struct AccessControl {
    layout: ZoneLayout,
    audit: std::sync::Arc<AuditLog>,
    grants: GrantStore,
    mutate: Mutex<()>,
    /// Kill-point injection for crash-safety tests; unarmed in production.
    pub fault: Mutex<FaultPlan>,
}

impl AccessControl {
    pub fn open(layout: ZoneLayout, audit: std::sync::Arc<AuditLog>) -> Result<Self, AccessError> {
        let projects = layout.projects_dir();
        fs::create_dir_all(&projects).map_err(io_at(&projects))?;
        let receipts = layout.receipts_dir();
        fs::create_dir_all(&receipts).map_err(io_at(&receipts))?;
        let locks = layout.locks_dir();
        fs::create_dir_all(&locks).map_err(io_at(&locks))?;
        let grants = GrantStore::open(layout.grants_dir()).map_err(io_at(&layout.grants_dir()))?;
        Ok(Self {
            layout,
            audit,
            grants,
            mutate: Mutex::new(()),
            fault: Mutex::new(FaultPlan::none()),
        })
    }

    pub fn grants(&self) -> &GrantStore {
        &self.grants
    }

    fn trip(&self, point: FaultPoint) -> Result<(), AccessError> {
        if self.fault.lock().expect("fault plan poisoned").trip(point) {
            Err(AccessError::Injected(point))
        } else {
            Ok(())
        }
    }

    fn project_path(&self, project_id: &str) -> PathBuf {
        self.layout.projects_dir().join(project_id)
    }

    fn receipt_path(&self, project_id: &str) -> PathBuf {
        self.layout.receipts_dir().join(project_id)
    }

    fn project_lock(&self, project_id: &str) -> Result<FileLock, AccessError> {
        let path = self.layout.locks_dir().join(format!("project-{project_id}.lock"));
        FileLock::acquire(&path).map_err(io_at(&path))
    }

    pub fn load_project(&self, project_id: &str) -> Result<ProjectRecord, AccessError> {
        let path = self.project_path(project_id);
        if !path.is_file() {
            return Err(AccessError::UnknownProject(project_id.to_string()));
        }
        let pairs = record::read(&path).map_err(io_at(&path))?;
        parse_project(project_id, &pairs)
    }

    pub fn list_projects(&self) -> Result<Vec<ProjectRecord>, AccessError> {
        let dir = self.layout.projects_dir();
        let mut ids: Vec<String> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_at(&dir))? {
            let entry = entry.map_err(io_at(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') && entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
                ids.push(name);
            }
        }
        ids.sort();
        ids.iter().map(|id| self.load_project(id)).collect()
    }

    fn save_project(&self, project: &ProjectRecord) -> Result<(), AccessError> {
        let path = self.project_path(&project.project_id);
        record::write_atomic(&path, &render_project(project)).map_err(io_at(&path))
    }

    /// Global role check: SystemAdmin held on any project applies everywhere.
    pub fn is_system_admin(&self, principal: &str) -> Result<bool, AccessError> {
        Ok(self
            .list_projects()?
            .iter()
            .any(|p| p.has_role(principal, Role::SystemAdmin)))
    }

    /// Create a project and seat its first EcoAdmin. Creation is the
    /// bootstrap step: the creating actor is attested as a US person by the
    /// act itself and recorded in the audit trail.
    pub fn create_project(
        &self,
        actor: &str,
        project_id: &str,
        name: &str,
        data_root: &Path,
    ) -> Result<ProjectRecord, AccessError> {
        let _guard = self.mutate.lock().expect("mutate lock poisoned");
        let _flock = self.project_lock(project_id)?;
        if self.project_path(project_id).exists() {
            return Err(AccessError::ProjectExists(project_id.to_string()));
        }
        fs::create_dir_all(data_root).map_err(io_at(data_root))?;
        let mut members = BTreeMap::new();
        members.insert(
            actor.to_string(),
            Membership {
                roles: [Role::EcoAdmin].into_iter().collect(),
                us_person: true,
                display_name: actor.to_string(),
            },
        );
        let project = ProjectRecord {
            project_id: project_id.to_string(),
            name: name.to_string(),
            members,
            access_state: ProjectState::Active,
            data_root: data_root.to_path_buf(),
        };
        self.audit.append(
            EventDraft::new(actor, AuditAction::MembershipChanged)
                .project(project_id)
                .with("subject", actor)
                .with("roles", Role::EcoAdmin.to_string())
                .with("bootstrap", "project-created"),
        )?;
        self.save_project(&project)?;
        Ok(project)
    }

    /// Change one member's role set; an empty set removes the member. Only
    /// an EcoAdmin of the project (or a global SystemAdmin) may do this, and
    /// only US persons may hold roles.
    pub fn set_membership(
        &self,
        actor: &str,
        project_id: &str,
        subject: &Principal,
        roles: std::collections::BTreeSet<Role>,
    ) -> Result<ProjectRecord, AccessError> {
        let _guard = self.mutate.lock().expect("mutate lock poisoned");
        let _flock = self.project_lock(project_id)?;
        let mut project = self.load_project(project_id)?;
        if project.access_state == ProjectState::Frozen {
            return Err(AccessError::FrozenProject(project_id.to_string()));
        }
        if !project.has_role(actor, Role::EcoAdmin) && !self.is_system_admin(actor)? {
            return Err(AccessError::NotAuthorized(actor.to_string()));
        }
        if !roles.is_empty() && !subject.us_person {
            return Err(AccessError::NonUsPerson(subject.id.clone()));
        }

        let roles_csv = roles
            .iter()
            .map(Role::to_string)
            .collect::<Vec<_>>()
            .join(",");
        if roles.is_empty() {
            project.members.remove(&subject.id);
        } else {
            project.members.insert(
                subject.id.clone(),
                Membership {
                    roles,
                    us_person: subject.us_person,
                    display_name: subject.display_name.clone(),
                },
            );
        }
        self.audit.append(
            EventDraft::new(actor, AuditAction::MembershipChanged)
                .project(project_id)
                .with("subject", &subject.id)
                .with("roles", if roles_csv.is_empty() { "removed" } else { &roles_csv }),
        )?;
        self.save_project(&project)?;
        Ok(project)
    }

    /// Pure decision, no events: members (any role) may access Active
    /// projects; only admins may access Frozen ones.
    pub fn effective_access(
        &self,
        project_id: &str,
        subject: &str,
    ) -> Result<AccessDecision, AccessError> {
        let project = self.load_project(project_id)?;
        let is_admin = self.is_system_admin(subject)?;
        Ok(decide_access(&project, subject, is_admin))
    }

    /// Single-approver egress authorization, audited before the decision is
    /// returned. An allow persists a grant keyed by the job id; the grant
    /// expires when the job reaches a terminal state.
    pub fn authorize_egress(
        &self,
        actor: &str,
        job: &TransferJob,
    ) -> Result<AccessDecision, AccessError> {
        let decision = if job.direction != TransferDirection::Egress {
            AccessDecision::deny("not-egress")
        } else {
            match self.load_project(&job.project_id) {
                Err(AccessError::UnknownProject(_)) => AccessDecision::deny("unknown-project"),
                Err(e) => return Err(e),
                Ok(project) => {
                    if !project.has_role(actor, Role::DataSteward) {
                        AccessDecision::deny("not-a-steward")
                    } else if project.access_state == ProjectState::Frozen {
                        AccessDecision::deny("frozen")
                    } else {
                        AccessDecision::allow()
                    }
                }
            }
        };

        let action = if decision.allowed {
            AuditAction::EgressAuthorized
        } else {
            AuditAction::EgressDenied
        };
        let mut draft = EventDraft::new(actor, action)
            .with("job_id", &job.job_id)
            .with("user", &job.user);
        if !job.project_id.is_empty() {
            draft = draft.project(job.project_id.clone());
        }
        if !decision.allowed {
            draft = draft.with("reason", &decision.reason);
        }
        self.audit.append(draft)?;

        if decision.allowed {
            self.grants
                .grant(&job.job_id, actor, Utc::now())
                .map_err(io_at(&self.layout.grants_dir()))?;
        }
        Ok(decision)
    }

    /// Freeze: snapshot membership and tree modes into a receipt, lock the
    /// tree to 700/600, mark the record Frozen, and capture the baseline the
    /// sentinel will watch for tampering. Open sessions belonging to project
    /// members are closed. Interrupted freezes are completed at startup.
    pub fn freeze_project(
        &self,
        actor: &str,
        project_id: &str,
        broker: Option<&SessionBroker>,
    ) -> Result<FreezeReceipt, AccessError> {
        let _guard = self.mutate.lock().expect("mutate lock poisoned");
        let _flock = self.project_lock(project_id)?;
        let project = self.load_project(project_id)?;
        if !project.has_role(actor, Role::EcoAdmin) && !self.is_system_admin(actor)? {
            return Err(AccessError::NotAuthorized(actor.to_string()));
        }
        if project.access_state == ProjectState::Frozen {
            return Err(AccessError::AlreadyFrozen(project_id.to_string()));
        }

        let prior_modes = snapshot_modes(&project.data_root)?;
        let receipt = FreezeReceipt {
            project_id: project_id.to_string(),
            frozen_at: Utc::now(),
            phase: FreezePhase::Freezing,
            prior_membership: project.members.clone(),
            prior_modes,
        };
        self.save_receipt(&receipt)?;
        self.trip(FaultPoint::AfterReceiptWritten)?;

        self.apply_frozen_modes(&project.data_root, &receipt.prior_modes)?;

        if let Some(broker) = broker {
            for member in project.members.keys() {
                broker
                    .close_all_for_user(member, "project-frozen")
                    .map_err(|e| AccessError::Io {
                        path: self.layout.sessions_dir(),
                        source: io::Error::other(e.to_string()),
                    })?;
            }
        }

        // Post-freeze reference snapshot the sentinel diffs against.
        let baseline = crate::sentinel::Baseline::capture(&project.data_root)
            .map_err(io_at(&project.data_root))?;
        baseline
            .save(&self.layout.baselines_dir(), project_id)
            .map_err(io_at(&self.layout.baselines_dir()))?;

        self.audit.append(
            EventDraft::new(actor, AuditAction::ProjectFrozen)
                .project(project_id)
                .with("data_root", project.data_root.to_string_lossy())
                .with("members", project.members.len().to_string()),
        )?;
        self.trip(FaultPoint::BeforeRecordFrozen)?;

        let mut frozen = project;
        frozen.access_state = ProjectState::Frozen;
        self.save_project(&frozen)?;

        let mut done = receipt;
        done.phase = FreezePhase::Frozen;
        self.save_receipt(&done)?;
        Ok(done)
    }

    /// Restore modes and membership exactly from the receipt and reactivate
    /// the project. Interrupted restores are completed at startup.
    pub fn restore_project(
        &self,
        actor: &str,
        project_id: &str,
        receipt: &FreezeReceipt,
    ) -> Result<ProjectRecord, AccessError> {
        let _guard = self.mutate.lock().expect("mutate lock poisoned");
        let _flock = self.project_lock(project_id)?;
        if receipt.project_id != project_id {
            return Err(AccessError::ReceiptMismatch {
                receipt: receipt.project_id.clone(),
                requested: project_id.to_string(),
            });
        }
        let project = self.load_project(project_id)?;
        if !project.has_role(actor, Role::EcoAdmin)
            && !receipt
                .prior_membership
                .get(actor)
                .map(|m| m.roles.contains(&Role::EcoAdmin))
                .unwrap_or(false)
            && !self.is_system_admin(actor)?
        {
            return Err(AccessError::NotAuthorized(actor.to_string()));
        }
        if project.access_state != ProjectState::Frozen {
            return Err(AccessError::NotFrozen(project_id.to_string()));
        }

        let mut marked = receipt.clone();
        marked.phase = FreezePhase::Restoring;
        self.save_receipt(&marked)?;
        self.trip(FaultPoint::AfterRestorePhase)?;

        self.complete_restore(actor, &marked)
    }

    fn complete_restore(
        &self,
        actor: &str,
        receipt: &FreezeReceipt,
    ) -> Result<ProjectRecord, AccessError> {
        let mut project = self.load_project(&receipt.project_id)?;
        restore_modes(&project.data_root, &receipt.prior_modes, self)?;

        project.members = receipt.prior_membership.clone();
        project.access_state = ProjectState::Active;

        self.audit.append(
            EventDraft::new(actor, AuditAction::ProjectRestored)
                .project(&receipt.project_id)
                .with("members", project.members.len().to_string()),
        )?;
        self.save_project(&project)?;
        self.trip(FaultPoint::BeforeReceiptRemoved)?;

        let rp = self.receipt_path(&receipt.project_id);
        match fs::remove_file(&rp) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_at(&rp)(e)),
        }
        Ok(project)
    }

    /// Drive interrupted freezes and restores to completion using their
    /// persisted receipts. Called at process start.
    pub fn recover(&self) -> Result<Vec<String>, AccessError> {
        let mut actions = Vec::new();
        let dir = self.layout.receipts_dir();
        let mut ids: Vec<String> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_at(&dir))? {
            let entry = entry.map_err(io_at(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') && entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
                ids.push(name);
            }
        }
        ids.sort();
        for project_id in ids {
            let receipt = self.load_receipt(&project_id)?;
            let project = self.load_project(&project_id)?;
            match (receipt.phase, project.access_state) {
                (FreezePhase::Frozen, _) => {}
                (FreezePhase::Freezing, _) => {
                    // Chmod walk is idempotent; finish it and commit.
                    self.apply_frozen_modes(&project.data_root, &receipt.prior_modes)?;
                    let baseline = crate::sentinel::Baseline::capture(&project.data_root)
                        .map_err(io_at(&project.data_root))?;
                    baseline
                        .save(&self.layout.baselines_dir(), &project_id)
                        .map_err(io_at(&self.layout.baselines_dir()))?;
                    self.audit.append(
                        EventDraft::system(AuditAction::ProjectFrozen)
                            .project(&project_id)
                            .with("recovered", "true"),
                    )?;
                    let mut frozen = project;
                    frozen.access_state = ProjectState::Frozen;
                    self.save_project(&frozen)?;
                    let mut done = receipt;
                    done.phase = FreezePhase::Frozen;
                    self.save_receipt(&done)?;
                    actions.push(format!("completed freeze of {project_id}"));
                }
                (FreezePhase::Restoring, ProjectState::Frozen) => {
                    self.complete_restore("system", &receipt)?;
                    actions.push(format!("completed restore of {project_id}"));
                }
                (FreezePhase::Restoring, ProjectState::Active) => {
                    let rp = self.receipt_path(&project_id);
                    fs::remove_file(&rp).map_err(io_at(&rp))?;
                    actions.push(format!("cleared restored receipt of {project_id}"));
                }
            }
        }
        Ok(actions)
    }

    fn apply_frozen_modes(
        &self,
        data_root: &Path,
        recorded: &[(String, u32)],
    ) -> Result<(), AccessError> {
        let mut first = true;
        for (rel, _) in recorded {
            let path = if rel == "." {
                data_root.to_path_buf()
            } else {
                data_root.join(rel)
            };
            let meta = match path.symlink_metadata() {
                Ok(m) => m,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(io_at(&path)(e)),
            };
            if meta.file_type().is_symlink() {
                continue;
            }
            let mode = if meta.is_dir() {
                FROZEN_DIR_MODE
            } else {
                FROZEN_FILE_MODE
            };
            fs::set_permissions(&path, fs::Permissions::from_mode(mode)).map_err(io_at(&path))?;
            if first {
                first = false;
                self.trip(FaultPoint::MidFreezeChmod)?;
            }
        }
        Ok(())
    }

    fn save_receipt(&self, receipt: &FreezeReceipt) -> Result<(), AccessError> {
        let path = self.receipt_path(&receipt.project_id);
        let mut pairs: Vec<(String, String)> = vec![
            ("project_id".into(), receipt.project_id.clone()),
            (
                "frozen_at".into(),
                receipt
                    .frozen_at
                    .to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
            ),
            ("phase".into(), receipt.phase.as_str().to_string()),
        ];
        for (id, m) in &receipt.prior_membership {
            pairs.push(("member".into(), render_member(id, m)));
        }
        for (rel, mode) in &receipt.prior_modes {
            pairs.push(("mode".into(), format!("{:o}\t{}", mode, record::escape(rel))));
        }
        record::write_atomic(&path, &pairs).map_err(io_at(&path))
    }

    pub fn load_receipt(&self, project_id: &str) -> Result<FreezeReceipt, AccessError> {
        let path = self.receipt_path(project_id);
        if !path.is_file() {
            return Err(AccessError::NotFrozen(project_id.to_string()));
        }
        let pairs = record::read(&path).map_err(io_at(&path))?;
        let corrupt = |reason: &str| AccessError::Corrupt {
            project_id: project_id.to_string(),
            reason: reason.to_string(),
        };
        let id = record::get(&pairs, "project_id")
            .ok_or_else(|| corrupt("missing project_id"))?
            .to_string();
        let frozen_at = DateTime::parse_from_rfc3339(
            record::get(&pairs, "frozen_at").ok_or_else(|| corrupt("missing frozen_at"))?,
        )
        .map_err(|_| corrupt("bad frozen_at"))?
        .with_timezone(&Utc);
        let phase = FreezePhase::parse(
            record::get(&pairs, "phase").ok_or_else(|| corrupt("missing phase"))?,
        )
        .ok_or_else(|| corrupt("bad phase"))?;
        let mut prior_membership = BTreeMap::new();
        for value in record::get_all(&pairs, "member") {
            let (mid, m) = parse_member(value).ok_or_else(|| corrupt("bad member line"))?;
            prior_membership.insert(mid, m);
        }
        let mut prior_modes = Vec::new();
        for value in record::get_all(&pairs, "mode") {
            let (mode_raw, rel_raw) = value.split_once('\t').ok_or_else(|| corrupt("bad mode line"))?;
            let mode = u32::from_str_radix(mode_raw, 8).map_err(|_| corrupt("bad mode octal"))?;
            let rel = record::unescape(rel_raw).ok_or_else(|| corrupt("bad mode path"))?;
            prior_modes.push((rel, mode));
        }
        Ok(FreezeReceipt {
            project_id: id,
            frozen_at,
            phase,
            prior_membership,
            prior_modes,
        })
    }
}

/// Sorted (relative path, mode) snapshot of a tree; "." is the root itself.
fn snapshot_modes(data_root: &Path) -> Result<Vec<(String, u32)>, AccessError> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(data_root).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(|e| AccessError::Io {
            path: data_root.to_path_buf(),
            source: io::Error::other(e),
        })?;
        if entry.file_type().is_symlink() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(data_root)
            .expect("walk stays under data_root");
        let rel = if rel.as_os_str().is_empty() {
            ".".to_string()
        } else {
            rel.to_string_lossy().into_owned()
        };
        let mode = entry
            .metadata()
            .map_err(|e| AccessError::Io {
                path: entry.path().to_path_buf(),
                source: io::Error::other(e),
            })?
            .mode()
            & 0o7777;
        out.push((rel, mode));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Re-apply recorded modes deepest-first: parents are still traversable
/// (frozen to 700) while children are restored, and each directory receives
/// its final mode only after everything below it.
fn restore_modes(
    data_root: &Path,
    recorded: &[(String, u32)],
    ctl: &AccessControl,
) -> Result<(), AccessError> {
    let mut ordered: Vec<&(String, u32)> = recorded.iter().collect();
    ordered.sort_by_key(|(rel, _)| std::cmp::Reverse(Path::new(rel).components().count()));
    let mut first = true;
    for (rel, mode) in ordered {
        let path = if rel == "." {
            data_root.to_path_buf()
        } else {
            data_root.join(rel)
        };
        match path.symlink_metadata() {
            Ok(m) if m.file_type().is_symlink() => continue,
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
            Err(e) => return Err(io_at(&path)(e)),
        }
        fs::set_permissions(&path, fs::Permissions::from_mode(*mode)).map_err(io_at(&path))?;
        if first {
            first = false;
            ctl.trip(FaultPoint::MidRestoreChmod)?;
        }
    }
    Ok(())
}

fn render_member(id: &str, m: &Membership) -> String {
    let roles = m
        .roles
        .iter()
        .map(Role::to_string)
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{}\t{}\t{}\t{}",
        record::escape(id),
        roles,
        if m.us_person { 1 } else { 0 },
        record::escape(&m.display_name)
    )
}

fn parse_member(value: &str) -> Option<(String, Membership)> {
    let mut parts = value.splitn(4, '\t');
    let id = record::unescape(parts.next()?)?;
    let roles_csv = parts.next()?;
    let us = parts.next()?;
    let display = record::unescape(parts.next().unwrap_or(""))?;
    let mut roles = std::collections::BTreeSet::new();
    for r in roles_csv.split(',').filter(|s| !s.is_empty()) {
        roles.insert(r.parse::<Role>().ok()?);
    }
    let us_person = match us {
        "1" => true,
        "0" => false,
        _ => return None,
    };
    Some((
        id,
        Membership {
            roles,
            us_person,
            display_name: display,
        },
    ))
}

fn render_project(project: &ProjectRecord) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = vec![
        ("project_id".into(), project.project_id.clone()),
        ("name".into(), project.name.clone()),
        ("access_state".into(), project.access_state.to_string()),
        (
            "data_root".into(),
            project.data_root.to_string_lossy().into_owned(),
        ),
    ];
    for (id, m) in &project.members {
        pairs.push(("member".into(), render_member(id, m)));
    }
    pairs
}

fn parse_project(
    project_id: &str,
    pairs: &[(String, String)],
) -> Result<ProjectRecord, AccessError> {
    let corrupt = |reason: &str| AccessError::Corrupt {
        project_id: project_id.to_string(),
        reason: reason.to_string(),
    };
    let id = record::get(pairs, "project_id").ok_or_else(|| corrupt("missing project_id"))?;
    if id != project_id {
        return Err(corrupt("project_id mismatch with filename"));
    }
    let name = record::get(pairs, "name").ok_or_else(|| corrupt("missing name"))?;
    let access_state: ProjectState = record::get(pairs, "access_state")
        .ok_or_else(|| corrupt("missing access_state"))?
        .parse()
        .map_err(|e: String| corrupt(&e))?;
    let data_root = PathBuf::from(
        record::get(pairs, "data_root").ok_or_else(|| corrupt("missing data_root"))?,
    );
    let mut members = BTreeMap::new();
    for value in record::get_all(pairs, "member") {
        let (mid, m) = parse_member(value).ok_or_else(|| corrupt("bad member line"))?;
        members.insert(mid, m);
    }
    Ok(ProjectRecord {
        project_id: project_id.to_string(),
        name: name.to_string(),
        members,
        access_state,
        data_root,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::sync::Arc;

    struct Fx {
        _tmp: tempfile::TempDir,
        layout: ZoneLayout,
        audit: Arc<AuditLog>,
        ctl: AccessControl,
    }

    fn fx() -> Fx {
        let tmp = tempfile::tempdir().unwrap();
        let layout = ZoneLayout::new(
            tmp.path().join("sftp"),
            tmp.path().join("inside"),
            tmp.path().join("state"),
        );
        for root in [&layout.sftp_root, &layout.inside_root, &layout.state_root] {
            fs::create_dir_all(root).unwrap();
        }
        let audit = Arc::new(AuditLog::open(layout.audit_log_path()).unwrap());
        let ctl = AccessControl::open(layout.clone(), Arc::clone(&audit)).unwrap();
        Fx {
            _tmp: tmp,
            layout,
            audit,
            ctl,
        }
    }

    fn roles(rs: &[Role]) -> BTreeSet<Role> {
        rs.iter().copied().collect()
    }

    fn us(id: &str) -> Principal {
        Principal::new(id, id, true)
    }

    fn seed_project(f: &Fx, id: &str) -> ProjectRecord {
        let data_root = f.layout.inside_root.join("depot").join(id);
        f.ctl.create_project("eco", id, &format!("Project {id}"), &data_root).unwrap()
    }

    #[test]
    fn eco_admin_grants_membership() {
        let f = fx();
        seed_project(&f, "alpha");
        let p = f
            .ctl
            .set_membership("eco", "alpha", &us("alice"), roles(&[Role::Member]))
            .unwrap();
        assert!(p.is_member("alice"));
        let events = f
            .audit
            .query(&crate::audit::EventFilter {
                action: Some(AuditAction::MembershipChanged),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(events.len(), 2); // bootstrap + grant
        assert_eq!(events[1].actor, "eco");
    }

    #[test]
    fn plain_member_cannot_grant() {
        let f = fx();
        seed_project(&f, "alpha");
        f.ctl
            .set_membership("eco", "alpha", &us("alice"), roles(&[Role::Member]))
            .unwrap();
        match f.ctl.set_membership("alice", "alpha", &us("bob"), roles(&[Role::Member])) {
            Err(AccessError::NotAuthorized(a)) => assert_eq!(a, "alice"),
            other => panic!("expected NotAuthorized, got {other:?}"),
        }
    }

    #[test]
    fn non_us_person_cannot_hold_roles() {
        let f = fx();
        seed_project(&f, "alpha");
        let foreign = Principal::new("ove", "Ove", false);
        match f.ctl.set_membership("eco", "alpha", &foreign, roles(&[Role::Member])) {
            Err(AccessError::NonUsPerson(id)) => assert_eq!(id, "ove"),
            other => panic!("expected NonUsPerson, got {other:?}"),
        }
    }

    #[test]
    fn empty_roles_removes_member() {
        let f = fx();
        seed_project(&f, "alpha");
        f.ctl
            .set_membership("eco", "alpha", &us("alice"), roles(&[Role::Member]))
            .unwrap();
        let p = f
            .ctl
            .set_membership("eco", "alpha", &us("alice"), BTreeSet::new())
            .unwrap();
        assert!(!p.is_member("alice"));
    }

    #[test]
    fn access_decisions_cover_the_matrix() {
        let f = fx();
        seed_project(&f, "alpha");
        f.ctl
            .set_membership("eco", "alpha", &us("alice"), roles(&[Role::Member]))
            .unwrap();
        assert!(f.ctl.effective_access("alpha", "alice").unwrap().allowed);
        let denied = f.ctl.effective_access("alpha", "stranger").unwrap();
        assert!(!denied.allowed);
        assert_eq!(denied.reason, "not-a-member");

        f.ctl.freeze_project("eco", "alpha", None).unwrap();
        let frozen = f.ctl.effective_access("alpha", "alice").unwrap();
        assert!(!frozen.allowed);
        assert_eq!(frozen.reason, "frozen");
    }

    #[test]
    fn system_admin_is_global_and_passes_frozen() {
        let f = fx();
        seed_project(&f, "alpha");
        seed_project(&f, "beta");
        f.ctl
            .set_membership("eco", "beta", &us("root-admin"), roles(&[Role::SystemAdmin]))
            .unwrap();
        // Admin seated on beta, decision asked on alpha.
        assert!(f.ctl.effective_access("alpha", "root-admin").unwrap().allowed);
        f.ctl.freeze_project("eco", "alpha", None).unwrap();
        assert!(f.ctl.effective_access("alpha", "root-admin").unwrap().allowed);
    }

    fn egress_job(project: &str, user: &str) -> TransferJob {
        TransferJob {
            job_id: uuid::Uuid::new_v4().to_string(),
            user: user.into(),
            project_id: project.into(),
            direction: TransferDirection::Egress,
            payload: Vec::new(),
            state: crate::transfer::TransferState::Detected,
            created_at: Utc::now(),
            finished_at: None,
        }
    }

    #[test]
    fn steward_egress_allowed_and_logged_before_return() {
        let f = fx();
        seed_project(&f, "alpha");
        f.ctl
            .set_membership("eco", "alpha", &us("dana"), roles(&[Role::DataSteward]))
            .unwrap();
        let job = egress_job("alpha", "dana");
        let d = f.ctl.authorize_egress("dana", &job).unwrap();
        assert!(d.allowed);
        assert!(f.ctl.grants().is_granted(&job.job_id));
        let events = f
            .audit
            .query(&crate::audit::EventFilter {
                action: Some(AuditAction::EgressAuthorized),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].detail.get("job_id"), Some(&job.job_id));
    }

    #[test]
    fn member_egress_denied_and_logged() {
        let f = fx();
        seed_project(&f, "alpha");
        f.ctl
            .set_membership("eco", "alpha", &us("alice"), roles(&[Role::Member]))
            .unwrap();
        let job = egress_job("alpha", "alice");
        let d = f.ctl.authorize_egress("alice", &job).unwrap();
        assert!(!d.allowed);
        assert_eq!(d.reason, "not-a-steward");
        assert!(!f.ctl.grants().is_granted(&job.job_id));
        let denials = f
            .audit
            .query(&crate::audit::EventFilter {
                action: Some(AuditAction::EgressDenied),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(denials.len(), 1);
    }

    #[test]
    fn steward_egress_denied_on_frozen_project() {
        let f = fx();
        seed_project(&f, "alpha");
        f.ctl
            .set_membership("eco", "alpha", &us("dana"), roles(&[Role::DataSteward]))
            .unwrap();
        f.ctl.freeze_project("eco", "alpha", None).unwrap();
        let d = f.ctl.authorize_egress("dana", &egress_job("alpha", "dana")).unwrap();
        assert!(!d.allowed);
        assert_eq!(d.reason, "frozen");
    }

    #[test]
    fn freeze_locks_tree_and_blocks_membership() {
        let f = fx();
        let p = seed_project(&f, "alpha");
        fs::create_dir_all(p.data_root.join("data/sub")).unwrap();
        fs::write(p.data_root.join("data/sub/f.txt"), b"x").unwrap();
        fs::set_permissions(p.data_root.join("data"), fs::Permissions::from_mode(0o755)).unwrap();

        f.ctl.freeze_project("eco", "alpha", None).unwrap();
        let frozen = f.ctl.load_project("alpha").unwrap();
        assert_eq!(frozen.access_state, ProjectState::Frozen);
        for entry in walkdir::WalkDir::new(&frozen.data_root) {
            let entry = entry.unwrap();
            let mode = entry.metadata().unwrap().mode() & 0o7777;
            if entry.file_type().is_dir() {
                assert_eq!(mode, FROZEN_DIR_MODE, "{}", entry.path().display());
            } else {
                assert_eq!(mode, FROZEN_FILE_MODE, "{}", entry.path().display());
            }
        }
        match f.ctl.set_membership("eco", "alpha", &us("bob"), roles(&[Role::Member])) {
            Err(AccessError::FrozenProject(_)) => {}
            other => panic!("expected FrozenProject, got {other:?}"),
        }
        match f.ctl.freeze_project("eco", "alpha", None) {
            Err(AccessError::AlreadyFrozen(_)) => {}
            other => panic!("expected AlreadyFrozen, got {other:?}"),
        }
    }

    #[test]
    fn freeze_restore_round_trips_modes_and_membership() {
        let f = fx();
        let p = seed_project(&f, "alpha");
        fs::create_dir_all(p.data_root.join("data/inner")).unwrap();
        fs::write(p.data_root.join("data/a.txt"), b"a").unwrap();
        fs::write(p.data_root.join("data/inner/b.txt"), b"b").unwrap();
        fs::set_permissions(p.data_root.join("data"), fs::Permissions::from_mode(0o751)).unwrap();
        fs::set_permissions(p.data_root.join("data/a.txt"), fs::Permissions::from_mode(0o640))
            .unwrap();
        f.ctl
            .set_membership("eco", "alpha", &us("alice"), roles(&[Role::Member, Role::DataSteward]))
            .unwrap();

        let before_modes = snapshot_modes(&p.data_root).unwrap();
        let before_members = f.ctl.load_project("alpha").unwrap().members;

        let receipt = f.ctl.freeze_project("eco", "alpha", None).unwrap();
        let restored = f.ctl.restore_project("eco", "alpha", &receipt).unwrap();

        assert_eq!(restored.access_state, ProjectState::Active);
        assert_eq!(restored.members, before_members);
        assert_eq!(snapshot_modes(&p.data_root).unwrap(), before_modes);
        // Receipt consumed.
        assert!(f.ctl.load_receipt("alpha").is_err());
    }

    #[test]
    fn restore_guards() {
        let f = fx();
        seed_project(&f, "alpha");
        seed_project(&f, "beta");
        let receipt = f.ctl.freeze_project("eco", "alpha", None).unwrap();
        match f.ctl.restore_project("eco", "beta", &receipt) {
            Err(AccessError::ReceiptMismatch { .. }) => {}
            other => panic!("expected ReceiptMismatch, got {other:?}"),
        }
        f.ctl.restore_project("eco", "alpha", &receipt).unwrap();
        match f.ctl.restore_project("eco", "alpha", &receipt) {
            Err(AccessError::NotFrozen(_)) => {}
            other => panic!("expected NotFrozen, got {other:?}"),
        }
    }

    #[test]
    fn interrupted_freeze_completes_at_recovery() {
        let f = fx();
        let p = seed_project(&f, "alpha");
        fs::write(p.data_root.join("f.txt"), b"x").unwrap();
        f.ctl.fault.lock().unwrap().arm(FaultPoint::MidFreezeChmod);
        match f.ctl.freeze_project("eco", "alpha", None) {
            Err(AccessError::Injected(_)) => {}
            other => panic!("expected injected crash, got {other:?}"),
        }
        // Record still Active, receipt says freezing.
        assert_eq!(
            f.ctl.load_project("alpha").unwrap().access_state,
            ProjectState::Active
        );
        let actions = f.ctl.recover().unwrap();
        assert_eq!(actions.len(), 1);
        let after = f.ctl.load_project("alpha").unwrap();
        assert_eq!(after.access_state, ProjectState::Frozen);
        let mode = p.data_root.join("f.txt").metadata().unwrap().mode() & 0o7777;
        assert_eq!(mode, FROZEN_FILE_MODE);
    }

    #[test]
    fn interrupted_restore_completes_at_recovery() {
        let f = fx();
        let p = seed_project(&f, "alpha");
        fs::write(p.data_root.join("f.txt"), b"x").unwrap();
        fs::set_permissions(p.data_root.join("f.txt"), fs::Permissions::from_mode(0o644)).unwrap();
        let before = snapshot_modes(&p.data_root).unwrap();
        let receipt = f.ctl.freeze_project("eco", "alpha", None).unwrap();

        f.ctl.fault.lock().unwrap().arm(FaultPoint::MidRestoreChmod);
        match f.ctl.restore_project("eco", "alpha", &receipt) {
            Err(AccessError::Injected(_)) => {}
            other => panic!("expected injected crash, got {other:?}"),
        }
        let actions = f.ctl.recover().unwrap();
        assert_eq!(actions.len(), 1);
        let after = f.ctl.load_project("alpha").unwrap();
        assert_eq!(after.access_state, ProjectState::Active);
        assert_eq!(snapshot_modes(&p.data_root).unwrap(), before);
    }
}
