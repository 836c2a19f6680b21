//! The transfer engine: detect flag files in landing zones, scan payloads,
//! promote clean batches across the boundary, quarantine infected ones, and
//! survive a crash at any step.
//!
//! Files move, they are never copied across the boundary: promotion copies
//! into a staging directory on the destination filesystem, renames into
//! place (atomic within that filesystem), then removes the source. After
//! recovery every payload file is observably in exactly one of source,
//! destination, quarantine, or staging, and staging residue rolls back to
//! the source copy.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::access::GrantStore;
use crate::audit::{AuditAction, AuditError, AuditLog, EventDraft};
use crate::domain::{LayoutError, ZoneLayout};
use crate::fault::{FaultPlan, FaultPoint};
use crate::fsutil::{self, sha256_file, sha256_hex};
use crate::journal::{JobJournal, JournalError};
use crate::scanner::{Scanner, Verdict};

/// Exact name of the sentinel file whose presence authorizes a batch.
pub const FLAG_FILE: &str = ".transfer-ready";

/// Staging directory name inside each destination zone directory.
const STAGING_DIR: &str = ".staging";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransferDirection {
    /// inbox-outside -> inbox-inside
    Ingress,
    /// outbox-inside -> outbox-outside
    Egress,
}

impl fmt::Display for TransferDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferDirection::Ingress => "ingress",
            TransferDirection::Egress => "egress",
        })
    }
}

impl FromStr for TransferDirection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ingress" => Ok(TransferDirection::Ingress),
            "egress" => Ok(TransferDirection::Egress),
            other => Err(format!("unknown direction '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferState {
    Detected,
    Scanning,
    Promoted,
    Quarantined,
    Rejected,
}

impl TransferState {
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            TransferState::Promoted | TransferState::Quarantined | TransferState::Rejected
        )
    }
}

impl fmt::Display for TransferState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferState::Detected => "Detected",
            TransferState::Scanning => "Scanning",
            TransferState::Promoted => "Promoted",
            TransferState::Quarantined => "Quarantined",
            TransferState::Rejected => "Rejected",
        })
    }
}

impl FromStr for TransferState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Detected" => Ok(TransferState::Detected),
            "Scanning" => Ok(TransferState::Scanning),
            "Promoted" => Ok(TransferState::Promoted),
            "Quarantined" => Ok(TransferState::Quarantined),
            "Rejected" => Ok(TransferState::Rejected),
            other => Err(format!("unknown transfer state '{other}'")),
        }
    }
}

/// One file in a batch, keyed by its path relative to the user's zone dir.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadEntry {
    pub rel_path: String,
    pub size: u64,
    pub digest: String,
}

/// One flag-file-triggered batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferJob {
    pub job_id: String,
    pub user: String,
    pub project_id: String,
    pub direction: TransferDirection,
    pub payload: Vec<PayloadEntry>,
    pub state: TransferState,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

/// What one polling cycle did.
#[derive(Debug, Clone)]
pub struct CycleReport {
    pub cycle_started: DateTime<Utc>,
    /// Jobs that progressed this cycle, with their end-of-cycle state.
    pub jobs: Vec<(String, TransferState)>,
    pub files_promoted: u64,
    pub files_quarantined: u64,
    pub errors: Vec<String>,
    /// Egress jobs detected but waiting for an authorization grant.
    pub pending_approval: Vec<String>,
}

impl CycleReport {
    fn new(cycle_started: DateTime<Utc>) -> Self {
        Self {
            cycle_started,
            jobs: Vec::new(),
            files_promoted: 0,
            files_quarantined: 0,
            errors: Vec::new(),
            pending_approval: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("io failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("scanner unavailable for job {job_id}: {reason}")]
    ScannerUnavailable { job_id: String, reason: String },
    #[error("injected crash at {0:?}")]
    Injected(FaultPoint),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Decides whether a detected egress job may execute now. The engine knows
/// nothing about roles; the default gate only honors persisted grants, and
/// the control plane installs an access-control-backed gate on top.
pub trait EgressGate: Send + Sync {
    fn may_execute(&self, job: &TransferJob) -> bool;
}

struct GrantOnlyGate {
    grants: GrantStore,
}

impl EgressGate for GrantOnlyGate {
    fn may_execute(&self, job: &TransferJob) -> bool {
        self.grants.is_granted(&job.job_id)
    }
}

/// Where a payload file currently sits, from journal + filesystem evidence.
/// Moves run copy -> fsync -> unlink source -> rename into place, so each
/// state here is unambiguous: a present source means the move never ran,
/// and a staged copy without a source means the move committed to going
/// forward.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Spot {
    Source,
    PromoteStaged,
    QuarantineStaged,
    Dest(PathBuf),
    Quarantined,
    Missing,
}

pub struct Engine {
    layout: ZoneLayout,
    scanner: Box<dyn Scanner>,
    audit: Arc<AuditLog>,
    journal: JobJournal,
    grants: GrantStore,
    egress_gate: Box<dyn EgressGate>,
    user_projects: HashMap<String, String>,
    /// Kill-point injection for crash-safety tests; unarmed in production.
    pub fault: FaultPlan,
}

impl Engine {
    /// Validate the layout, create the state substructure, and return an
    /// engine. Exactly one engine per layout may run cycles; the control
    /// plane enforces that with the engine lock file.
    pub fn new(
        layout: ZoneLayout,
        scanner: Box<dyn Scanner>,
        audit: Arc<AuditLog>,
    ) -> Result<Self, EngineError> {
        layout.validate()?;
        layout.ensure_zone_dirs().map_err(io_at(&layout.sftp_root))?;
        let quarantine = layout.quarantine_dir();
        fs::create_dir_all(&quarantine).map_err(io_at(&quarantine))?;
        let journal = JobJournal::open(layout.journal_dir())?;
        let grants = GrantStore::open(layout.grants_dir()).map_err(io_at(&layout.grants_dir()))?;
        let gate_grants =
            GrantStore::open(layout.grants_dir()).map_err(io_at(&layout.grants_dir()))?;
        Ok(Self {
            layout,
            scanner,
            audit,
            journal,
            grants,
            egress_gate: Box::new(GrantOnlyGate { grants: gate_grants }),
            user_projects: HashMap::new(),
            fault: FaultPlan::none(),
        })
    }

    pub fn layout(&self) -> &ZoneLayout {
        &self.layout
    }

    pub fn journal(&self) -> &JobJournal {
        &self.journal
    }

    /// Install the mapping from user to project recorded on new jobs.
    pub fn set_user_projects(&mut self, map: HashMap<String, String>) {
        self.user_projects = map;
    }

    /// Replace the egress gate (the control plane installs one that can
    /// self-approve jobs submitted by a data steward).
    pub fn set_egress_gate(&mut self, gate: Box<dyn EgressGate>) {
        self.egress_gate = gate;
    }

    fn trip(&mut self, point: FaultPoint) -> Result<(), EngineError> {
        if self.fault.trip(point) {
            Err(EngineError::Injected(point))
        } else {
            Ok(())
        }
    }

    fn source_dir(&self, job: &TransferJob) -> PathBuf {
        self.layout.source_zone_dir(job.direction).join(&job.user)
    }

    fn dest_dir(&self, job: &TransferJob) -> PathBuf {
        self.layout.dest_zone_dir(job.direction).join(&job.user)
    }

    fn promote_staging_dir(&self, job: &TransferJob) -> PathBuf {
        self.layout
            .dest_zone_dir(job.direction)
            .join(STAGING_DIR)
            .join(&job.job_id)
    }

    fn quarantine_staging_dir(&self, job_id: &str) -> PathBuf {
        self.layout.quarantine_dir().join(STAGING_DIR).join(job_id)
    }

    fn quarantine_job_dir(&self, job_id: &str) -> PathBuf {
        self.layout.quarantine_dir().join(job_id)
    }

    /// One `Detected` job per user directory containing the flag file. The
    /// flag is consumed once the job is journaled. Directories whose user
    /// already has an unfinished job in this direction are left untouched.
    pub fn detect_ready_transfers(
        &mut self,
        direction: TransferDirection,
        now: DateTime<Utc>,
    ) -> Result<(Vec<TransferJob>, Vec<String>), EngineError> {
        let mut jobs = Vec::new();
        let mut errors = Vec::new();
        let zone_dir = self.layout.source_zone_dir(direction);
        if !zone_dir.is_dir() {
            return Ok((jobs, errors));
        }

        let busy: BTreeSet<(String, TransferDirection)> = {
            let (open, _) = self.journal.non_terminal()?;
            open.into_iter().map(|j| (j.user, j.direction)).collect()
        };

        let mut users: Vec<String> = Vec::new();
        match fs::read_dir(&zone_dir) {
            Ok(entries) => {
                for entry in entries {
                    let entry = match entry {
                        Ok(e) => e,
                        Err(e) => {
                            errors.push(format!("{}: {e}", zone_dir.display()));
                            continue;
                        }
                    };
                    let name = entry.file_name().to_string_lossy().into_owned();
                    if name.starts_with('.') {
                        continue;
                    }
                    if entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                        users.push(name);
                    }
                }
            }
            Err(e) => {
                errors.push(format!("{}: {e}", zone_dir.display()));
                return Ok((jobs, errors));
            }
        }
        users.sort();

        for user in users {
            let user_dir = zone_dir.join(&user);
            let flag = user_dir.join(FLAG_FILE);
            let flag_present = flag
                .symlink_metadata()
                .map(|m| m.is_file())
                .unwrap_or(false);
            if !flag_present {
                continue;
            }
            if busy.contains(&(user.clone(), direction)) {
                // A prior batch from this user is still in flight; the flag
                // stays put and is picked up once that job finishes.
                continue;
            }
            match self.build_job(&user_dir, &user, direction, now) {
                Ok(job) => {
                    self.journal.store(&job)?;
                    self.trip(FaultPoint::AfterJobJournaled)?;
                    self.audit.append(
                        EventDraft::new(&job.user, AuditAction::TransferDetected)
                            .project(job.project_id.clone())
                            .with("job_id", &job.job_id)
                            .with("direction", job.direction.to_string())
                            .with("files", job.payload.len().to_string()),
                    )?;
                    fs::remove_file(&flag).map_err(io_at(&flag))?;
                    self.trip(FaultPoint::AfterFlagConsumed)?;
                    jobs.push(job);
                }
                Err(e) => {
                    errors.push(format!("{}: {e}", user_dir.display()));
                }
            }
        }
        Ok((jobs, errors))
    }

    fn build_job(
        &self,
        user_dir: &Path,
        user: &str,
        direction: TransferDirection,
        now: DateTime<Utc>,
    ) -> Result<TransferJob, EngineError> {
        let mut payload = Vec::new();
        for entry in walkdir::WalkDir::new(user_dir)
            .follow_links(false)
            .sort_by_file_name()
        {
            let entry = entry.map_err(|e| EngineError::Io {
                path: user_dir.to_path_buf(),
                source: io::Error::other(e),
            })?;
            if entry.file_type().is_dir() {
                continue;
            }
            let rel = entry
                .path()
                .strip_prefix(user_dir)
                .expect("walk stays under user dir")
                .to_string_lossy()
                .into_owned();
            if rel == FLAG_FILE {
                continue;
            }
            let meta = entry
                .path()
                .symlink_metadata()
                .map_err(io_at(entry.path()))?;
            let (size, digest) = if meta.is_file() {
                (meta.len(), sha256_file(entry.path()).map_err(io_at(entry.path()))?)
            } else {
                // Non-regular entries are recorded so validation can name
                // and reject them; their content is never read.
                (0, sha256_hex(b""))
            };
            payload.push(PayloadEntry {
                rel_path: rel,
                size,
                digest,
            });
        }
        payload.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
        Ok(TransferJob {
            job_id: uuid::Uuid::new_v4().to_string(),
            user: user.to_string(),
            project_id: self.user_projects.get(user).cloned().unwrap_or_default(),
            direction,
            payload,
            state: TransferState::Detected,
            created_at: now,
            finished_at: None,
        })
    }

    /// Reject jobs whose payload names anything but regular files reachable
    /// through traversal-free relative paths. Subdirectories are fine (their
    /// files are listed individually); symlinks, device nodes, and `..`
    /// segments are not.
    pub fn validate_payload(&mut self, mut job: TransferJob) -> Result<TransferJob, EngineError> {
        debug_assert_eq!(job.state, TransferState::Detected);
        let source_dir = self.source_dir(&job);
        let mut offenders: Vec<String> = Vec::new();
        for entry in &job.payload {
            if let Some(reason) = offending_path(&entry.rel_path) {
                offenders.push(format!("{} ({reason})", entry.rel_path));
                continue;
            }
            let p = source_dir.join(&entry.rel_path);
            match p.symlink_metadata() {
                Ok(m) if m.is_file() => {}
                Ok(m) if m.is_symlink() => offenders.push(format!("{} (symlink)", entry.rel_path)),
                Ok(_) => offenders.push(format!("{} (not a regular file)", entry.rel_path)),
                Err(e) => offenders.push(format!("{} ({e})", entry.rel_path)),
            }
        }
        if offenders.is_empty() {
            return Ok(job);
        }
        job.state = TransferState::Rejected;
        job.finished_at = Some(Utc::now());
        self.audit.append(
            EventDraft::system(AuditAction::TransferRejected)
                .project(job.project_id.clone())
                .with("job_id", &job.job_id)
                .with("user", &job.user)
                .with("offending", offenders.join(", ")),
        )?;
        self.journal.store(&job)?;
        Ok(job)
    }

    /// Scan the batch and move it: all clean promotes every file into the
    /// destination zone, any infection quarantines the whole batch. Crashing
    /// anywhere leaves a journal + filesystem state that `recover_incomplete`
    /// drives to the same outcome.
    pub fn execute_transfer(&mut self, mut job: TransferJob) -> Result<TransferJob, EngineError> {
        if job.state == TransferState::Detected {
            job.state = TransferState::Scanning;
            self.journal.store(&job)?;
            self.trip(FaultPoint::AfterScanningJournaled)?;
        }
        debug_assert_eq!(job.state, TransferState::Scanning);

        let source_dir = self.source_dir(&job);
        let dest_dir = self.dest_dir(&job);
        let mut spots: Vec<Spot> = Vec::with_capacity(job.payload.len());
        for entry in &job.payload {
            spots.push(self.locate(&job, &source_dir, &dest_dir, entry)?);
        }

        if let Some(idx) = spots.iter().position(|s| *s == Spot::Missing) {
            return Err(EngineError::Io {
                path: source_dir.join(&job.payload[idx].rel_path),
                source: io::Error::new(io::ErrorKind::NotFound, "payload file vanished"),
            });
        }

        if spots
            .iter()
            .any(|s| matches!(s, Spot::Quarantined | Spot::QuarantineStaged))
        {
            // A previous attempt already decided to quarantine this batch.
            return self.finish_quarantine(job, spots);
        }

        // Scan whatever still sits in the source. Files already staged or
        // landed were scanned clean before the interruption.
        let mut infected = false;
        for (entry, spot) in job.payload.iter().zip(&spots) {
            if *spot != Spot::Source {
                continue;
            }
            let path = source_dir.join(&entry.rel_path);
            let result = self.scanner.scan(&path);
            let verdict_str = match &result.verdict {
                Verdict::Clean => "clean".to_string(),
                Verdict::Infected(sig) => format!("infected:{sig}"),
                Verdict::Error(reason) => format!("error:{reason}"),
            };
            self.audit.append(
                EventDraft::system(AuditAction::FileScanned)
                    .project(job.project_id.clone())
                    .with("job_id", &job.job_id)
                    .with("path", &entry.rel_path)
                    .with("verdict", &verdict_str),
            )?;
            match result.verdict {
                Verdict::Clean => {}
                Verdict::Infected(_) => infected = true,
                Verdict::Error(reason) => {
                    // Fail closed: nothing moves, the journaled Scanning job
                    // is retried next cycle.
                    return Err(EngineError::ScannerUnavailable {
                        job_id: job.job_id.clone(),
                        reason,
                    });
                }
            }
        }

        if infected {
            // Covers both the fresh decision and the recovery case where a
            // re-scan contradicts a partial promotion: everything, including
            // files already staged or in the destination, moves to quarantine.
            return self.finish_quarantine(job, spots);
        }

        // All clean: complete the promotion.
        let staging = self.promote_staging_dir(&job);
        for (entry, spot) in job.payload.clone().iter().zip(spots.clone()) {
            let rel = Path::new(&entry.rel_path);
            match spot {
                Spot::Dest(_) => {}
                Spot::PromoteStaged => {
                    let staged = staging.join(rel);
                    let final_dest = fsutil::collision_free(&dest_dir, rel);
                    rename_into(&staged, &final_dest)?;
                    self.trip(FaultPoint::AfterStageRename)?;
                }
                Spot::Source => {
                    let src = source_dir.join(rel);
                    let staged = staging.join(rel);
                    self.stage_and_unlink(&src, &staged, false)?;
                    let final_dest = fsutil::collision_free(&dest_dir, rel);
                    rename_into(&staged, &final_dest)?;
                    self.trip(FaultPoint::AfterStageRename)?;
                }
                Spot::Quarantined | Spot::QuarantineStaged | Spot::Missing => {
                    unreachable!("handled above")
                }
            }
            self.trip(FaultPoint::AfterFirstFileMoved)?;
        }
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_at(&staging))?;
        }
        fsutil::prune_empty_dirs(&source_dir);

        self.audit.append(
            EventDraft::system(AuditAction::FilePromoted)
                .project(job.project_id.clone())
                .with("job_id", &job.job_id)
                .with("user", &job.user)
                .with("files", job.payload.len().to_string()),
        )?;
        self.trip(FaultPoint::BeforeTerminalJournaled)?;
        job.state = TransferState::Promoted;
        job.finished_at = Some(Utc::now());
        self.journal.store(&job)?;
        let _ = self.grants.revoke(&job.job_id);
        Ok(job)
    }

    fn finish_quarantine(
        &mut self,
        mut job: TransferJob,
        spots: Vec<Spot>,
    ) -> Result<TransferJob, EngineError> {
        let source_dir = self.source_dir(&job);
        let qstaging = self.quarantine_staging_dir(&job.job_id);
        let pstaging = self.promote_staging_dir(&job);
        let qdir = self.quarantine_job_dir(&job.job_id);
        for (entry, spot) in job.payload.clone().iter().zip(spots) {
            let rel = Path::new(&entry.rel_path);
            let qdest = qdir.join(rel);
            match spot {
                Spot::Quarantined => continue,
                Spot::QuarantineStaged => {
                    rename_into(&qstaging.join(rel), &qdest)?;
                }
                Spot::PromoteStaged => {
                    // Staged for promotion, now condemned: redirect it.
                    rename_into(&pstaging.join(rel), &qdest)?;
                }
                Spot::Source => {
                    let src = source_dir.join(rel);
                    let staged = qstaging.join(rel);
                    self.stage_and_unlink(&src, &staged, true)?;
                    rename_into(&staged, &qdest)?;
                }
                Spot::Dest(promoted_path) => {
                    // Infected content must never remain inside: haul it back.
                    let staged = qstaging.join(rel);
                    self.stage_and_unlink(&promoted_path, &staged, true)?;
                    rename_into(&staged, &qdest)?;
                }
                Spot::Missing => unreachable!("handled by caller"),
            }
            self.trip(FaultPoint::AfterFirstFileQuarantined)?;
        }
        for staging in [&qstaging, &pstaging] {
            if staging.exists() {
                fs::remove_dir_all(staging).map_err(io_at(staging))?;
            }
        }
        fsutil::prune_empty_dirs(&source_dir);

        self.audit.append(
            EventDraft::system(AuditAction::FileQuarantined)
                .project(job.project_id.clone())
                .with("job_id", &job.job_id)
                .with("user", &job.user)
                .with("files", job.payload.len().to_string())
                .with("quarantine", qdir.to_string_lossy()),
        )?;
        self.trip(FaultPoint::BeforeQuarantineJournaled)?;
        job.state = TransferState::Quarantined;
        job.finished_at = Some(Utc::now());
        self.journal.store(&job)?;
        let _ = self.grants.revoke(&job.job_id);
        Ok(job)
    }

    /// Copy into staging, fsync, then unlink the source. Once the source is
    /// gone the staged copy is the file; the caller renames it into place.
    /// Stale partial residue at the staged path is discarded first (the
    /// source is still present in that case, so nothing is lost).
    fn stage_and_unlink(
        &mut self,
        src: &Path,
        staged: &Path,
        quarantine: bool,
    ) -> Result<(), EngineError> {
        if staged.symlink_metadata().is_ok() {
            fs::remove_file(staged).map_err(io_at(staged))?;
        }
        stage_copy(src, staged)?;
        self.trip(if quarantine {
            FaultPoint::AfterQuarantineStageCopy
        } else {
            FaultPoint::AfterStageCopy
        })?;
        fs::remove_file(src).map_err(io_at(src))?;
        self.trip(if quarantine {
            FaultPoint::AfterQuarantineSourceUnlinked
        } else {
            FaultPoint::AfterSourceUnlinked
        })?;
        Ok(())
    }

    fn locate(
        &self,
        job: &TransferJob,
        source_dir: &Path,
        dest_dir: &Path,
        entry: &PayloadEntry,
    ) -> Result<Spot, EngineError> {
        if self
            .quarantine_job_dir(&job.job_id)
            .join(&entry.rel_path)
            .is_file()
        {
            return Ok(Spot::Quarantined);
        }
        let src = source_dir.join(&entry.rel_path);
        // Any source entry, including the non-regular ones validation
        // rejects, means the move never started.
        if src.symlink_metadata().is_ok() {
            return Ok(Spot::Source);
        }
        let qstaged = self.quarantine_staging_dir(&job.job_id).join(&entry.rel_path);
        if qstaged.is_file() && sha256_file(&qstaged).map_err(io_at(&qstaged))? == entry.digest {
            return Ok(Spot::QuarantineStaged);
        }
        let pstaged = self.promote_staging_dir(job).join(&entry.rel_path);
        if pstaged.is_file() && sha256_file(&pstaged).map_err(io_at(&pstaged))? == entry.digest {
            return Ok(Spot::PromoteStaged);
        }
        if let Some(found) = find_digest_match(dest_dir, &entry.rel_path, &entry.digest)
            .map_err(io_at(dest_dir))?
        {
            return Ok(Spot::Dest(found));
        }
        Ok(Spot::Missing)
    }

    /// Re-drive every journaled non-terminal job. Corrupt journal records
    /// are frozen for manual review. Egress jobs still waiting for a grant
    /// stay pending by design.
    pub fn recover_incomplete(&mut self) -> Result<(Vec<TransferJob>, Vec<String>), EngineError> {
        let mut errors = Vec::new();
        let (open_jobs, corrupt) = self.journal.non_terminal()?;
        for job_id in corrupt {
            self.audit.append(
                EventDraft::system(AuditAction::JournalCorrupt).with("job_id", &job_id),
            )?;
            self.journal.freeze_corrupt(&job_id)?;
            errors.push(format!("journal record corrupt: {job_id} (frozen for review)"));
        }

        self.sweep_stale_staging()?;

        let mut finished = Vec::new();
        for job in open_jobs {
            // A crash between journaling and flag consumption leaves the
            // flag behind; it belongs to this job, not a new one.
            let lingering_flag = self.source_dir(&job).join(FLAG_FILE);
            if job.state == TransferState::Detected && lingering_flag.is_file() {
                fs::remove_file(&lingering_flag).map_err(io_at(&lingering_flag))?;
            }

            if job.direction == TransferDirection::Egress
                && job.state == TransferState::Detected
                && !self.egress_gate.may_execute(&job)
            {
                continue;
            }

            let job = if job.state == TransferState::Detected {
                self.validate_payload(job)?
            } else {
                job
            };
            if job.state == TransferState::Rejected {
                finished.push(job);
                continue;
            }
            match self.execute_transfer(job) {
                Ok(done) => finished.push(done),
                Err(EngineError::Injected(p)) => return Err(EngineError::Injected(p)),
                Err(e) => errors.push(e.to_string()),
            }
        }
        Ok((finished, errors))
    }

    /// Remove staging residue belonging to terminal jobs (by then every
    /// payload file has landed, so only empty dirs and stale partial copies
    /// remain). Staging of unknown jobs is kept for manual review: with the
    /// source already unlinked it may hold the only copy.
    fn sweep_stale_staging(&mut self) -> Result<(), EngineError> {
        let mut roots = vec![self.layout.quarantine_dir().join(STAGING_DIR)];
        for direction in [TransferDirection::Ingress, TransferDirection::Egress] {
            roots.push(self.layout.dest_zone_dir(direction).join(STAGING_DIR));
        }
        for root in roots {
            if !root.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&root).map_err(io_at(&root))? {
                let entry = entry.map_err(io_at(&root))?;
                let job_id = entry.file_name().to_string_lossy().into_owned();
                let terminal = self
                    .journal
                    .load(&job_id)
                    .map(|j| j.state.is_terminal())
                    .unwrap_or(false);
                if terminal {
                    fs::remove_dir_all(entry.path()).map_err(io_at(&entry.path()))?;
                }
            }
        }
        Ok(())
    }

    /// One full poll: recover journaled work, then detect, validate, and
    /// execute per direction. Never aborts the cycle for one bad job. On
    /// quiescent zones a cycle performs zero file operations.
    pub fn run_cycle(
        &mut self,
        directions: &BTreeSet<TransferDirection>,
        now: DateTime<Utc>,
    ) -> Result<CycleReport, EngineError> {
        let mut report = CycleReport::new(now);

        let (recovered, recovery_errors) = self.recover_incomplete()?;
        report.errors.extend(recovery_errors);
        for job in recovered {
            self.tally(&mut report, &job);
        }

        for direction in directions {
            let (jobs, errors) = self.detect_ready_transfers(*direction, now)?;
            report.errors.extend(errors);
            for job in jobs {
                let job = self.validate_payload(job)?;
                if job.state == TransferState::Rejected {
                    self.tally(&mut report, &job);
                    continue;
                }
                if job.direction == TransferDirection::Egress
                    && !self.egress_gate.may_execute(&job)
                {
                    report.pending_approval.push(job.job_id.clone());
                    continue;
                }
                match self.execute_transfer(job) {
                    Ok(done) => self.tally(&mut report, &done),
                    Err(EngineError::Injected(p)) => return Err(EngineError::Injected(p)),
                    Err(EngineError::ScannerUnavailable { job_id, reason }) => {
                        report.errors.push(format!(
                            "job {job_id}: scanner unavailable ({reason}); will retry"
                        ));
                        report.jobs.push((job_id, TransferState::Scanning));
                    }
                    Err(e) => report.errors.push(e.to_string()),
                }
            }
        }
        Ok(report)
    }

    fn tally(&self, report: &mut CycleReport, job: &TransferJob) {
        match job.state {
            TransferState::Promoted => report.files_promoted += job.payload.len() as u64,
            TransferState::Quarantined => report.files_quarantined += job.payload.len() as u64,
            _ => {}
        }
        report.jobs.push((job.job_id.clone(), job.state));
    }
}

/// Why a relative payload path is unacceptable, if it is.
fn offending_path(rel: &str) -> Option<&'static str> {
    if rel.is_empty() {
        return Some("empty path");
    }
    if rel.chars().any(|c| c.is_control()) {
        return Some("control character in path");
    }
    let path = Path::new(rel);
    for component in path.components() {
        match component {
            std::path::Component::Normal(_) => {}
            std::path::Component::ParentDir => return Some("upward traversal"),
            std::path::Component::RootDir | std::path::Component::Prefix(_) => {
                return Some("absolute path")
            }
            std::path::Component::CurDir => return Some("non-canonical path"),
        }
    }
    None
}

/// Copy `src` to the staging path, fsynced, creating parents.
fn stage_copy(src: &Path, staged: &Path) -> Result<(), EngineError> {
    if let Some(parent) = staged.parent() {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    fs::copy(src, staged).map_err(io_at(src))?;
    let f = fs::File::open(staged).map_err(io_at(staged))?;
    f.sync_data().map_err(io_at(staged))?;
    Ok(())
}

/// Rename a staged file to its final home, creating parents. Atomic within
/// the destination filesystem.
fn rename_into(staged: &Path, final_dest: &Path) -> Result<(), EngineError> {
    if let Some(parent) = final_dest.parent() {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    fs::rename(staged, final_dest).map_err(io_at(final_dest))
}

/// Find a file under `dest_dir` at `rel` or any of its collision-suffixed
/// names whose content digest matches. The search stops at the first free
/// name, which bounds it by what collisions could have produced.
fn find_digest_match(dest_dir: &Path, rel: &str, digest: &str) -> io::Result<Option<PathBuf>> {
    let rel_path = Path::new(rel);
    let name = match rel_path.file_name() {
        Some(n) => n.to_string_lossy().into_owned(),
        None => return Ok(None),
    };
    let parent = rel_path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    let mut n = 0u64;
    loop {
        let candidate = if n == 0 {
            dest_dir.join(rel_path)
        } else {
            dest_dir.join(&parent).join(format!("{name}.{n}"))
        };
        match candidate.symlink_metadata() {
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
            Ok(m) if m.is_file() => {
                if sha256_file(&candidate)? == digest {
                    return Ok(Some(candidate));
                }
            }
            Ok(_) => {}
        }
        n += 1;
    }
}
