//! Wires the modules together: one control plane per process, a single
//! engine behind the lock file, transfer cycles on the poll interval and
//! sentinel passes on their own cadence.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use thiserror::Error;

use crate::access::{AccessControl, AccessError};
use crate::audit::{AuditError, AuditLog};
use crate::config::{Config, ScannerChoice};
use crate::domain::{ProjectState, Role};
use crate::lock::{EngineLock, LockError};
use crate::scanner::{BuiltinScanner, CommandScanner, Scanner, ScannerConfigError};
use crate::sentinel::{Finding, Sentinel, SentinelError};
use crate::session::{SessionBroker, SessionError};
use crate::transfer::{CycleReport, EgressGate, Engine, EngineError, TransferDirection, TransferJob};

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Sentinel(#[from] SentinelError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("scanner configuration: {0}")]
    Scanner(#[from] ScannerConfigError),
}

/// Shared services every subcommand needs; opening one runs freeze/restore
/// recovery so no project is ever observed half-frozen.
pub struct ControlPlane {
    pub config: Config,
    pub audit: Arc<AuditLog>,
    pub access: Arc<AccessControl>,
    pub sentinel: Sentinel,
    pub broker: SessionBroker,
}

impl ControlPlane {
    pub fn open(config: Config) -> Result<Self, DaemonError> {
        let audit = Arc::new(AuditLog::open(config.layout.audit_log_path())?);
        let access = Arc::new(AccessControl::open(config.layout.clone(), Arc::clone(&audit))?);
        access.recover()?;
        let sentinel = Sentinel::open(&config.layout, Arc::clone(&audit))?;
        let broker = SessionBroker::open(&config.layout, &config.homes_root, Arc::clone(&audit))?;
        Ok(Self {
            config,
            audit,
            access,
            sentinel,
            broker,
        })
    }

    pub fn build_scanner(&self) -> Result<Box<dyn Scanner>, DaemonError> {
        Ok(match &self.config.scanner {
            ScannerChoice::Builtin => match &self.config.signature_file {
                Some(path) => Box::new(BuiltinScanner::with_signature_file(path)?),
                None => Box::new(BuiltinScanner::new()),
            },
            ScannerChoice::Command(tpl) => Box::new(CommandScanner::with_timeout(
                tpl,
                Duration::from_secs(self.config.scan_timeout_s),
            )?),
        })
    }

    /// user -> project map for tagging new jobs; a user in several projects
    /// maps to the lexicographically first for determinism.
    pub fn user_project_map(&self) -> Result<HashMap<String, String>, DaemonError> {
        let mut map: HashMap<String, String> = HashMap::new();
        for project in self.access.list_projects()? {
            for user in project.members.keys() {
                map.entry(user.clone())
                    .or_insert_with(|| project.project_id.clone());
            }
        }
        Ok(map)
    }

    /// One sentinel pass: every declared policy is audited against its
    /// tree, and every frozen project's tree is diffed against the baseline
    /// captured at freeze time.
    pub fn sentinel_pass(&self) -> Result<Vec<(String, Finding)>, DaemonError> {
        let mut out = Vec::new();
        let policies = self.sentinel.load_policies()?;
        for policy in &policies {
            let root = match self.access.load_project(&policy.project_id) {
                Ok(p) => p.data_root.clone(),
                Err(AccessError::UnknownProject(_)) => match policy.top_dirs.first() {
                    Some(t) => t.clone(),
                    None => continue,
                },
                Err(e) => return Err(e.into()),
            };
            for finding in self.sentinel.audit_tree(policy, &root)? {
                out.push((policy.project_id.clone(), finding));
            }
        }
        for project in self.access.list_projects()? {
            if project.access_state != ProjectState::Frozen {
                continue;
            }
            if self.sentinel.load_baseline(&project.project_id).is_err() {
                continue;
            }
            let policy = policies
                .iter()
                .find(|p| p.project_id == project.project_id);
            for finding in self.sentinel.check_baseline(
                &project.project_id,
                &project.data_root,
                true,
                policy,
            )? {
                out.push((project.project_id.clone(), finding));
            }
        }
        Ok(out)
    }
}

/// Egress gate backed by access control: persisted grants are honored, and
/// a job submitted by a data steward of an active project self-approves
/// (one elevated user suffices; there is no second-person step).
struct AccessGate {
    access: Arc<AccessControl>,
}

impl EgressGate for AccessGate {
    fn may_execute(&self, job: &TransferJob) -> bool {
        if self.access.grants().is_granted(&job.job_id) {
            return true;
        }
        let project = match self.access.load_project(&job.project_id) {
            Ok(p) => p,
            Err(_) => return false,
        };
        if project.access_state == ProjectState::Active
            && project.has_role(&job.user, Role::DataSteward)
        {
            return self
                .access
                .authorize_egress(&job.user, job)
                .map(|d| d.allowed)
                .unwrap_or(false);
        }
        false
    }
}

/// The engine plus its exclusive lock. At most one per layout.
pub struct Daemon {
    _lock: EngineLock,
    pub plane: ControlPlane,
    engine: Engine,
}

impl Daemon {
    pub fn open(config: Config) -> Result<Self, DaemonError> {
        let lock = EngineLock::try_acquire(config.layout.lock_path())?;
        let plane = ControlPlane::open(config)?;
        let scanner = plane.build_scanner()?;
        let mut engine = Engine::new(
            plane.config.layout.clone(),
            scanner,
            Arc::clone(&plane.audit),
        )?;
        engine.set_egress_gate(Box::new(AccessGate {
            access: Arc::clone(&plane.access),
        }));
        Ok(Self {
            _lock: lock,
            plane,
            engine,
        })
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn all_directions() -> BTreeSet<TransferDirection> {
        [TransferDirection::Ingress, TransferDirection::Egress]
            .into_iter()
            .collect()
    }

    /// One transfer cycle over the given directions.
    pub fn transfer_cycle_for(
        &mut self,
        directions: &BTreeSet<TransferDirection>,
    ) -> Result<CycleReport, DaemonError> {
        let map = self.plane.user_project_map()?;
        self.engine.set_user_projects(map);
        Ok(self.engine.run_cycle(directions, Utc::now())?)
    }

    /// One transfer cycle over both directions.
    pub fn transfer_cycle(&mut self) -> Result<CycleReport, DaemonError> {
        self.transfer_cycle_for(&Self::all_directions())
    }

    /// Exactly one transfer cycle per direction plus one sentinel pass.
    pub fn run_once(&mut self) -> Result<(CycleReport, Vec<(String, Finding)>), DaemonError> {
        self.run_once_for(&Self::all_directions())
    }

    pub fn run_once_for(
        &mut self,
        directions: &BTreeSet<TransferDirection>,
    ) -> Result<(CycleReport, Vec<(String, Finding)>), DaemonError> {
        let report = self.transfer_cycle_for(directions)?;
        let findings = self.plane.sentinel_pass()?;
        Ok((report, findings))
    }

    /// Poll until `shutdown` is set. Cycles run on the configured poll
    /// interval, sentinel passes on theirs; shutdown is only observed
    /// between jobs, so a clean stop never leaves a job mid-flight.
    pub fn run_loop(&mut self, shutdown: &AtomicBool) -> Result<(), DaemonError> {
        let poll = Duration::from_secs(self.plane.config.poll_interval_s);
        let sentinel_every = Duration::from_secs(self.plane.config.sentinel_interval_s);
        let mut last_sentinel: Option<Instant> = None;
        loop {
            if shutdown.load(Ordering::SeqCst) {
                return Ok(());
            }
            let cycle_started = Instant::now();
            self.transfer_cycle()?;
            if last_sentinel.map(|t| t.elapsed() >= sentinel_every).unwrap_or(true) {
                self.plane.sentinel_pass()?;
                last_sentinel = Some(Instant::now());
            }
            // Sleep in slices so a termination signal is honored promptly.
            while cycle_started.elapsed() < poll {
                if shutdown.load(Ordering::SeqCst) {
                    return Ok(());
                }
                std::thread::sleep(Duration::from_millis(100));
            }
        }
    }
}
