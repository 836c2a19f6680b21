//! Core library for the airlock control plane: a flag-file-triggered file
//! transfer gateway between an outside landing zone and an inside enclave,
//! with malware gating, a hash-chained audit log, project-scoped access
//! control with freeze/restore, directory permission auditing, and stateless
//! virtual-session lifecycle management.
//!
//! Everything here operates on real directories and plain structured-text
//! state files; there is no database and no network service. The `daemon`
//! module wires the pieces together on a polling cadence, and the CLI crate
//! fronts the same functions.

pub mod access;
pub mod audit;
pub mod config;
pub mod daemon;
pub mod domain;
pub mod fault;
pub mod fsutil;
pub mod journal;
pub mod lock;
pub mod record;
pub mod scanner;
pub mod sentinel;
pub mod session;
pub mod transfer;

pub use access::{AccessControl, AccessDecision, AccessError, FreezeReceipt};
pub use audit::{AuditAction, AuditError, AuditEvent, AuditLog, ChainStatus, EventFilter};
pub use config::{Config, ConfigError, ScannerChoice};
pub use domain::{LayoutError, Principal, ProjectRecord, ProjectState, Role, Zone, ZoneLayout};
pub use fault::FaultPoint;
pub use journal::{JobJournal, JournalError};
pub use lock::{EngineLock, LockError};
pub use scanner::{BuiltinScanner, CommandScanner, ScanResult, Scanner, Verdict};
pub use sentinel::{Baseline, Finding, FindingKind, PermissionPolicy, Sentinel, Severity};
pub use session::{SessionBroker, SessionError, SessionHandle, SessionSpec, SessionState};
pub use transfer::{
    CycleReport, Engine, EngineError, PayloadEntry, TransferDirection, TransferJob, TransferState,
};
