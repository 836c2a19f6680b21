//! Append-only, hash-chained audit log: the event collector every other
//! module reports into, and the compensating control that makes the
//! single-approver egress model reviewable.
//!
//! On-disk format, one record per line, fields separated by the US unit
//! separator (0x1F):
//!
//! ```text
//! seq␟timestamp␟actor␟project_id␟action␟k=v␟k=v…␟prev_hash_hex␟this_hash_hex\n
//! ```
//!
//! `timestamp` is RFC 3339 UTC with microsecond precision; `detail` pairs
//! are sorted by key; hashes are lowercase hex SHA-256. `this_hash` is the
//! SHA-256 of the record bytes up to and excluding the `this_hash` field
//! itself, so the chain can be re-verified by any independent reader. Event
//! 0 uses an all-zero previous hash. Appends are serialized through a single
//! writer and fsynced before the call returns.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

use crate::fsutil::sha256_hex;
use crate::record::{escape, unescape};

const SEP: char = '\u{1f}';
const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// Every security-relevant action the deployment records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AuditAction {
    TransferDetected,
    FileScanned,
    FilePromoted,
    FileQuarantined,
    TransferRejected,
    EgressAuthorized,
    EgressDenied,
    MembershipChanged,
    ProjectFrozen,
    ProjectRestored,
    PermissionViolation,
    FrozenAccessAttempt,
    SessionOpened,
    SessionClosed,
    JournalCorrupt,
}

impl AuditAction {
    pub const ALL: [AuditAction; 15] = [
        AuditAction::TransferDetected,
        AuditAction::FileScanned,
        AuditAction::FilePromoted,
        AuditAction::FileQuarantined,
        AuditAction::TransferRejected,
        AuditAction::EgressAuthorized,
        AuditAction::EgressDenied,
        AuditAction::MembershipChanged,
        AuditAction::ProjectFrozen,
        AuditAction::ProjectRestored,
        AuditAction::PermissionViolation,
        AuditAction::FrozenAccessAttempt,
        AuditAction::SessionOpened,
        AuditAction::SessionClosed,
        AuditAction::JournalCorrupt,
    ];

    fn as_str(&self) -> &'static str {
        match self {
            AuditAction::TransferDetected => "TransferDetected",
            AuditAction::FileScanned => "FileScanned",
            AuditAction::FilePromoted => "FilePromoted",
            AuditAction::FileQuarantined => "FileQuarantined",
            AuditAction::TransferRejected => "TransferRejected",
            AuditAction::EgressAuthorized => "EgressAuthorized",
            AuditAction::EgressDenied => "EgressDenied",
            AuditAction::MembershipChanged => "MembershipChanged",
            AuditAction::ProjectFrozen => "ProjectFrozen",
            AuditAction::ProjectRestored => "ProjectRestored",
            AuditAction::PermissionViolation => "PermissionViolation",
            AuditAction::FrozenAccessAttempt => "FrozenAccessAttempt",
            AuditAction::SessionOpened => "SessionOpened",
            AuditAction::SessionClosed => "SessionClosed",
            AuditAction::JournalCorrupt => "JournalCorrupt",
        }
    }
}

impl fmt::Display for AuditAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AuditAction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AuditAction::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown audit action '{s}'"))
    }
}

/// One chained record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub actor: String,
    pub project_id: Option<String>,
    pub action: AuditAction,
    pub detail: BTreeMap<String, String>,
    pub prev_hash: String,
    pub this_hash: String,
}

/// The writable fields of an event; seq and hashes are assigned on append.
#[derive(Debug, Clone)]
pub struct EventDraft {
    pub actor: String,
    pub project_id: Option<String>,
    pub action: AuditAction,
    pub detail: BTreeMap<String, String>,
}

impl EventDraft {
    pub fn new(actor: impl Into<String>, action: AuditAction) -> Self {
        Self {
            actor: actor.into(),
            project_id: None,
            action,
            detail: BTreeMap::new(),
        }
    }

    pub fn system(action: AuditAction) -> Self {
        Self::new("system", action)
    }

    pub fn project(mut self, project_id: impl Into<String>) -> Self {
        self.project_id = Some(project_id.into());
        self
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.detail.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit log io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("audit log corrupt at line {line}: {reason}")]
    Corrupt { line: u64, reason: String },
    #[error("audit log tampering detected at seq {0}")]
    Tampered(u64),
}

/// Outcome of a full-chain verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainStatus {
    Valid { events: u64 },
    FirstBadSeq(u64),
}

/// Conjunctive query over the log.
#[derive(Debug, Clone, Default)]
pub struct EventFilter {
    pub project_id: Option<String>,
    pub actor: Option<String>,
    pub action: Option<AuditAction>,
    pub since: Option<DateTime<Utc>>,
    pub until: Option<DateTime<Utc>>,
    /// Matches events whose detail map contains this exact key=value pair.
    pub detail: Option<(String, String)>,
}

impl EventFilter {
    fn matches(&self, ev: &AuditEvent) -> bool {
        if let Some(p) = &self.project_id {
            if ev.project_id.as_deref() != Some(p.as_str()) {
                return false;
            }
        }
        if let Some(a) = &self.actor {
            if &ev.actor != a {
                return false;
            }
        }
        if let Some(act) = self.action {
            if ev.action != act {
                return false;
            }
        }
        if let Some(s) = self.since {
            if ev.timestamp < s {
                return false;
            }
        }
        if let Some(u) = self.until {
            if ev.timestamp > u {
                return false;
            }
        }
        if let Some((k, v)) = &self.detail {
            if ev.detail.get(k) != Some(v) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug)]
struct WriterState {
    file: File,
    next_seq: u64,
    prev_hash: String,
}

/// The deployment-wide audit log. One instance per log file; appends are
/// serialized, queries read a consistent prefix.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    writer: Mutex<WriterState>,
}

fn format_ts(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Micros, true)
}

/// Bytes hashed for a record: everything up to and excluding `this_hash`.
fn record_prefix(
    seq: u64,
    timestamp: &str,
    actor: &str,
    project_id: Option<&str>,
    action: AuditAction,
    detail: &BTreeMap<String, String>,
    prev_hash: &str,
) -> String {
    let mut line = String::new();
    line.push_str(&seq.to_string());
    line.push(SEP);
    line.push_str(timestamp);
    line.push(SEP);
    line.push_str(&escape(actor));
    line.push(SEP);
    line.push_str(&escape(project_id.unwrap_or("")));
    line.push(SEP);
    line.push_str(action.as_str());
    line.push(SEP);
    for (k, v) in detail {
        line.push_str(&escape(k));
        line.push('=');
        line.push_str(&escape(v));
        line.push(SEP);
    }
    line.push_str(prev_hash);
    line.push(SEP);
    line
}

fn parse_line(line: &str, lineno: u64) -> Result<AuditEvent, AuditError> {
    let corrupt = |reason: &str| AuditError::Corrupt {
        line: lineno,
        reason: reason.to_string(),
    };
    let fields: Vec<&str> = line.split(SEP).collect();
    if fields.len() < 7 {
        return Err(corrupt("too few fields"));
    }
    let seq: u64 = fields[0].parse().map_err(|_| corrupt("bad seq"))?;
    let timestamp = DateTime::parse_from_rfc3339(fields[1])
        .map_err(|_| corrupt("bad timestamp"))?
        .with_timezone(&Utc);
    let actor = unescape(fields[2]).ok_or_else(|| corrupt("bad actor escape"))?;
    let project_raw = unescape(fields[3]).ok_or_else(|| corrupt("bad project escape"))?;
    let project_id = if project_raw.is_empty() {
        None
    } else {
        Some(project_raw)
    };
    let action: AuditAction = fields[4].parse().map_err(|_| corrupt("bad action"))?;
    let mut detail = BTreeMap::new();
    for pair in &fields[5..fields.len() - 2] {
        let (k, v) = pair.split_once('=').ok_or_else(|| corrupt("bad detail pair"))?;
        detail.insert(
            unescape(k).ok_or_else(|| corrupt("bad detail key escape"))?,
            unescape(v).ok_or_else(|| corrupt("bad detail value escape"))?,
        );
    }
    let prev_hash = fields[fields.len() - 2].to_string();
    let this_hash = fields[fields.len() - 1].to_string();
    if prev_hash.len() != 64 || this_hash.len() != 64 {
        return Err(corrupt("bad hash length"));
    }
    Ok(AuditEvent {
        seq,
        timestamp,
        actor,
        project_id,
        action,
        detail,
        prev_hash,
        this_hash,
    })
}

fn event_line(ev: &AuditEvent) -> String {
    let mut line = record_prefix(
        ev.seq,
        &format_ts(ev.timestamp),
        &ev.actor,
        ev.project_id.as_deref(),
        ev.action,
        &ev.detail,
        &ev.prev_hash,
    );
    line.push_str(&ev.this_hash);
    line
}

/// Check one parsed event against its position and predecessor hash.
/// The stored hash must equal the recomputation over the raw line bytes
/// (everything before the final 64 hex characters).
fn verify_record(raw_line: &[u8], ev: &AuditEvent, expect_seq: u64, prev: &str) -> bool {
    if ev.seq != expect_seq || ev.prev_hash != prev {
        return false;
    }
    let split_at = match raw_line.len().checked_sub(64) {
        Some(n) => n,
        None => return false,
    };
    let (prefix, stored) = raw_line.split_at(split_at);
    sha256_hex(prefix).as_bytes() == stored
}

/// Split log bytes into lines; the bool marks a complete (newline-closed)
/// line. Byte-level so that tampering which breaks UTF-8 is still locatable.
fn log_lines(bytes: &[u8]) -> impl Iterator<Item = (bool, &[u8])> {
    bytes.split_inclusive(|b| *b == b'\n').map(|chunk| {
        match chunk.last() {
            Some(b'\n') => (true, &chunk[..chunk.len() - 1]),
            _ => (false, chunk),
        }
    })
}

impl AuditLog {
    /// Open (or create) the log at `path`. Replays the chain to find the
    /// tail. A torn final record — the residue of a crash mid-append — is
    /// truncated away; corruption anywhere earlier refuses to open.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, AuditError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let bytes = if path.exists() { fs::read(&path)? } else { Vec::new() };

        let mut next_seq = 0u64;
        let mut prev_hash = ZERO_HASH.to_string();
        let mut good_bytes = 0usize;
        let mut bad: Option<(u64, usize)> = None;

        for (complete, line) in log_lines(&bytes) {
            let chunk_len = line.len() + usize::from(complete);
            let ok = complete
                && match std::str::from_utf8(line).ok().map(|s| parse_line(s, next_seq)) {
                    Some(Ok(ev)) if verify_record(line, &ev, next_seq, &prev_hash) => {
                        prev_hash = ev.this_hash;
                        true
                    }
                    _ => false,
                };
            if ok {
                next_seq += 1;
                good_bytes += chunk_len;
            } else {
                bad = Some((next_seq, chunk_len));
                break;
            }
        }

        if let Some((at_seq, residue_len)) = bad {
            // Only a trailing partial record is repairable; anything with
            // more bytes after it is tampering, not a torn write.
            if good_bytes + residue_len < bytes.len() {
                return Err(AuditError::Tampered(at_seq));
            }
            let f = OpenOptions::new().write(true).open(&path)?;
            f.set_len(good_bytes as u64)?;
            f.sync_data()?;
        }

        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            writer: Mutex::new(WriterState {
                file,
                next_seq,
                prev_hash,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Assign the next seq, chain the hashes, and persist durably before
    /// returning the completed event.
    pub fn append(&self, draft: EventDraft) -> Result<AuditEvent, AuditError> {
        self.append_at(draft, Utc::now())
    }

    /// `append` with an explicit timestamp.
    pub fn append_at(&self, draft: EventDraft, now: DateTime<Utc>) -> Result<AuditEvent, AuditError> {
        let mut w = self.writer.lock().expect("audit writer poisoned");
        let ts = format_ts(now);
        let prefix = record_prefix(
            w.next_seq,
            &ts,
            &draft.actor,
            draft.project_id.as_deref(),
            draft.action,
            &draft.detail,
            &w.prev_hash,
        );
        let this_hash = sha256_hex(prefix.as_bytes());
        let mut line = prefix;
        line.push_str(&this_hash);
        line.push('\n');
        w.file.write_all(line.as_bytes())?;
        w.file.sync_data()?;

        let event = AuditEvent {
            seq: w.next_seq,
            timestamp: DateTime::parse_from_rfc3339(&ts).unwrap().with_timezone(&Utc),
            actor: draft.actor,
            project_id: draft.project_id,
            action: draft.action,
            detail: draft.detail,
            prev_hash: w.prev_hash.clone(),
            this_hash: this_hash.clone(),
        };
        w.next_seq += 1;
        w.prev_hash = this_hash;
        Ok(event)
    }

    /// Recompute every hash from the file. Reports the smallest seq whose
    /// record fails to parse, chain, or re-hash.
    pub fn verify_chain(&self) -> Result<ChainStatus, AuditError> {
        Self::verify_file(&self.path)
    }

    /// Chain verification against an arbitrary log file; usable by an
    /// independent checker with no open log handle.
    pub fn verify_file(path: &Path) -> Result<ChainStatus, AuditError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(ChainStatus::Valid { events: 0 });
            }
            Err(e) => return Err(e.into()),
        };
        let mut expect_seq = 0u64;
        let mut prev = ZERO_HASH.to_string();
        for (complete, line) in log_lines(&bytes) {
            if !complete {
                return Ok(ChainStatus::FirstBadSeq(expect_seq));
            }
            match std::str::from_utf8(line).ok().map(|s| parse_line(s, expect_seq)) {
                Some(Ok(ev)) if verify_record(line, &ev, expect_seq, &prev) => {
                    prev = ev.this_hash;
                    expect_seq += 1;
                }
                _ => return Ok(ChainStatus::FirstBadSeq(expect_seq)),
            }
        }
        Ok(ChainStatus::Valid { events: expect_seq })
    }

    /// Matching events in seq order. Reads the file fresh, so it sees a
    /// consistent prefix of any concurrent appends; a torn trailing record
    /// is treated as not-yet-written.
    pub fn query(&self, filter: &EventFilter) -> Result<Vec<AuditEvent>, AuditError> {
        Self::query_file(&self.path, filter)
    }

    /// Read-only query against a log file, with no open handle and no
    /// startup repair side effects.
    pub fn query_file(path: &Path, filter: &EventFilter) -> Result<Vec<AuditEvent>, AuditError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        let mut lineno = 0u64;
        for (complete, line) in log_lines(&bytes) {
            if !complete {
                break;
            }
            let line = std::str::from_utf8(line).map_err(|_| AuditError::Corrupt {
                line: lineno,
                reason: "not utf-8".into(),
            })?;
            let ev = parse_line(line, lineno)?;
            lineno += 1;
            if filter.matches(&ev) {
                out.push(ev);
            }
        }
        Ok(out)
    }

    /// Number of durable events.
    pub fn len(&self) -> u64 {
        self.writer.lock().expect("audit writer poisoned").next_seq
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Re-render a parsed event to its exact line bytes (without newline).
/// Intended for independent verifiers and tests.
pub fn render_event(ev: &AuditEvent) -> String {
    event_line(ev)
}

/// Truncate the final `n` bytes from a log file. Test hook for torn-write
/// recovery; not used by production paths.
pub fn truncate_tail(path: &Path, n: u64) -> std::io::Result<()> {
    let mut f = OpenOptions::new().write(true).open(path)?;
    let len = f.metadata()?.len();
    f.set_len(len.saturating_sub(n))?;
    f.seek(SeekFrom::End(0)).map(|_| ())
}
