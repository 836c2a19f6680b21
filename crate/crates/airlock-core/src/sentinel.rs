//! Directory permission isolation auditing: verify that project tops are
//! service-owned, group-held, mode 750 with only declared inner data
//! directories; flag world-writable bits anywhere; and diff live trees
//! against recorded baselines, where any drift on a frozen tree is an alert.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::os::unix::fs::MetadataExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::audit::{AuditAction, AuditError, AuditLog, EventDraft};
use crate::record;

/// Required mode for a project top-level directory.
pub const TOP_DIR_MODE: u32 = 0o750;

/// Declared isolation layout for one project tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermissionPolicy {
    pub project_id: String,
    /// Must be owner `owner_id`, group `expected_group`, mode exactly 750.
    pub top_dirs: Vec<PathBuf>,
    /// The only places members may put files.
    pub data_dirs: Vec<PathBuf>,
    pub expected_group: u32,
    /// The "service root" owner; configurable so audits run unprivileged.
    pub owner_id: u32,
}

impl PermissionPolicy {
    /// Every data_dir must sit under some top_dir.
    pub fn validate(&self) -> Result<(), SentinelError> {
        for d in &self.data_dirs {
            if !self.top_dirs.iter().any(|t| d.starts_with(t) && d != t) {
                return Err(SentinelError::BadPolicy {
                    project_id: self.project_id.clone(),
                    reason: format!("data_dir {} is not under any top_dir", d.display()),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FindingKind {
    WrongMode { actual: u32, expected: u32 },
    WrongOwner { actual: u32, expected: u32 },
    WrongGroup { actual: u32, expected: u32 },
    WorldWritable,
    UnexpectedTopLevelEntry,
    FrozenTreeModified,
    /// An entry the policy or baseline expects is gone.
    MissingEntry,
    /// Subtree could not be read; audit continued around it.
    Unreadable { reason: String },
}

impl FindingKind {
    fn rank(&self) -> u8 {
        match self {
            FindingKind::WrongMode { .. } => 0,
            FindingKind::WrongOwner { .. } => 1,
            FindingKind::WrongGroup { .. } => 2,
            FindingKind::WorldWritable => 3,
            FindingKind::UnexpectedTopLevelEntry => 4,
            FindingKind::FrozenTreeModified => 5,
            FindingKind::MissingEntry => 6,
            FindingKind::Unreadable { .. } => 7,
        }
    }
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FindingKind::WrongMode { actual, expected } => {
                write!(f, "wrong-mode actual={actual:o} expected={expected:o}")
            }
            FindingKind::WrongOwner { actual, expected } => {
                write!(f, "wrong-owner actual={actual} expected={expected}")
            }
            FindingKind::WrongGroup { actual, expected } => {
                write!(f, "wrong-group actual={actual} expected={expected}")
            }
            FindingKind::WorldWritable => write!(f, "world-writable"),
            FindingKind::UnexpectedTopLevelEntry => write!(f, "unexpected-top-level-entry"),
            FindingKind::FrozenTreeModified => write!(f, "frozen-tree-modified"),
            FindingKind::MissingEntry => write!(f, "missing-entry"),
            FindingKind::Unreadable { reason } => write!(f, "unreadable ({reason})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Alert,
    Warn,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Alert => "alert",
            Severity::Warn => "warn",
        })
    }
}

/// One detected deviation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub path: PathBuf,
    pub kind: FindingKind,
    pub severity: Severity,
}

impl Finding {
    fn alert(path: PathBuf, kind: FindingKind) -> Self {
        Self {
            path,
            kind,
            severity: Severity::Alert,
        }
    }

    fn warn(path: PathBuf, kind: FindingKind) -> Self {
        Self {
            path,
            kind,
            severity: Severity::Warn,
        }
    }
}

fn sort_findings(findings: &mut Vec<Finding>) {
    findings.sort_by(|a, b| a.path.cmp(&b.path).then(a.kind.rank().cmp(&b.kind.rank())));
}

#[derive(Debug, Error)]
pub enum SentinelError {
    #[error("io failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("policy invalid for project '{project_id}': {reason}")]
    BadPolicy { project_id: String, reason: String },
    #[error(transparent)]
    Audit(#[from] AuditError),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> SentinelError + '_ {
    move |source| SentinelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One filesystem entry as the sentinel sees it; paths are relative to the
/// audited root, "." for the root itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FsEntry {
    pub rel_path: String,
    pub owner: u32,
    pub group: u32,
    pub mode: u32,
    pub is_dir: bool,
}

/// Walk a tree into sorted entries. `tolerate` collects unreadable subtrees
/// as Warn findings instead of failing the walk.
fn walk_entries(
    root: &Path,
    tolerate: Option<&mut Vec<Finding>>,
) -> Result<Vec<FsEntry>, SentinelError> {
    let mut entries = Vec::new();
    let mut warnings = tolerate;
    for item in walkdir::WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let item = match item {
            Ok(i) => i,
            Err(e) => {
                let path = e
                    .path()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| root.to_path_buf());
                match warnings.as_deref_mut() {
                    Some(w) => {
                        w.push(Finding::warn(
                            path,
                            FindingKind::Unreadable {
                                reason: e.to_string(),
                            },
                        ));
                        continue;
                    }
                    None => {
                        return Err(SentinelError::Io {
                            path,
                            source: io::Error::other(e),
                        })
                    }
                }
            }
        };
        let meta = match item.metadata() {
            Ok(m) => m,
            Err(e) => {
                match warnings.as_deref_mut() {
                    Some(w) => {
                        w.push(Finding::warn(
                            item.path().to_path_buf(),
                            FindingKind::Unreadable {
                                reason: e.to_string(),
                            },
                        ));
                        continue;
                    }
                    None => {
                        return Err(SentinelError::Io {
                            path: item.path().to_path_buf(),
                            source: io::Error::other(e),
                        })
                    }
                }
            }
        };
        let rel = item
            .path()
            .strip_prefix(root)
            .expect("walk stays under root");
        let rel = if rel.as_os_str().is_empty() {
            ".".to_string()
        } else {
            rel.to_string_lossy().into_owned()
        };
        entries.push(FsEntry {
            rel_path: rel,
            owner: meta.uid(),
            group: meta.gid(),
            mode: meta.mode() & 0o7777,
            is_dir: meta.is_dir(),
        });
    }
    entries.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    Ok(entries)
}

/// Pure policy check over a walked entry list. Public so independent
/// checkers and tests can drive it with synthetic trees, including owners
/// and groups no unprivileged test could create on a real filesystem.
pub fn classify_entries(
    policy: &PermissionPolicy,
    root: &Path,
    entries: &[FsEntry],
) -> Vec<Finding> {
    let mut findings = Vec::new();
    let by_abs: BTreeMap<PathBuf, &FsEntry> = entries
        .iter()
        .map(|e| {
            let abs = if e.rel_path == "." {
                root.to_path_buf()
            } else {
                root.join(&e.rel_path)
            };
            (abs, e)
        })
        .collect();

    for top in &policy.top_dirs {
        match by_abs.get(top) {
            None => findings.push(Finding::alert(top.clone(), FindingKind::MissingEntry)),
            Some(e) => {
                if e.mode != TOP_DIR_MODE {
                    findings.push(Finding::alert(
                        top.clone(),
                        FindingKind::WrongMode {
                            actual: e.mode,
                            expected: TOP_DIR_MODE,
                        },
                    ));
                }
                if e.owner != policy.owner_id {
                    findings.push(Finding::alert(
                        top.clone(),
                        FindingKind::WrongOwner {
                            actual: e.owner,
                            expected: policy.owner_id,
                        },
                    ));
                }
                if e.group != policy.expected_group {
                    findings.push(Finding::alert(
                        top.clone(),
                        FindingKind::WrongGroup {
                            actual: e.group,
                            expected: policy.expected_group,
                        },
                    ));
                }
            }
        }
    }

    for (abs, e) in &by_abs {
        if e.mode & 0o002 != 0 {
            findings.push(Finding::alert(abs.clone(), FindingKind::WorldWritable));
        }
        // Direct children of a top dir must be declared.
        if let Some(parent) = abs.parent() {
            if policy.top_dirs.iter().any(|t| t == parent) {
                let declared = policy.data_dirs.iter().any(|d| d == abs)
                    || policy.top_dirs.iter().any(|t| t == abs);
                if !declared {
                    findings.push(Finding::alert(
                        abs.clone(),
                        FindingKind::UnexpectedTopLevelEntry,
                    ));
                }
            }
        }
    }

    sort_findings(&mut findings);
    findings
}

/// Deterministic, sorted snapshot of a tree's structure and attributes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Baseline {
    pub root: PathBuf,
    pub entries: Vec<FsEntry>,
}

impl Baseline {
    pub fn capture(root: &Path) -> io::Result<Self> {
        let entries = walk_entries(root, None).map_err(|e| match e {
            SentinelError::Io { source, .. } => source,
            other => io::Error::other(other.to_string()),
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn render(&self) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> = vec![(
            "root".into(),
            self.root.to_string_lossy().into_owned(),
        )];
        for e in &self.entries {
            pairs.push((
                "entry".into(),
                format!(
                    "{}\t{}\t{}\t{:o}\t{}",
                    record::escape(&e.rel_path),
                    e.owner,
                    e.group,
                    e.mode,
                    if e.is_dir { "d" } else { "f" }
                ),
            ));
        }
        pairs
    }

    pub fn save(&self, baselines_dir: &Path, project_id: &str) -> io::Result<PathBuf> {
        fs::create_dir_all(baselines_dir)?;
        let path = baselines_dir.join(project_id);
        record::write_atomic(&path, &self.render())?;
        Ok(path)
    }

    pub fn load(baselines_dir: &Path, project_id: &str) -> io::Result<Self> {
        let path = baselines_dir.join(project_id);
        let pairs = record::read(&path)?;
        let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
        let root = PathBuf::from(record::get(&pairs, "root").ok_or_else(|| bad("missing root"))?);
        let mut entries = Vec::new();
        for value in record::get_all(&pairs, "entry") {
            let parts: Vec<&str> = value.splitn(5, '\t').collect();
            if parts.len() != 5 {
                return Err(bad("bad entry line"));
            }
            entries.push(FsEntry {
                rel_path: record::unescape(parts[0]).ok_or_else(|| bad("bad entry path"))?,
                owner: parts[1].parse().map_err(|_| bad("bad owner"))?,
                group: parts[2].parse().map_err(|_| bad("bad group"))?,
                mode: u32::from_str_radix(parts[3], 8).map_err(|_| bad("bad mode"))?,
                is_dir: parts[4] == "d",
            });
        }
        Ok(Self { root, entries })
    }
}

/// Diff a recorded baseline against the live tree. On a frozen tree any
/// difference at all is a FrozenTreeModified alert; otherwise attribute
/// changes alert, additions inside declared data dirs are user churn and
/// stay silent, and anything else added or removed alerts.
pub fn diff_baseline(
    baseline: &Baseline,
    root: &Path,
    frozen: bool,
    policy: Option<&PermissionPolicy>,
) -> Result<Vec<Finding>, SentinelError> {
    let current = Baseline::capture(root).map_err(io_at(root))?;
    Ok(diff_entries(baseline, &current, frozen, policy))
}

/// Pure diff over two snapshots; see [`diff_baseline`].
pub fn diff_entries(
    old: &Baseline,
    new: &Baseline,
    frozen: bool,
    policy: Option<&PermissionPolicy>,
) -> Vec<Finding> {
    let root = &new.root;
    let abs = |rel: &str| {
        if rel == "." {
            root.clone()
        } else {
            root.join(rel)
        }
    };
    let in_data_dir = |p: &Path| {
        policy
            .map(|pol| pol.data_dirs.iter().any(|d| p.starts_with(d) && p != d))
            .unwrap_or(false)
    };

    let old_map: BTreeMap<&str, &FsEntry> =
        old.entries.iter().map(|e| (e.rel_path.as_str(), e)).collect();
    let new_map: BTreeMap<&str, &FsEntry> =
        new.entries.iter().map(|e| (e.rel_path.as_str(), e)).collect();

    let mut findings = Vec::new();
    for (rel, oe) in &old_map {
        let path = abs(rel);
        match new_map.get(rel) {
            None => {
                if frozen {
                    findings.push(Finding::alert(path, FindingKind::FrozenTreeModified));
                } else {
                    findings.push(Finding::alert(path, FindingKind::MissingEntry));
                }
            }
            Some(ne) if ne.is_dir != oe.is_dir => {
                if frozen {
                    findings.push(Finding::alert(path, FindingKind::FrozenTreeModified));
                } else {
                    findings.push(Finding::alert(path, FindingKind::UnexpectedTopLevelEntry));
                }
            }
            Some(ne) => {
                if frozen {
                    if ne.mode != oe.mode || ne.owner != oe.owner || ne.group != oe.group {
                        findings.push(Finding::alert(path, FindingKind::FrozenTreeModified));
                    }
                    continue;
                }
                if ne.mode != oe.mode {
                    findings.push(Finding::alert(
                        path.clone(),
                        FindingKind::WrongMode {
                            actual: ne.mode,
                            expected: oe.mode,
                        },
                    ));
                }
                if ne.owner != oe.owner {
                    findings.push(Finding::alert(
                        path.clone(),
                        FindingKind::WrongOwner {
                            actual: ne.owner,
                            expected: oe.owner,
                        },
                    ));
                }
                if ne.group != oe.group {
                    findings.push(Finding::alert(
                        path.clone(),
                        FindingKind::WrongGroup {
                            actual: ne.group,
                            expected: oe.group,
                        },
                    ));
                }
            }
        }
    }
    for (rel, _) in &new_map {
        if old_map.contains_key(rel) {
            continue;
        }
        let path = abs(rel);
        if frozen {
            findings.push(Finding::alert(path, FindingKind::FrozenTreeModified));
        } else if !in_data_dir(&path) {
            findings.push(Finding::alert(path, FindingKind::UnexpectedTopLevelEntry));
        }
    }
    sort_findings(&mut findings);
    findings
}

/// The auditing service: walks trees, emits PermissionViolation events for
/// alerts, and FrozenAccessAttempt events for frozen-tree drift.
pub struct Sentinel {
    baselines_dir: PathBuf,
    policies_dir: PathBuf,
    audit: Arc<AuditLog>,
}

impl Sentinel {
    pub fn open(
        layout: &crate::domain::ZoneLayout,
        audit: Arc<AuditLog>,
    ) -> Result<Self, SentinelError> {
        let baselines_dir = layout.baselines_dir();
        fs::create_dir_all(&baselines_dir).map_err(io_at(&baselines_dir))?;
        let policies_dir = layout.policies_dir();
        fs::create_dir_all(&policies_dir).map_err(io_at(&policies_dir))?;
        Ok(Self {
            baselines_dir,
            policies_dir,
            audit,
        })
    }

    pub fn baselines_dir(&self) -> &Path {
        &self.baselines_dir
    }

    /// Walk `root` against `policy`; zero findings iff the tree conforms.
    /// Unreadable subtrees become Warn findings and do not stop the walk.
    /// Every Alert emits a PermissionViolation event.
    pub fn audit_tree(
        &self,
        policy: &PermissionPolicy,
        root: &Path,
    ) -> Result<Vec<Finding>, SentinelError> {
        policy.validate()?;
        let mut findings = Vec::new();
        let entries = walk_entries(root, Some(&mut findings))?;
        findings.extend(classify_entries(policy, root, &entries));
        sort_findings(&mut findings);
        for f in findings.iter().filter(|f| f.severity == Severity::Alert) {
            self.audit.append(
                EventDraft::system(AuditAction::PermissionViolation)
                    .project(policy.project_id.clone())
                    .with("path", f.path.to_string_lossy())
                    .with("kind", f.kind.to_string()),
            )?;
        }
        Ok(findings)
    }

    /// Snapshot and persist the baseline for a project tree.
    pub fn snapshot_baseline(
        &self,
        project_id: &str,
        root: &Path,
    ) -> Result<Baseline, SentinelError> {
        let baseline = Baseline::capture(root).map_err(io_at(root))?;
        baseline
            .save(&self.baselines_dir, project_id)
            .map_err(io_at(&self.baselines_dir))?;
        Ok(baseline)
    }

    pub fn load_baseline(&self, project_id: &str) -> Result<Baseline, SentinelError> {
        Baseline::load(&self.baselines_dir, project_id).map_err(io_at(&self.baselines_dir))
    }

    /// Diff the stored baseline against the live tree; on frozen trees each
    /// drift emits a FrozenAccessAttempt event.
    pub fn check_baseline(
        &self,
        project_id: &str,
        root: &Path,
        frozen: bool,
        policy: Option<&PermissionPolicy>,
    ) -> Result<Vec<Finding>, SentinelError> {
        let baseline = self.load_baseline(project_id)?;
        let findings = diff_baseline(&baseline, root, frozen, policy)?;
        if frozen {
            for f in &findings {
                if f.kind == FindingKind::FrozenTreeModified {
                    self.audit.append(
                        EventDraft::system(AuditAction::FrozenAccessAttempt)
                            .project(project_id)
                            .with("path", f.path.to_string_lossy()),
                    )?;
                }
            }
        } else {
            for f in findings.iter().filter(|f| f.severity == Severity::Alert) {
                self.audit.append(
                    EventDraft::system(AuditAction::PermissionViolation)
                        .project(project_id)
                        .with("path", f.path.to_string_lossy())
                        .with("kind", f.kind.to_string()),
                )?;
            }
        }
        Ok(findings)
    }

    /// Load every policy file under `state_root/policies/`.
    pub fn load_policies(&self) -> Result<Vec<PermissionPolicy>, SentinelError> {
        let mut out = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for entry in fs::read_dir(&self.policies_dir).map_err(io_at(&self.policies_dir))? {
            let entry = entry.map_err(io_at(&self.policies_dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') && entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
                names.push(name);
            }
        }
        names.sort();
        for name in names {
            out.push(self.load_policy(&name)?);
        }
        Ok(out)
    }

    pub fn load_policy(&self, project_id: &str) -> Result<PermissionPolicy, SentinelError> {
        let path = self.policies_dir.join(project_id);
        let pairs = record::read(&path).map_err(io_at(&path))?;
        let bad = |reason: &str| SentinelError::BadPolicy {
            project_id: project_id.to_string(),
            reason: reason.to_string(),
        };
        let policy = PermissionPolicy {
            project_id: project_id.to_string(),
            top_dirs: record::get_all(&pairs, "top_dir")
                .into_iter()
                .map(PathBuf::from)
                .collect(),
            data_dirs: record::get_all(&pairs, "data_dir")
                .into_iter()
                .map(PathBuf::from)
                .collect(),
            expected_group: record::get(&pairs, "group")
                .ok_or_else(|| bad("missing group"))?
                .parse()
                .map_err(|_| bad("bad group"))?,
            owner_id: record::get(&pairs, "owner_id")
                .ok_or_else(|| bad("missing owner_id"))?
                .parse()
                .map_err(|_| bad("bad owner_id"))?,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn save_policy(&self, policy: &PermissionPolicy) -> Result<(), SentinelError> {
        policy.validate()?;
        let mut pairs: Vec<(String, String)> = Vec::new();
        for t in &policy.top_dirs {
            pairs.push(("top_dir".into(), t.to_string_lossy().into_owned()));
        }
        for d in &policy.data_dirs {
            pairs.push(("data_dir".into(), d.to_string_lossy().into_owned()));
        }
        pairs.push(("group".into(), policy.expected_group.to_string()));
        pairs.push(("owner_id".into(), policy.owner_id.to_string()));
        let path = self.policies_dir.join(&policy.project_id);
        record::write_atomic(&path, &pairs).map_err(io_at(&path))
    }
}
