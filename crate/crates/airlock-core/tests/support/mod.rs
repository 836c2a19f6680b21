//! Shared fixtures and independent oracles for the integration suite.
//!
//! The oracles here are deliberately naive re-statements of the intended
//! behavior, written against the documented rules rather than the engine's
//! code paths, so they can catch the engine lying.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use airlock_core::audit::AuditLog;
use airlock_core::domain::ZoneLayout;
use airlock_core::fsutil::sha256_hex;
use airlock_core::scanner::EICAR_TEST_STRING;
use airlock_core::transfer::{TransferDirection, FLAG_FILE};

/// Tempdir on a memory-backed filesystem when one is available; the suite
/// fsyncs constantly and spinning-disk latencies would dominate otherwise.
pub fn fast_tempdir() -> tempfile::TempDir {
    if Path::new("/dev/shm").is_dir() {
        if let Ok(dir) = tempfile::tempdir_in("/dev/shm") {
            return dir;
        }
    }
    tempfile::tempdir().expect("tempdir")
}

pub struct Deployment {
    pub tmp: tempfile::TempDir,
    pub layout: ZoneLayout,
    pub audit: Arc<AuditLog>,
}

impl Deployment {
    pub fn new() -> Self {
        let tmp = fast_tempdir();
        let layout = ZoneLayout::new(
            tmp.path().join("sftp"),
            tmp.path().join("inside"),
            tmp.path().join("state"),
        );
        for root in [&layout.sftp_root, &layout.inside_root, &layout.state_root] {
            fs::create_dir_all(root).unwrap();
        }
        let audit = Arc::new(AuditLog::open(layout.audit_log_path()).unwrap());
        Self { tmp, layout, audit }
    }

    pub fn seed_source(&self, direction: TransferDirection, user: &str, files: &[(&str, &[u8])]) {
        let dir = self.layout.source_zone_dir(direction).join(user);
        fs::create_dir_all(&dir).unwrap();
        for (rel, content) in files {
            let p = dir.join(rel);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).unwrap();
            }
            fs::write(&p, content).unwrap();
        }
    }

    pub fn flag(&self, direction: TransferDirection, user: &str) {
        let dir = self.layout.source_zone_dir(direction).join(user);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(FLAG_FILE), b"").unwrap();
    }
}

/// Content the builtin scanner flags.
pub fn infected_content(tag: u8) -> Vec<u8> {
    let mut v = vec![b'x', tag];
    v.extend_from_slice(EICAR_TEST_STRING);
    v
}

pub fn is_infected(content: &[u8]) -> bool {
    content
        .windows(EICAR_TEST_STRING.len())
        .any(|w| w == EICAR_TEST_STRING)
}

// ---------------------------------------------------------------------------
// Reference interpreter: single-step model of one transfer cycle.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ModelUser {
    pub name: String,
    pub files: Vec<(String, Vec<u8>)>,
    pub flagged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ModelCase {
    pub users: Vec<ModelUser>,
    /// Files already sitting in per-user destination dirs before the cycle.
    pub pre_dest: Vec<(String, String, Vec<u8>)>,
}

/// Terminal filesystem state, abstracted to digests. Quarantine batches are
/// compared as sorted multisets because job ids are not predictable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelOutcome {
    pub source: BTreeMap<(String, String), String>,
    pub dest: BTreeMap<(String, String), String>,
    pub quarantine: Vec<BTreeMap<String, String>>,
}

/// The rules, stated directly: a flagged directory becomes one batch; any
/// infected file quarantines the whole batch; an all-clean batch moves into
/// the destination with `.N` collision suffixes; unflagged directories are
/// untouched.
pub fn interpret(case: &ModelCase) -> ModelOutcome {
    let mut dest: BTreeMap<(String, String), String> = BTreeMap::new();
    for (user, rel, content) in &case.pre_dest {
        dest.insert((user.clone(), rel.clone()), sha256_hex(content));
    }
    let mut source = BTreeMap::new();
    let mut quarantine = Vec::new();

    for user in &case.users {
        let mut files = user.files.clone();
        files.sort_by(|a, b| a.0.cmp(&b.0));
        if !user.flagged {
            for (rel, content) in &files {
                source.insert((user.name.clone(), rel.clone()), sha256_hex(content));
            }
            continue;
        }
        if files.iter().any(|(_, c)| is_infected(c)) {
            let batch: BTreeMap<String, String> = files
                .iter()
                .map(|(rel, c)| (rel.clone(), sha256_hex(c)))
                .collect();
            quarantine.push(batch);
            continue;
        }
        for (rel, content) in &files {
            let mut landed = rel.clone();
            let mut n = 0u64;
            while dest.contains_key(&(user.name.clone(), landed.clone())) {
                n += 1;
                landed = format!("{rel}.{n}");
            }
            dest.insert((user.name.clone(), landed), sha256_hex(content));
        }
    }
    quarantine.sort();
    ModelOutcome {
        source,
        dest,
        quarantine,
    }
}

/// Read the real filesystem back into the model's terms.
pub fn observe(layout: &ZoneLayout, direction: TransferDirection) -> ModelOutcome {
    let per_user = |zone_dir: &Path| -> BTreeMap<(String, String), String> {
        let mut out = BTreeMap::new();
        if !zone_dir.is_dir() {
            return out;
        }
        for entry in fs::read_dir(zone_dir).unwrap() {
            let entry = entry.unwrap();
            let user = entry.file_name().to_string_lossy().into_owned();
            if user.starts_with('.') || !entry.file_type().unwrap().is_dir() {
                continue;
            }
            for (rel, digest) in airlock_core::fsutil::digest_tree(&entry.path()).unwrap() {
                if rel == FLAG_FILE {
                    continue;
                }
                out.insert((user.clone(), rel), digest);
            }
        }
        out
    };

    let mut quarantine = Vec::new();
    let qroot = layout.quarantine_dir();
    if qroot.is_dir() {
        for entry in fs::read_dir(&qroot).unwrap() {
            let entry = entry.unwrap();
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') || !entry.file_type().unwrap().is_dir() {
                continue;
            }
            let batch: BTreeMap<String, String> =
                airlock_core::fsutil::digest_tree(&entry.path())
                    .unwrap()
                    .into_iter()
                    .collect();
            quarantine.push(batch);
        }
    }
    quarantine.sort();

    ModelOutcome {
        source: per_user(&layout.source_zone_dir(direction)),
        dest: per_user(&layout.dest_zone_dir(direction)),
        quarantine,
    }
}

// ---------------------------------------------------------------------------
// Brute-force permission checker, independent of the sentinel.
// ---------------------------------------------------------------------------

use airlock_core::sentinel::{FsEntry, PermissionPolicy};

/// (absolute path, kind tag) pairs, sorted. Tags match FindingKind names.
pub type OracleFindings = Vec<(PathBuf, &'static str)>;

pub fn oracle_classify(
    policy: &PermissionPolicy,
    root: &Path,
    entries: &[FsEntry],
) -> OracleFindings {
    let abs_of = |e: &FsEntry| -> PathBuf {
        if e.rel_path == "." {
            root.to_path_buf()
        } else {
            root.join(&e.rel_path)
        }
    };
    let mut out: OracleFindings = Vec::new();

    for top in &policy.top_dirs {
        if let Some(e) = entries.iter().find(|e| &abs_of(e) == top) {
            if e.mode != 0o750 {
                out.push((top.clone(), "wrong-mode"));
            }
            if e.owner != policy.owner_id {
                out.push((top.clone(), "wrong-owner"));
            }
            if e.group != policy.expected_group {
                out.push((top.clone(), "wrong-group"));
            }
        } else {
            out.push((top.clone(), "missing-entry"));
        }
    }

    for e in entries {
        let abs = abs_of(e);
        if e.mode & 0o002 != 0 {
            out.push((abs.clone(), "world-writable"));
        }
        if let Some(parent) = abs.parent() {
            let parent_is_top = policy.top_dirs.iter().any(|t| t == parent);
            let declared = policy.data_dirs.contains(&abs) || policy.top_dirs.contains(&abs);
            if parent_is_top && !declared {
                out.push((abs, "unexpected-top-level-entry"));
            }
        }
    }

    out.sort();
    out
}

/// Naive std::fs walk used so the oracle does not share the sentinel's
/// walker either. Panics on unreadable entries; generators keep trees
/// readable.
pub fn oracle_walk(root: &Path) -> Vec<FsEntry> {
    use std::os::unix::fs::MetadataExt;
    fn visit(root: &Path, dir: &Path, out: &mut Vec<FsEntry>) {
        let meta = fs::symlink_metadata(dir).unwrap();
        let rel = dir.strip_prefix(root).unwrap();
        let rel = if rel.as_os_str().is_empty() {
            ".".to_string()
        } else {
            rel.to_string_lossy().into_owned()
        };
        out.push(FsEntry {
            rel_path: rel,
            owner: meta.uid(),
            group: meta.gid(),
            mode: meta.mode() & 0o7777,
            is_dir: meta.is_dir(),
        });
        if meta.is_dir() {
            let mut children: Vec<PathBuf> =
                fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
            children.sort();
            for child in children {
                let cmeta = fs::symlink_metadata(&child).unwrap();
                if cmeta.is_dir() {
                    visit(root, &child, out);
                } else {
                    let rel = child.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.push(FsEntry {
                        rel_path: rel,
                        owner: cmeta.uid(),
                        group: cmeta.gid(),
                        mode: cmeta.mode() & 0o7777,
                        is_dir: false,
                    });
                }
            }
        }
    }
    let mut out = Vec::new();
    visit(root, root, &mut out);
    out.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    out
}

/// Map real sentinel findings into the oracle's (path, tag) vocabulary.
pub fn tag_findings(findings: &[airlock_core::sentinel::Finding]) -> OracleFindings {
    use airlock_core::sentinel::FindingKind;
    let mut out: OracleFindings = findings
        .iter()
        .filter_map(|f| {
            let tag = match &f.kind {
                FindingKind::WrongMode { .. } => "wrong-mode",
                FindingKind::WrongOwner { .. } => "wrong-owner",
                FindingKind::WrongGroup { .. } => "wrong-group",
                FindingKind::WorldWritable => "world-writable",
                FindingKind::UnexpectedTopLevelEntry => "unexpected-top-level-entry",
                FindingKind::MissingEntry => "missing-entry",
                FindingKind::FrozenTreeModified => "frozen-tree-modified",
                FindingKind::Unreadable { .. } => return None,
            };
            Some((f.path.clone(), tag))
        })
        .collect();
    out.sort();
    out
}

/// Print one pass line per criterion; the suite runs with --nocapture.
pub fn report_pass(name: &str, started: std::time::Instant) {
    println!("PASS {name} ({:.2}s)", started.elapsed().as_secs_f64());
}
