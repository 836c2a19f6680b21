//! Shared vocabulary: principals, roles, projects, and the three-root zone
//! layout every other module operates over.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

/// Fixed directory names of the four transfer zones. These are part of the
/// on-disk protocol and must match byte for byte.
pub const INBOX_OUTSIDE: &str = "inbox-outside";
pub const OUTBOX_OUTSIDE: &str = "outbox-outside";
pub const INBOX_INSIDE: &str = "inbox-inside";
pub const OUTBOX_INSIDE: &str = "outbox-inside";

/// A person known to the deployment. `us_person` is attested at membership
/// time; no identity-verification workflow exists here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub id: String,
    pub display_name: String,
    pub us_person: bool,
}

impl Principal {
    pub fn new(id: impl Into<String>, display_name: impl Into<String>, us_person: bool) -> Self {
        Self {
            id: id.into(),
            display_name: display_name.into(),
            us_person,
        }
    }
}

/// Project-scoped roles, except `SystemAdmin` which is global: holding it on
/// any project record grants it everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Member,
    DataSteward,
    EcoAdmin,
    SystemAdmin,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Member => "Member",
            Role::DataSteward => "DataSteward",
            Role::EcoAdmin => "EcoAdmin",
            Role::SystemAdmin => "SystemAdmin",
        })
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Member" => Ok(Role::Member),
            "DataSteward" => Ok(Role::DataSteward),
            "EcoAdmin" => Ok(Role::EcoAdmin),
            "SystemAdmin" => Ok(Role::SystemAdmin),
            other => Err(format!("unknown role '{other}'")),
        }
    }
}

/// Whether a project's data is live or locked down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectState {
    Active,
    Frozen,
}

impl fmt::Display for ProjectState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectState::Active => "Active",
            ProjectState::Frozen => "Frozen",
        })
    }
}

impl FromStr for ProjectState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Active" => Ok(ProjectState::Active),
            "Frozen" => Ok(ProjectState::Frozen),
            other => Err(format!("unknown project state '{other}'")),
        }
    }
}

/// One member's entry in a project: roles plus the us-person attestation
/// captured when membership was granted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Membership {
    pub roles: BTreeSet<Role>,
    pub us_person: bool,
    pub display_name: String,
}

/// A project and its membership. Mutation goes through the access-control
/// store; values in hand are immutable snapshots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectRecord {
    pub project_id: String,
    pub name: String,
    pub members: BTreeMap<String, Membership>,
    pub access_state: ProjectState,
    pub data_root: PathBuf,
}

impl ProjectRecord {
    pub fn roles_of(&self, principal: &str) -> BTreeSet<Role> {
        self.members
            .get(principal)
            .map(|m| m.roles.clone())
            .unwrap_or_default()
    }

    pub fn has_role(&self, principal: &str, role: Role) -> bool {
        self.members
            .get(principal)
            .map(|m| m.roles.contains(&role))
            .unwrap_or(false)
    }

    pub fn is_member(&self, principal: &str) -> bool {
        self.members
            .get(principal)
            .map(|m| !m.roles.is_empty())
            .unwrap_or(false)
    }
}

/// Which of the three roots a path belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    Outside,
    Inside,
    State,
}

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("layout root missing or not a directory: {0}")]
    MissingRoot(PathBuf),
    #[error("layout roots overlap: {0} and {1}")]
    OverlappingRoots(PathBuf, PathBuf),
}

/// The three pairwise-disjoint directory roots an airlock deployment runs
/// over: the outside landing zone (fronted by SFTP or similar), the inside
/// enclave, and the state root holding journal, quarantine, and audit log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZoneLayout {
    pub sftp_root: PathBuf,
    pub inside_root: PathBuf,
    pub state_root: PathBuf,
}

impl ZoneLayout {
    pub fn new(
        sftp_root: impl Into<PathBuf>,
        inside_root: impl Into<PathBuf>,
        state_root: impl Into<PathBuf>,
    ) -> Self {
        Self {
            sftp_root: sftp_root.into(),
            inside_root: inside_root.into(),
            state_root: state_root.into(),
        }
    }

    /// Success iff all three roots exist, are directories, and are pairwise
    /// non-overlapping (no root is a prefix of another).
    pub fn validate(&self) -> Result<(), LayoutError> {
        let roots = [&self.sftp_root, &self.inside_root, &self.state_root];
        for root in roots {
            if !root.is_dir() {
                return Err(LayoutError::MissingRoot(root.clone()));
            }
        }
        for i in 0..roots.len() {
            for j in (i + 1)..roots.len() {
                if roots[i].starts_with(roots[j]) || roots[j].starts_with(roots[i]) {
                    return Err(LayoutError::OverlappingRoots(
                        roots[i].clone(),
                        roots[j].clone(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Classify a path into its zone by longest-prefix match against the
    /// three roots. `None` for paths outside the deployment entirely.
    pub fn classify(&self, path: &Path) -> Option<Zone> {
        let candidates = [
            (Zone::Outside, &self.sftp_root),
            (Zone::Inside, &self.inside_root),
            (Zone::State, &self.state_root),
        ];
        candidates
            .into_iter()
            .filter(|(_, root)| path.starts_with(root))
            .max_by_key(|(_, root)| root.components().count())
            .map(|(zone, _)| zone)
    }

    /// Directory holding per-user source dirs for a direction.
    pub fn source_zone_dir(&self, direction: crate::transfer::TransferDirection) -> PathBuf {
        match direction {
            crate::transfer::TransferDirection::Ingress => self.sftp_root.join(INBOX_OUTSIDE),
            crate::transfer::TransferDirection::Egress => self.inside_root.join(OUTBOX_INSIDE),
        }
    }

    /// Directory holding per-user destination dirs for a direction.
    pub fn dest_zone_dir(&self, direction: crate::transfer::TransferDirection) -> PathBuf {
        match direction {
            crate::transfer::TransferDirection::Ingress => self.inside_root.join(INBOX_INSIDE),
            crate::transfer::TransferDirection::Egress => self.sftp_root.join(OUTBOX_OUTSIDE),
        }
    }

    pub fn quarantine_dir(&self) -> PathBuf {
        self.state_root.join("quarantine")
    }

    pub fn journal_dir(&self) -> PathBuf {
        self.state_root.join("journal")
    }

    pub fn audit_log_path(&self) -> PathBuf {
        self.state_root.join("audit.log")
    }

    pub fn lock_path(&self) -> PathBuf {
        self.state_root.join("engine.lock")
    }

    pub fn projects_dir(&self) -> PathBuf {
        self.state_root.join("projects")
    }

    pub fn grants_dir(&self) -> PathBuf {
        self.state_root.join("egress-grants")
    }

    pub fn receipts_dir(&self) -> PathBuf {
        self.state_root.join("freeze")
    }

    pub fn baselines_dir(&self) -> PathBuf {
        self.state_root.join("baselines")
    }

    pub fn policies_dir(&self) -> PathBuf {
        self.state_root.join("policies")
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.state_root.join("sessions")
    }

    pub fn locks_dir(&self) -> PathBuf {
        self.state_root.join("locks")
    }

    /// Create the four zone directories if absent. Roots must already exist.
    pub fn ensure_zone_dirs(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(self.sftp_root.join(INBOX_OUTSIDE))?;
        std::fs::create_dir_all(self.sftp_root.join(OUTBOX_OUTSIDE))?;
        std::fs::create_dir_all(self.inside_root.join(INBOX_INSIDE))?;
        std::fs::create_dir_all(self.inside_root.join(OUTBOX_INSIDE))?;
        Ok(())
    }
}
