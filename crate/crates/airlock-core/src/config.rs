//! Deployment configuration: strict `key=value` file, `#` comments, unknown
//! keys rejected, documented defaults for absent keys.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::ZoneLayout;

pub const DEFAULT_POLL_INTERVAL_S: u64 = 300;
pub const DEFAULT_SENTINEL_INTERVAL_S: u64 = 3600;
pub const DEFAULT_SCAN_TIMEOUT_S: u64 = 120;

/// Which scan backend a deployment runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScannerChoice {
    Builtin,
    /// External command template containing `{file}`.
    Command(String),
}

impl fmt::Display for ScannerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScannerChoice::Builtin => f.write_str("builtin"),
            ScannerChoice::Command(tpl) => f.write_str(tpl),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub layout: ZoneLayout,
    pub poll_interval_s: u64,
    pub sentinel_interval_s: u64,
    pub scanner: ScannerChoice,
    pub scan_timeout_s: u64,
    /// Numeric owner id treated as the service root by the sentinel.
    pub service_owner_id: u32,
    /// Extra signature file for the builtin scanner, if any.
    pub signature_file: Option<PathBuf>,
    /// Root under which per-user home shares live; defaults next to the
    /// state root's sessions area.
    pub homes_root: PathBuf,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config unreadable: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error at line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("config value invalid for '{key}': {reason}")]
    InvalidValue { key: String, reason: String },
}

impl Config {
    /// Parse a config file. Required keys: `sftp_root`, `inside_root`,
    /// `state_root`. Everything else has a documented default.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut sftp_root: Option<PathBuf> = None;
        let mut inside_root: Option<PathBuf> = None;
        let mut state_root: Option<PathBuf> = None;
        let mut poll_interval_s = DEFAULT_POLL_INTERVAL_S;
        let mut sentinel_interval_s = DEFAULT_SENTINEL_INTERVAL_S;
        let mut scanner = ScannerChoice::Builtin;
        let mut scan_timeout_s = DEFAULT_SCAN_TIMEOUT_S;
        let mut service_owner_id = unsafe { libc::geteuid() };
        let mut signature_file: Option<PathBuf> = None;
        let mut homes_root: Option<PathBuf> = None;

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::ParseError {
                line: lineno,
                reason: "expected key=value".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let parse_u64 = |key: &str| -> Result<u64, ConfigError> {
                value.parse().map_err(|_| ConfigError::InvalidValue {
                    key: key.into(),
                    reason: format!("'{value}' is not a non-negative integer"),
                })
            };
            match key {
                "sftp_root" => sftp_root = Some(abs_path(key, value)?),
                "inside_root" => inside_root = Some(abs_path(key, value)?),
                "state_root" => state_root = Some(abs_path(key, value)?),
                "poll_interval_s" => poll_interval_s = parse_u64(key)?,
                "sentinel_interval_s" => sentinel_interval_s = parse_u64(key)?,
                "scan_timeout_s" => scan_timeout_s = parse_u64(key)?,
                "scanner" => {
                    scanner = if value == "builtin" {
                        ScannerChoice::Builtin
                    } else {
                        if !value.contains("{file}") {
                            return Err(ConfigError::InvalidValue {
                                key: key.into(),
                                reason: "command template must contain {file}".into(),
                            });
                        }
                        ScannerChoice::Command(value.to_string())
                    };
                }
                "service_owner_id" => {
                    service_owner_id = value.parse().map_err(|_| ConfigError::InvalidValue {
                        key: key.into(),
                        reason: format!("'{value}' is not a numeric id"),
                    })?;
                }
                "signature_file" => signature_file = Some(abs_path(key, value)?),
                "homes_root" => homes_root = Some(abs_path(key, value)?),
                unknown => {
                    return Err(ConfigError::ParseError {
                        line: lineno,
                        reason: format!("unknown key '{unknown}'"),
                    })
                }
            }
        }

        let require = |key: &str, v: Option<PathBuf>| {
            v.ok_or_else(|| ConfigError::InvalidValue {
                key: key.into(),
                reason: "required key missing".into(),
            })
        };
        let layout = ZoneLayout::new(
            require("sftp_root", sftp_root)?,
            require("inside_root", inside_root)?,
            require("state_root", state_root)?,
        );
        if poll_interval_s < 1 {
            return Err(ConfigError::InvalidValue {
                key: "poll_interval_s".into(),
                reason: "must be >= 1".into(),
            });
        }
        if sentinel_interval_s < 1 {
            return Err(ConfigError::InvalidValue {
                key: "sentinel_interval_s".into(),
                reason: "must be >= 1".into(),
            });
        }
        let homes_root = homes_root.unwrap_or_else(|| layout.state_root.join("homes"));
        Ok(Config {
            layout,
            poll_interval_s,
            sentinel_interval_s,
            scanner,
            scan_timeout_s,
            service_owner_id,
            signature_file,
            homes_root,
        })
    }
}

fn abs_path(key: &str, value: &str) -> Result<PathBuf, ConfigError> {
    let p = PathBuf::from(value);
    if !p.is_absolute() {
        return Err(ConfigError::InvalidValue {
            key: key.into(),
            reason: format!("'{value}' is not an absolute path"),
        });
    }
    Ok(p)
}
