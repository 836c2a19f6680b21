//! Malware scan contract plus the two shipped backends: a deterministic
//! built-in signature scanner, and an adapter that shells out to an external
//! scanner command using the usual antivirus exit-code convention
//! (0 clean, 1 infected, anything else error).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use thiserror::Error;

/// The 68-byte industry-standard antivirus test string. Any file containing
/// it scans as infected, which keeps tests deterministic without shipping
/// actual malware.
pub const EICAR_TEST_STRING: &[u8] =
    br"X5O!P%@AP[4\PZX54(P^)7CC)7}$EICAR-STANDARD-ANTIVIRUS-TEST-FILE!$H+H*";

/// Signature name reported for the test string.
pub const EICAR_SIGNATURE: &str = "EICAR-Test-Signature";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Clean,
    /// Carries the non-empty signature name that matched.
    Infected(String),
    /// Backend failure or unreadable input; distinct from Infected and
    /// triggers retry, not quarantine.
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanResult {
    pub verdict: Verdict,
    pub scanned_bytes: u64,
    pub duration_ms: u64,
}

impl ScanResult {
    pub fn is_clean(&self) -> bool {
        matches!(self.verdict, Verdict::Clean)
    }

    pub fn is_infected(&self) -> bool {
        matches!(self.verdict, Verdict::Infected(_))
    }

    pub fn is_error(&self) -> bool {
        matches!(self.verdict, Verdict::Error(_))
    }
}

/// The scan contract. Implementations must be pure with respect to file
/// content (identical bytes give identical verdicts), must never modify the
/// file, and must be safe to call from multiple threads.
pub trait Scanner: Send + Sync {
    fn scan(&self, path: &Path) -> ScanResult;
}

#[derive(Debug, Error)]
pub enum ScannerConfigError {
    #[error("scanner command template is missing the {{file}} placeholder: {0}")]
    MissingPlaceholder(String),
    #[error("signature file line {line} is not valid hex")]
    BadSignatureHex { line: usize },
    #[error("signature file unreadable: {0}")]
    Io(#[from] std::io::Error),
}

/// One known-bad byte sequence.
#[derive(Debug, Clone)]
struct Signature {
    name: String,
    bytes: Vec<u8>,
}

/// Deterministic in-process scanner: flags any file containing the EICAR
/// test string or any byte sequence listed in a signature file (one
/// hex-encoded sequence per line, `#` comments allowed).
#[derive(Debug)]
pub struct BuiltinScanner {
    signatures: Vec<Signature>,
}

impl BuiltinScanner {
    pub fn new() -> Self {
        Self {
            signatures: vec![Signature {
                name: EICAR_SIGNATURE.to_string(),
                bytes: EICAR_TEST_STRING.to_vec(),
            }],
        }
    }

    /// Extend the built-in set from a signature file.
    pub fn with_signature_file(path: &Path) -> Result<Self, ScannerConfigError> {
        let mut scanner = Self::new();
        let text = fs::read_to_string(path)?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bytes =
                hex::decode(line).map_err(|_| ScannerConfigError::BadSignatureHex { line: idx + 1 })?;
            if bytes.is_empty() {
                continue;
            }
            scanner.signatures.push(Signature {
                name: format!("SIG-{}", idx + 1),
                bytes,
            });
        }
        Ok(scanner)
    }
}

impl Default for BuiltinScanner {
    fn default() -> Self {
        Self::new()
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

impl Scanner for BuiltinScanner {
    fn scan(&self, path: &Path) -> ScanResult {
        let started = Instant::now();
        let mut content = Vec::new();
        let read = fs::File::open(path).and_then(|mut f| f.read_to_end(&mut content));
        let verdict = match read {
            Err(e) => {
                let reason = if e.kind() == std::io::ErrorKind::PermissionDenied {
                    "permission denied".to_string()
                } else {
                    e.to_string()
                };
                Verdict::Error(reason)
            }
            Ok(_) => self
                .signatures
                .iter()
                .find(|sig| contains(&content, &sig.bytes))
                .map(|sig| Verdict::Infected(sig.name.clone()))
                .unwrap_or(Verdict::Clean),
        };
        ScanResult {
            verdict,
            scanned_bytes: content.len() as u64,
            duration_ms: started.elapsed().as_millis() as u64,
        }
    }
}

/// Adapter for an external scanner daemon or command. The template must
/// contain `{file}`, which is substituted with the path after whitespace
/// tokenization (no shell is involved).
pub struct CommandScanner {
    argv: Vec<String>,
    timeout: Duration,
}

impl CommandScanner {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

    pub fn new(command_template: &str) -> Result<Self, ScannerConfigError> {
        Self::with_timeout(command_template, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(
        command_template: &str,
        timeout: Duration,
    ) -> Result<Self, ScannerConfigError> {
        if !command_template.contains("{file}") {
            return Err(ScannerConfigError::MissingPlaceholder(
                command_template.to_string(),
            ));
        }
        let argv: Vec<String> = command_template
            .split_whitespace()
            .map(str::to_string)
            .collect();
        Ok(Self { argv, timeout })
    }

    fn wait_with_timeout(
        &self,
        child: &mut std::process::Child,
    ) -> std::io::Result<Option<std::process::ExitStatus>> {
        let deadline = Instant::now() + self.timeout;
        loop {
            if let Some(status) = child.try_wait()? {
                return Ok(Some(status));
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Ok(None);
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

impl Scanner for CommandScanner {
    fn scan(&self, path: &Path) -> ScanResult {
        let started = Instant::now();
        let scanned_bytes = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        let path_str = path.to_string_lossy();
        let argv: Vec<String> = self
            .argv
            .iter()
            .map(|tok| tok.replace("{file}", &path_str))
            .collect();

        let finish = |verdict| ScanResult {
            verdict,
            scanned_bytes,
            duration_ms: started.elapsed().as_millis() as u64,
        };

        let mut child = match Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => return finish(Verdict::Error(format!("spawn failed: {e}"))),
        };

        let mut stdout = String::new();
        let mut stdout_pipe = child.stdout.take();

        let status = match self.wait_with_timeout(&mut child) {
            Ok(Some(status)) => status,
            Ok(None) => return finish(Verdict::Error("timeout".to_string())),
            Err(e) => return finish(Verdict::Error(format!("wait failed: {e}"))),
        };
        if let Some(pipe) = stdout_pipe.as_mut() {
            let _ = pipe.read_to_string(&mut stdout);
        }

        let verdict = match status.code() {
            Some(0) => Verdict::Clean,
            Some(1) => {
                let signature = stdout
                    .lines()
                    .rev()
                    .find(|l| !l.trim().is_empty())
                    .map(|l| l.trim().to_string())
                    .unwrap_or_else(|| "UNKNOWN".to_string());
                Verdict::Infected(signature)
            }
            Some(code) => Verdict::Error(format!("scanner exited {code}")),
            None => Verdict::Error("scanner killed by signal".to_string()),
        };
        finish(verdict)
    }
}

/// Write a file somewhere temporary and return its path; test fixture glue.
pub fn write_fixture(dir: &Path, name: &str, content: &[u8]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, content).expect("write fixture");
    p
}
