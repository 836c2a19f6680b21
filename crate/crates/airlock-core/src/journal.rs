//! Crash-safe job journal: one record file per transfer job under
//! `state_root/journal/<job_id>`, written before any file operation and
//! rewritten atomically after every state transition. Recovery reads the
//! journal plus the filesystem to re-drive interrupted work.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::record;
use crate::transfer::{PayloadEntry, TransferDirection, TransferJob, TransferState};

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal record corrupt for job {job_id}: {reason}")]
    Corrupt { job_id: String, reason: String },
}

pub struct JobJournal {
    dir: PathBuf,
}

impl JobJournal {
    pub fn open(journal_dir: impl Into<PathBuf>) -> Result<Self, JournalError> {
        let dir = journal_dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_of(&self, job_id: &str) -> PathBuf {
        self.dir.join(job_id)
    }

    /// Persist the job record, replacing any previous version atomically.
    pub fn store(&self, job: &TransferJob) -> Result<(), JournalError> {
        let mut pairs: Vec<(String, String)> = vec![
            ("job_id".into(), job.job_id.clone()),
            ("user".into(), job.user.clone()),
            ("project".into(), job.project_id.clone()),
            ("direction".into(), job.direction.to_string()),
            ("state".into(), job.state.to_string()),
            ("created_at".into(), rfc3339(job.created_at)),
            (
                "finished_at".into(),
                job.finished_at.map(rfc3339).unwrap_or_default(),
            ),
        ];
        for entry in &job.payload {
            pairs.push((
                "file".into(),
                format!(
                    "{}\t{}\t{}",
                    record::escape(&entry.rel_path),
                    entry.size,
                    entry.digest
                ),
            ));
        }
        record::write_atomic(&self.path_of(&job.job_id), &pairs)?;
        Ok(())
    }

    pub fn load(&self, job_id: &str) -> Result<TransferJob, JournalError> {
        let pairs = record::read(&self.path_of(job_id)).map_err(JournalError::Io)?;
        parse_job(job_id, &pairs)
    }

    pub fn contains(&self, job_id: &str) -> bool {
        self.path_of(job_id).is_file()
    }

    /// All journaled jobs, sorted by job id. Unparseable records are
    /// returned separately so the caller can freeze them for review.
    pub fn list(&self) -> Result<(Vec<TransferJob>, Vec<String>), JournalError> {
        let mut jobs = Vec::new();
        let mut corrupt = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') {
                continue;
            }
            names.push(name);
        }
        names.sort();
        for name in names {
            match self.load(&name) {
                Ok(job) => jobs.push(job),
                Err(_) => corrupt.push(name),
            }
        }
        Ok((jobs, corrupt))
    }

    pub fn non_terminal(&self) -> Result<(Vec<TransferJob>, Vec<String>), JournalError> {
        let (jobs, corrupt) = self.list()?;
        Ok((
            jobs.into_iter().filter(|j| !j.state.is_terminal()).collect(),
            corrupt,
        ))
    }

    /// Move a corrupt record aside for manual review, preserving its bytes.
    pub fn freeze_corrupt(&self, job_id: &str) -> Result<PathBuf, JournalError> {
        let review_dir = self.dir.join("corrupt");
        fs::create_dir_all(&review_dir)?;
        let dest = review_dir.join(job_id);
        fs::rename(self.path_of(job_id), &dest)?;
        Ok(dest)
    }
}

fn rfc3339(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

fn parse_ts(value: &str, job_id: &str) -> Result<DateTime<Utc>, JournalError> {
    DateTime::parse_from_rfc3339(value)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| JournalError::Corrupt {
            job_id: job_id.to_string(),
            reason: format!("bad timestamp: {e}"),
        })
}

fn parse_job(job_id: &str, pairs: &[(String, String)]) -> Result<TransferJob, JournalError> {
    let corrupt = |reason: &str| JournalError::Corrupt {
        job_id: job_id.to_string(),
        reason: reason.to_string(),
    };
    let need = |key: &str| record::get(pairs, key).ok_or_else(|| corrupt(&format!("missing {key}")));

    let recorded_id = need("job_id")?;
    if recorded_id != job_id {
        return Err(corrupt("job_id mismatch with filename"));
    }
    let direction: TransferDirection =
        need("direction")?.parse().map_err(|e: String| corrupt(&e))?;
    let state: TransferState = need("state")?.parse().map_err(|e: String| corrupt(&e))?;
    let created_at = parse_ts(need("created_at")?, job_id)?;
    let finished_raw = need("finished_at")?;
    let finished_at = if finished_raw.is_empty() {
        None
    } else {
        Some(parse_ts(finished_raw, job_id)?)
    };

    let mut payload = Vec::new();
    for value in record::get_all(pairs, "file") {
        let mut parts = value.splitn(3, '\t');
        let (path_raw, size_raw, digest) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(corrupt("bad file entry")),
        };
        let rel_path = record::unescape(path_raw).ok_or_else(|| corrupt("bad file path escape"))?;
        let size: u64 = size_raw.parse().map_err(|_| corrupt("bad file size"))?;
        if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(corrupt("bad file digest"));
        }
        payload.push(PayloadEntry {
            rel_path,
            size,
            digest: digest.to_string(),
        });
    }

    Ok(TransferJob {
        job_id: job_id.to_string(),
        user: need("user")?.to_string(),
        project_id: need("project")?.to_string(),
        direction,
        payload,
        state,
        created_at,
        finished_at,
    })
}
