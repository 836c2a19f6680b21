//! File locks: the single-instance engine lock and blocking per-resource
//! locks used to serialize project and session mutations across processes.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LockError {
    #[error("lock already held by pid {holder:?} at {path}")]
    Held {
        path: PathBuf,
        holder: Option<u32>,
    },
    #[error("lock io failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn flock(file: &File, operation: libc::c_int) -> io::Result<()> {
    if unsafe { libc::flock(file.as_raw_fd(), operation) } != 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

/// Exclusive single-writer lock for the transfer engine. The lock file
/// contains the holder's pid as decimal text. Held for the lifetime of the
/// guard; the kernel releases the flock if the process dies, so a stale
/// file never wedges the next start.
#[derive(Debug)]
pub struct EngineLock {
    file: File,
    path: PathBuf,
}

impl EngineLock {
    pub fn try_acquire(path: impl Into<PathBuf>) -> Result<Self, LockError> {
        let path = path.into();
        let io_err = |source| LockError::Io {
            path: path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .open(&path)
            .map_err(io_err)?;
        if let Err(e) = flock(&file, libc::LOCK_EX | libc::LOCK_NB) {
            if e.kind() == io::ErrorKind::WouldBlock {
                let mut contents = String::new();
                let _ = file.read_to_string(&mut contents);
                return Err(LockError::Held {
                    path,
                    holder: contents.trim().parse().ok(),
                });
            }
            return Err(io_err(e));
        }
        file.set_len(0).map_err(io_err)?;
        file.seek(SeekFrom::Start(0)).map_err(io_err)?;
        write!(file, "{}", std::process::id()).map_err(io_err)?;
        file.sync_data().map_err(io_err)?;
        Ok(Self { file, path })
    }

    /// Pid recorded in an existing lock file, if any. Read-only; does not
    /// take the lock.
    pub fn holder(path: &Path) -> Option<u32> {
        std::fs::read_to_string(path).ok()?.trim().parse().ok()
    }
}

impl Drop for EngineLock {
    fn drop(&mut self) {
        let _ = self.file.set_len(0);
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Blocking exclusive lock on an arbitrary path, released on drop. Used for
/// per-project and per-user serialization; waits rather than failing.
pub struct FileLock {
    _file: File,
}

impl FileLock {
    pub fn acquire(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).write(true).open(path)?;
        flock(&file, libc::LOCK_EX)?;
        Ok(Self { _file: file })
    }
}
