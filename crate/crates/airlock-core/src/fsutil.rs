//! Small filesystem helpers shared across modules.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Hex SHA-256 digest of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 digest of a file's content, streamed.
pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Map of relative path -> content digest for every regular file under
/// `root`, sorted by path. Symlinks are recorded by the digest of their
/// target string so that tree comparisons notice them.
pub fn digest_tree(root: &Path) -> io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in walkdir::WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(io::Error::other)?;
        let ft = entry.file_type();
        let rel = entry
            .path()
            .strip_prefix(root)
            .unwrap_or(entry.path())
            .to_string_lossy()
            .into_owned();
        if ft.is_file() {
            out.insert(rel, sha256_file(entry.path())?);
        } else if ft.is_symlink() {
            let target = fs::read_link(entry.path())?;
            out.insert(rel, sha256_hex(target.to_string_lossy().as_bytes()));
        }
    }
    Ok(out)
}

/// True if a process with this pid currently exists.
pub fn pid_alive(pid: u32) -> bool {
    // Signal 0 performs the existence/permission check without delivering.
    let rc = unsafe { libc::kill(pid as libc::pid_t, 0) };
    if rc == 0 {
        return true;
    }
    std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

/// Remove now-empty directories left under `root` after files were moved
/// out. `root` itself is kept. Best effort.
pub fn prune_empty_dirs(root: &Path) {
    let mut dirs: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .follow_links(false)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_dir() && e.path() != root)
        .map(|e| e.into_path())
        .collect();
    // Deepest first so parents empty out as children go.
    dirs.sort_by_key(|p| std::cmp::Reverse(p.components().count()));
    for d in dirs {
        let _ = fs::remove_dir(&d);
    }
}

/// Pick the destination path for `rel` under `dest_root`, suffixing `.N`
/// with the smallest free positive N when the plain name is taken.
pub fn collision_free(dest_root: &Path, rel: &Path) -> PathBuf {
    let plain = dest_root.join(rel);
    if !plain.symlink_metadata().is_ok() {
        return plain;
    }
    let name = rel
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parent = rel.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    for n in 1u64.. {
        let candidate = dest_root.join(&parent).join(format!("{name}.{n}"));
        if !candidate.symlink_metadata().is_ok() {
            return candidate;
        }
    }
    unreachable!("collision suffix search is unbounded")
}
