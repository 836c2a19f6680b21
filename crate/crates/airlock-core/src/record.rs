//! Line-oriented `field=value` record files.
//!
//! Every piece of persistent state outside the audit log (job journal,
//! project store, freeze receipts, baselines, session handles) uses the same
//! convention: UTF-8 text, one `key=value` pair per line, newline-terminated,
//! order-preserving, repeated keys allowed. Values are escaped so that paths
//! and identifiers containing control characters cannot corrupt a record.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

/// Escape a value for embedding in a record line or a tab-separated
/// composite value. Reversible via [`unescape`].
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            '\u{1f}' => out.push_str("\\u001f"),
            _ => out.push(c),
        }
    }
    out
}

/// Inverse of [`escape`]. Returns `None` on a malformed escape sequence.
pub fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            't' => out.push('\t'),
            'u' => {
                let code: String = chars.by_ref().take(4).collect();
                if code.len() != 4 {
                    return None;
                }
                let v = u32::from_str_radix(&code, 16).ok()?;
                out.push(char::from_u32(v)?);
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Parse record text into ordered `(key, value)` pairs. Values are returned
/// unescaped. Blank lines are ignored.
pub fn parse(text: &str) -> io::Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line.split_once('=').ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("record line {} has no '='", idx + 1),
            )
        })?;
        let value = unescape(raw).ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("record line {} has a bad escape", idx + 1),
            )
        })?;
        pairs.push((key.to_string(), value));
    }
    Ok(pairs)
}

/// Read and parse a record file.
pub fn read(path: &Path) -> io::Result<Vec<(String, String)>> {
    parse(&fs::read_to_string(path)?)
}

/// Render pairs as record text.
pub fn render(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(&escape(v));
        out.push('\n');
    }
    out
}

/// Write a record file atomically: write to a temporary sibling, fsync, then
/// rename over the target. A crash mid-write never leaves a torn record.
pub fn write_atomic(path: &Path, pairs: &[(String, String)]) -> io::Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "record path has no parent"))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("record")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(render(pairs).as_bytes())?;
        f.sync_data()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// First value for `key`, if present.
pub fn get<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

/// All values for a repeated `key`, in file order.
pub fn get_all<'a>(pairs: &'a [(String, String)], key: &str) -> Vec<&'a str> {
    pairs
        .iter()
        .filter(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .collect()
}
