//! Trial log persistence, one file per session.

use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use haven_core::log::TrialLog;

/// Writes `log` as `<id>-<unix millis>.jsonl` in `dir`. The file appears
/// under its final name only once complete.
pub fn persist(dir: &Path, id: &str, log: &TrialLog) -> io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let millis = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
    let path = dir.join(format!("{id}-{millis}.jsonl"));
    let partial = dir.join(format!(".{id}.partial"));
    std::fs::write(&partial, log.to_text())?;
    std::fs::rename(&partial, &path)?;
    Ok(path)
}
