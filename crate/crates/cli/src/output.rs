use std::io::Write;
use std::path::{Path, PathBuf};

use crate::Failure;

/// Writes `contents` to `dir/name` via a temporary file in the same
/// directory and a rename, so readers never see a partial file.
pub fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    let fail = |e: std::io::Error| Failure::Numerical(format!("writing {}: {e}", dir.join(name).display()));
    std::fs::create_dir_all(dir).map_err(fail)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(contents.as_bytes()).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    let path = dir.join(name);
    tmp.persist(&path).map_err(|e| fail(e.error))?;
    Ok(path)
}
