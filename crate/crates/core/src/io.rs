//! Atomic file output.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, StatError};

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| StatError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| StatError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| StatError::io(path, e))?;
    tmp.flush().map_err(|e| StatError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| StatError::io(path, e.error))?;
    Ok(())
}

/// Renders rows through a `csv::Writer` into memory, then writes atomically.
pub fn write_csv_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .quote_style(csv::QuoteStyle::Never)
            .from_writer(&mut buf);
        fill(&mut w)?;
        w.flush().map_err(|e| StatError::io(path, e))?;
    }
    write_atomic(path, &buf)
}
