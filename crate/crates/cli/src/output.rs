use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

/// Schema version stamped on every JSON document and CSV row.
pub const FORMAT_VERSION: u32 = 1;

fn output_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| output_err(dir, e))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| output_err(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| output_err(&path, e))?;
    Ok(path)
}

/// Writes `header` and then one record per row, so an empty table still
/// carries its column names.
pub fn write_csv<T: Serialize>(dir: &Path, name: &str, header: &[&str], rows: &[T]) -> Result<PathBuf, CliError> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| output_err(&path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(|e| output_err(&path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| output_err(&path, e))?;
    }
    w.flush().map_err(|e| output_err(&path, e))?;
    Ok(path)
}
