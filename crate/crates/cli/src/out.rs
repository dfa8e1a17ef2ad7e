//! CSV emission with a versioned provenance header.

use std::path::Path;

use anyhow::{Context, Result};

pub const CSV_VERSION: u32 = 1;

/// Writes `# uio <command> v<N> config_hash=<hex>` followed by a
/// column header and data rows. Equal configs produce byte-identical
/// files for the same rows.
pub fn write_csv(
    path: &Path,
    command: &str,
    config_hash: &str,
    columns: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut text = format!("# uio {command} v{CSV_VERSION} config_hash={config_hash}\n");
    text.push_str(&columns.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn fmt(value: f64) -> String {
    // Display round-trips f64 exactly, keeping outputs deterministic.
    format!("{value}")
}
