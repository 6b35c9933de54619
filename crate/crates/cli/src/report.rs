//! Report and plot-data emission. All outputs are written to temp names in
//! the target directory and atomically renamed, so failed runs leave no
//! partial artifacts.

use pkcal_core::{Error, Result};
use serde_json::Value;
use std::io::Write;
use std::path::{Path, PathBuf};

/// A staging area that renames everything into place only on success.
pub struct OutputDir {
    dir: PathBuf,
    staged: Vec<(PathBuf, PathBuf)>,
}

impl OutputDir {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            staged: Vec::new(),
        })
    }

    /// Writes `content` to a temp file; the final name appears on commit.
    pub fn stage(&mut self, name: &str, content: &[u8]) -> Result<()> {
        let tmp = self.dir.join(format!(".{}.tmp-{}", name, std::process::id()));
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(content)?;
        f.sync_all()?;
        self.staged.push((tmp, self.dir.join(name)));
        Ok(())
    }

    /// Renames all staged files into place.
    pub fn commit(mut self) -> Result<()> {
        for (tmp, target) in self.staged.drain(..) {
            std::fs::rename(&tmp, &target)?;
        }
        Ok(())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = std::fs::remove_file(tmp);
        }
    }
}

/// Pretty-printed JSON bytes with a trailing newline.
pub fn to_json_bytes(value: &Value) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Io(std::io::Error::other(format!("serialize report: {e}"))))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// One CSV table: header plus rows of shortest-round-trip floats.
pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn fmt_f64(v: f64) -> String {
    // Rust's default float formatting is the shortest string that parses
    // back to the same bits.
    format!("{v}")
}
