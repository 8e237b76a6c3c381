use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Fixed 17-significant-digit rendering so reruns are byte-identical.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub struct Outputs {
    dir: PathBuf,
    quiet: bool,
}

impl Outputs {
    pub fn new(dir: &Path, quiet: bool) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("--out {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), quiet })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn csv(&self, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
        let path = self.path(name);
        let io = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        self.announce(&path);
        Ok(())
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        self.announce(&path);
        Ok(())
    }

    fn announce(&self, path: &Path) {
        if !self.quiet {
            println!("wrote {}", path.display());
        }
    }
}

pub fn header(fixed: &[&str], dim: usize, vectors: &[&str], trailing: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    for v in vectors {
        h.extend((1..=dim).map(|i| format!("{v}{i}")));
    }
    h.extend(trailing.iter().map(|s| s.to_string()));
    h
}
