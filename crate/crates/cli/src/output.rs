//! Artifact writing: CSV tables, plain-text reports and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Full-precision scientific notation.
pub fn num(x: f64) -> String {
    format!("{x:.17e}")
}

/// Column of a CSV table with its unit.
pub struct Column {
    pub name: String,
    pub unit: &'static str,
}

pub fn col(name: impl Into<String>, unit: &'static str) -> Column {
    Column { name: name.into(), unit }
}

pub enum Cell {
    Num(f64),
    Int(usize),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(x) => num(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Text(t) => {
                if t.contains([',', '"', '\n']) {
                    format!("\"{}\"", t.replace('"', "\"\""))
                } else {
                    t.clone()
                }
            }
        }
    }
}

/// A CSV document: a comment line with the config hash, a header `name [unit]`, rows.
pub fn csv(config_hash: &str, columns: &[Column], rows: &[Vec<Cell>]) -> String {
    let mut s = format!("# rodlimit {} config_sha256={config_hash}\n", env!("CARGO_PKG_VERSION"));
    let header: Vec<String> = columns.iter().map(|c| format!("{} [{}]", c.name, c.unit)).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(Cell::render).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Collects artifacts and writes each one atomically.
pub struct Artifacts {
    dir: PathBuf,
    written: Vec<(String, String)>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Artifacts { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        {
            let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
            f.write_all(contents.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &target).with_context(|| format!("renaming into {}", target.display()))?;
        self.written.push((name.to_string(), hex::encode(Sha256::digest(contents.as_bytes()))));
        Ok(())
    }

    /// Writes `manifest.json` listing every artifact with its digest.
    pub fn finish(mut self, run: RunInfo) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct FileEntry {
            name: String,
            sha256: String,
        }
        #[derive(Serialize)]
        struct Manifest {
            #[serde(flatten)]
            run: RunInfo,
            files: Vec<FileEntry>,
        }
        let files = self.written.iter().map(|(n, h)| FileEntry { name: n.clone(), sha256: h.clone() }).collect();
        let text = serde_json::to_string_pretty(&Manifest { run, files })? + "\n";
        self.write("manifest.json", &text)?;
        Ok(self.dir)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub subcommand: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub quadrature: String,
}
