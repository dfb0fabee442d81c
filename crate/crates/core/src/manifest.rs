//! JSON-lines dataset manifests.
//!
//! One record per line: `{"path": "...", "score": 0.42, "id": "..."}` with
//! `score` and `id` optional. Relative paths resolve against the directory
//! holding the manifest file.

use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl ManifestEntry {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ManifestEntry {
            path: path.into(),
            score: None,
            id: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    /// Identifier used in reports: the explicit id, else the file stem.
    pub fn label(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            self.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }

    fn validate(&self, line: usize) -> Result<()> {
        if self.path.as_os_str().is_empty() {
            return Err(Error::Manifest {
                line,
                message: "empty path".into(),
            });
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Manifest {
                    line,
                    message: format!("score {s} outside [0, 1]"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses JSON-lines text. Blank lines are ignored; paths are kept as
    /// written.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_reader(text.as_bytes())
    }

    fn parse_reader(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(trimmed).map_err(|e| Error::Manifest {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entry.validate(i + 1)?;
            entries.push(entry);
        }
        Ok(Manifest { entries })
    }

    /// Loads a manifest file, resolving relative entry paths against its
    /// parent directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Self::parse_reader(BufReader::new(file))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for e in &mut manifest.entries {
            if e.path.is_relative() {
                e.path = normalize(&base.join(&e.path));
            }
        }
        Ok(manifest)
    }

    /// Serializes to JSON lines, writing paths relative to `base` when they
    /// live underneath it.
    pub fn to_jsonl(&self, base: Option<&Path>) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let mut e = e.clone();
            if let Some(base) = base {
                e.path = relative_to(&e.path, base);
            }
            out.push_str(&serde_json::to_string(&e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes the manifest to `path`, relativizing entries against its
    /// parent directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let text = self.to_jsonl(Some(base));
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(text.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Lexically removes `.` and `a/..` components.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for comp in path.components() {
        match comp {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Expresses `path` relative to `base` when the two share an ancestor below
/// the filesystem root; otherwise returns it absolute.
pub(crate) fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| std::path::absolute(p).map(|p| normalize(&p)).unwrap_or_else(|_| p.to_path_buf());
    let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
    let (p, b) = (abs(path), abs(base));
    let shared = p
        .components()
        .zip(b.components())
        .take_while(|(x, y)| x == y)
        .any(|(x, _)| matches!(x, Component::Normal(_)));
    if !shared {
        return p;
    }
    match pathdiff::diff_paths(&p, &b) {
        Some(rel) if !rel.as_os_str().is_empty() => rel,
        _ => p,
    }
}
