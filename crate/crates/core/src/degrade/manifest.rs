use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// One degraded utterance and every artifact that produced it. Relative
/// paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub clean_path: String,
    pub noise_path: String,
    pub rir_path: String,
    pub degraded_path: String,
    pub noisy_path: String,
    pub snr_db: f64,
    pub room_label: String,
    pub split: Split,
    /// Peak-normalization gain applied to the reverberated signal before
    /// mixing; 1.0 when no normalization was needed.
    pub norm_gain: f64,
}

impl CorpusEntry {
    pub fn resolve(&self, manifest_dir: &Path, field: &str) -> PathBuf {
        let raw = match field {
            "clean_path" => &self.clean_path,
            "noise_path" => &self.noise_path,
            "rir_path" => &self.rir_path,
            "degraded_path" => &self.degraded_path,
            "noisy_path" => &self.noisy_path,
            other => panic!("unknown path field {other}"),
        };
        let p = Path::new(raw);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }

    fn paths(&self) -> [(&'static str, &str); 5] {
        [
            ("clean_path", &self.clean_path),
            ("noise_path", &self.noise_path),
            ("rir_path", &self.rir_path),
            ("degraded_path", &self.degraded_path),
            ("noisy_path", &self.noisy_path),
        ]
    }
}

/// Write one JSON object per line, sorted by id.
pub fn save_manifest(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let mut sorted: Vec<&CorpusEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = String::new();
    for e in sorted {
        out.push_str(
            &serde_json::to_string(e)
                .map_err(|err| Error::config(format!("manifest serialization: {err}")))?,
        );
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse a line-oriented JSON manifest, enforcing the sorted-unique-id
/// contract.
pub fn load_manifest(path: &Path) -> Result<Vec<CorpusEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CorpusEntry =
            serde_json::from_str(line).map_err(|err| Error::MalformedManifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: err.to_string(),
            })?;
        if !entry.snr_db.is_finite() {
            return Err(Error::MalformedManifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "non-finite snr_db".into(),
            });
        }
        if let Some(prev) = entries.last() {
            let prev: &CorpusEntry = prev;
            if prev.id >= entry.id {
                return Err(Error::MalformedManifest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("ids not strictly sorted: `{}` then `{}`", prev.id, entry.id),
                });
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Check that every file an entry references exists.
pub fn validate_manifest(entries: &[CorpusEntry], manifest_dir: &Path) -> Result<()> {
    let mut missing = Vec::new();
    for e in entries {
        for (field, _) in e.paths() {
            let p = e.resolve(manifest_dir, field);
            if !p.exists() {
                missing.push(format!("{} ({field} of {})", p.display(), e.id));
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "manifest references {} missing file(s): {}",
            missing.len(),
            missing.join(", ")
        )))
    }
}
