//! File formats, configuration and rendering.

pub mod config;
pub mod dataset;
pub mod draws;
pub mod mapfile;
#[cfg(feature = "nifti")]
pub mod nifti;
pub mod render;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Result, SimbaError};

pub use config::StudyConfig;
pub use dataset::{load_dataset, save_dataset};
pub use mapfile::{read_map_file, write_map_file, MapFile};

/// Identifies the configuration and seed that produced a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn line(&self) -> String {
        format!("# simba config_hash={} seed={}", self.config_hash, self.seed)
    }

    /// Parses a line produced by [`Provenance::line`].
    pub fn parse(line: &str) -> Option<Provenance> {
        let rest = line.strip_prefix("# simba ")?;
        let mut hash = None;
        let mut seed = None;
        for tok in rest.split_whitespace() {
            if let Some(h) = tok.strip_prefix("config_hash=") {
                hash = Some(h.to_string());
            } else if let Some(s) = tok.strip_prefix("seed=") {
                seed = s.parse().ok();
            }
        }
        Some(Provenance { config_hash: hash?, seed: seed? })
    }
}

/// Writes to a temporary sibling and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SimbaError::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| SimbaError::config(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp: PathBuf = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| SimbaError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| SimbaError::io(&tmp, e))?;
    f.sync_all().map_err(|e| SimbaError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| SimbaError::io(path, e))
}

/// Prepends the provenance line to text content.
pub fn write_text(path: &Path, prov: &Provenance, body: &str) -> Result<()> {
    let mut s = prov.line();
    s.push('\n');
    s.push_str(body);
    atomic_write(path, s.as_bytes())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SimbaError::io(path, e))
}

/// CSV reader that skips `#` comment lines.
pub(crate) fn csv_reader(text: &str, headers: bool) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(headers)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes())
}

pub(crate) fn parse_f64(s: &str, file: &Path, line: u64) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| SimbaError::data(format!("{}:{line}: cannot parse '{s}' as a number", file.display())))?;
    if !v.is_finite() {
        return Err(SimbaError::data(format!("{}:{line}: non-finite value '{s}'", file.display())));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn provenance_round_trip() {
        let p = Provenance { config_hash: "abc123".into(), seed: 42 };
        assert_eq!(Provenance::parse(&p.line()), Some(p));
        assert_eq!(Provenance::parse("# other"), None);
    }
}
