//! Newline-delimited JSON manifests of RGB-D score records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One dataset entry. Paths are relative to the manifest file's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub rgb_path: String,
    pub depth_path: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
}

/// Full-reference evaluation pair; both images ship with aligned depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrPairRecord {
    pub ref_rgb_path: String,
    pub ref_depth_path: String,
    pub dist_rgb_path: String,
    pub dist_depth_path: String,
    pub score: f64,
}

/// Resolves a record path against the manifest's directory.
pub fn resolve_path(manifest_path: &Path, record_path: &str) -> PathBuf {
    let p = Path::new(record_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn check_score(path: &Path, line: usize, score: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&score) || score.is_nan() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            line,
            msg: format!("score {score} outside [0,1]"),
        });
    }
    Ok(())
}

fn check_exists(manifest: &Path, line: usize, rel: &str) -> Result<()> {
    let full = resolve_path(manifest, rel);
    if !full.is_file() {
        return Err(Error::Manifest {
            path: manifest.to_path_buf(),
            line,
            msg: format!("referenced file `{}` does not exist", full.display()),
        });
    }
    Ok(())
}

/// Parses and validates a manifest: scores in [0,1], referenced files
/// present. Errors carry the 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: lineno,
                msg: e.to_string(),
            })?;
        check_score(path, lineno, record.score)?;
        check_exists(path, lineno, &record.rgb_path)?;
        check_exists(path, lineno, &record.depth_path)?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Parses a full-reference pairs manifest with the same validation rules.
pub fn load_fr_manifest(path: &Path) -> Result<Vec<FrPairRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrPairRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        check_score(path, lineno, record.score)?;
        for p in [
            &record.ref_rgb_path,
            &record.ref_depth_path,
            &record.dist_rgb_path,
            &record.dist_depth_path,
        ] {
            check_exists(path, lineno, p)?;
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn touch(dir: &Path, name: &str) {
        fs::File::create(dir.join(name)).unwrap().write_all(b"x").unwrap();
    }

    fn record(rgb: &str, depth: &str, score: f64) -> ManifestRecord {
        ManifestRecord {
            rgb_path: rgb.into(),
            depth_path: depth.into(),
            score,
            group_id: Some("g0".into()),
        }
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_score_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        touch(dir.path(), "d.png");
        let path = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&record("a.png", "d.png", 0.5)).unwrap();
        let bad = serde_json::to_string(&record("a.png", "d.png", 1.2)).unwrap();
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(err.to_string().contains("1.2"));
    }

    #[test]
    fn malformed_line_is_reported_with_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "{not json}\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn missing_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let path = dir.path().join("m.jsonl");
        let line = serde_json::to_string(&record("a.png", "missing.png", 0.5)).unwrap();
        fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("missing.png"));
    }

    #[test]
    fn roundtrip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "b.png", "c.png", "d.png"] {
            touch(dir.path(), name);
        }
        let path = dir.path().join("m.jsonl");
        let records = vec![
            record("a.png", "b.png", 0.0),
            record("c.png", "d.png", 1.0),
            ManifestRecord {
                rgb_path: "a.png".into(),
                depth_path: "d.png".into(),
                score: 0.42,
                group_id: None,
            },
        ];
        save_manifest(&path, &records).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), records);
    }

    #[test]
    fn boundary_scores_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        touch(dir.path(), "d.png");
        let path = dir.path().join("m.jsonl");
        let records = vec![record("a.png", "d.png", 0.0), record("a.png", "d.png", 1.0)];
        save_manifest(&path, &records).unwrap();
        assert_eq!(load_manifest(&path).unwrap().len(), 2);
    }
}
