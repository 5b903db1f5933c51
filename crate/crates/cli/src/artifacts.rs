//! Run directory layout and atomic writes.
//!
//! Every file is written to a sibling temporary and renamed into place, so
//! a reader never observes a partial artifact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const POSTERIOR_DIR: &str = "posterior";
pub const STUDENT_FILE: &str = "student.json";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";

/// Flat metric name to value map, serialized in key order.
pub type Metrics = BTreeMap<String, f64>;

/// Non-numeric provenance of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub method: String,
    pub posterior: String,
    pub dataset: String,
    pub dataset_hash: String,
    pub n_train: usize,
    pub n_test: usize,
    /// Stages that failed after the posterior was fitted, with their cause.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<String, String>,
}

/// Paths inside one run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
}

impl RunArtifacts {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(RunArtifacts { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        write_atomic(&self.path(name), bytes)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> bnn_core::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        Ok(self.write(name, text.as_bytes())?)
    }

    /// Fills a fresh directory through `fill` and swaps it in for `name`.
    pub fn write_dir(&self, name: &str, fill: impl FnOnce(&Path) -> bnn_core::Result<()>) -> bnn_core::Result<()> {
        let target = self.path(name);
        let staging = self.path(&format!(".{name}.tmp"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        fill(&staging)?;
        if target.exists() {
            fs::remove_dir_all(&target)?;
        }
        fs::rename(&staging, &target)?;
        Ok(())
    }

    pub fn read_metrics(&self) -> bnn_core::Result<Metrics> {
        Ok(serde_json::from_str(&fs::read_to_string(self.path(METRICS_FILE))?)?)
    }

    pub fn read_info(&self) -> bnn_core::Result<RunInfo> {
        Ok(serde_json::from_str(&fs::read_to_string(self.path(RUN_FILE))?)?)
    }
}

/// Writes `bytes` to a temporary beside `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Writes CSV produced by `fill` atomically.
pub fn csv_bytes(fill: impl FnOnce(&mut Vec<u8>) -> bnn_core::Result<()>) -> bnn_core::Result<Vec<u8>> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunArtifacts::create(dir.path()).unwrap();
        a.write("x.txt", b"one").unwrap();
        a.write("x.txt", b"two").unwrap();
        assert_eq!(fs::read(a.path("x.txt")).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn directory_swap_replaces_old_contents() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunArtifacts::create(dir.path()).unwrap();
        a.write_dir("p", |d| Ok(fs::write(d.join("old"), "1")?)).unwrap();
        a.write_dir("p", |d| Ok(fs::write(d.join("new"), "2")?)).unwrap();
        assert!(!a.path("p/old").exists());
        assert!(a.path("p/new").exists());
        assert!(!a.path(".p.tmp").exists());
    }

    #[test]
    fn metrics_round_trip_in_key_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunArtifacts::create(dir.path()).unwrap();
        let m: Metrics = [("mse".to_string(), 0.25), ("auc".to_string(), 0.5)].into_iter().collect();
        a.write_json(METRICS_FILE, &m).unwrap();
        let text = fs::read_to_string(a.path(METRICS_FILE)).unwrap();
        assert!(text.find("auc").unwrap() < text.find("mse").unwrap());
        assert_eq!(a.read_metrics().unwrap(), m);
    }
}
