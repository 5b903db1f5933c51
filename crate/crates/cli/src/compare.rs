//! Side-by-side tables of finished runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bnn_core::data::format_float;

use crate::artifacts::{Metrics, RunArtifacts, RunInfo};

/// One run's row; `error` is set when its artifacts could not be read.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub run: PathBuf,
    pub info: Option<RunInfo>,
    pub metrics: Metrics,
    pub error: Option<String>,
}

fn load(dir: &Path) -> CompareRow {
    let arts = RunArtifacts { dir: dir.to_path_buf() };
    let read = arts.read_info().and_then(|i| Ok((i, arts.read_metrics()?)));
    match read {
        Ok((info, metrics)) => CompareRow {
            run: dir.to_path_buf(),
            info: Some(info),
            metrics,
            error: None,
        },
        Err(e) => CompareRow {
            run: dir.to_path_buf(),
            info: None,
            metrics: Metrics::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Reads every run; unreadable runs become flagged rows.
pub fn collect(dirs: &[PathBuf]) -> Vec<CompareRow> {
    dirs.iter().map(|d| load(d)).collect()
}

/// CSV with one row per run: `run,status,method,dataset,dataset_hash` and
/// then the union of metric names in sorted order, missing values empty.
pub fn table(rows: &[CompareRow]) -> String {
    let names: BTreeSet<&str> = rows.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run", "status", "method", "dataset", "dataset_hash"];
    header.extend(names.iter().copied());
    w.write_record(&header).expect("in-memory csv");
    for r in rows {
        let mut rec = vec![
            r.run.display().to_string(),
            match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("unreadable: {e}"),
            },
        ];
        match &r.info {
            Some(i) => rec.extend([i.method.clone(), i.dataset.clone(), i.dataset_hash.clone()]),
            None => rec.extend([String::new(), String::new(), String::new()]),
        }
        rec.extend(names.iter().map(|n| r.metrics.get(*n).map(|v| format_float(*v)).unwrap_or_default()));
        w.write_record(&rec).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

/// Human-readable summary of one run directory.
pub fn inspect(dir: &Path) -> bnn_core::Result<String> {
    let arts = RunArtifacts { dir: dir.to_path_buf() };
    let info = arts.read_info()?;
    let mut s = String::new();
    writeln!(s, "run        {}", dir.display()).unwrap();
    writeln!(s, "method     {} ({})", info.method, info.posterior).unwrap();
    writeln!(s, "dataset    {} [{}]", info.dataset, &info.dataset_hash[..12.min(info.dataset_hash.len())]).unwrap();
    writeln!(s, "split      {} train / {} test", info.n_train, info.n_test).unwrap();
    if let Ok(metrics) = arts.read_metrics() {
        let width = metrics.keys().map(String::len).max().unwrap_or(0);
        for (k, v) in &metrics {
            writeln!(s, "  {k:<width$}  {v:.6}").unwrap();
        }
    }
    for (k, v) in &info.failures {
        writeln!(s, "failed     {k}: {v}").unwrap();
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::{METRICS_FILE, RUN_FILE};

    fn fake_run(dir: &Path, method: &str, metrics: &[(&str, f64)]) {
        let a = RunArtifacts::create(dir).unwrap();
        let info = RunInfo {
            method: method.into(),
            posterior: "mean-field".into(),
            dataset: "sinusoid-1d".into(),
            dataset_hash: "abc123".into(),
            n_train: 8,
            n_test: 2,
            failures: Default::default(),
        };
        a.write_json(RUN_FILE, &info).unwrap();
        let m: Metrics = metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        a.write_json(METRICS_FILE, &m).unwrap();
    }

    #[test]
    fn self_comparison_gives_identical_rows() {
        let d = tempfile::tempdir().unwrap();
        fake_run(d.path(), "bbb", &[("auc", 0.5), ("mse", 0.1)]);
        let t = table(&collect(&[d.path().into(), d.path().into()]));
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], lines[2]);
    }

    #[test]
    fn union_of_columns_with_blanks_and_flagged_rows() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        fake_run(a.path(), "bbb", &[("curve_distance", 0.1)]);
        fake_run(b.path(), "dropout", &[("curve_distance", 0.2), ("ece", 0.05)]);
        let missing = a.path().join("nope");
        let t = table(&collect(&[a.path().into(), b.path().into(), missing]));
        let rows: Vec<Vec<String>> = t.lines().map(|l| l.split(',').map(String::from).collect()).collect();
        assert_eq!(rows[0][5..], ["curve_distance".to_string(), "ece".to_string()]);
        assert_eq!(rows[1][4], rows[2][4]);
        assert_eq!(rows[1][6], "");
        assert!(rows[3][1].starts_with("unreadable"));
    }
}
