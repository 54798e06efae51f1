//! Result tables and their CSV / JSON forms.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, HarnessResult};

/// One (method, params, setting) cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub params: String,
    /// Channel or attack applied before detection.
    pub setting: String,
    pub trials: usize,
    /// Mean number of scored steps per watermarked sequence.
    pub mean_t: f64,
    /// Detection rate on watermarked sequences, keyed by nominal FPR.
    pub tpr_at_fpr: BTreeMap<String, f64>,
    /// Detection rate on the null corpus, keyed by nominal FPR.
    pub fpr_empirical: BTreeMap<String, f64>,
    /// Median p-value (exact binomial, or Monte-Carlo for ITS) over watermarked sequences.
    pub median_p: f64,
    pub mean_step_score: f64,
    pub null_step_rate: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub experiment: String,
    pub seed: u64,
    pub fpr_grid: Vec<f64>,
    pub rows: Vec<ResultRow>,
}

pub fn fpr_label(fpr: f64) -> String {
    fmt_f64(fpr)
}

/// Shortest round-trip decimal, in exponent form for very small or large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

impl ResultTable {
    pub fn new(experiment: &str, seed: u64, fpr_grid: &[f64]) -> Self {
        ResultTable {
            experiment: experiment.to_string(),
            seed,
            fpr_grid: fpr_grid.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn tpr(&self, method: &str, setting: &str, fpr: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.setting == setting)
            .and_then(|r| r.tpr_at_fpr.get(&fpr_label(fpr)).copied())
    }

    /// Header: fixed columns, then `tpr@<fpr>` and `fpr@<fpr>` per grid entry.
    pub fn csv_header(&self) -> Vec<String> {
        let mut cols: Vec<String> = ["experiment", "method", "params", "setting", "trials", "mean_t"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend(self.fpr_grid.iter().map(|f| format!("tpr@{}", fpr_label(*f))));
        cols.extend(self.fpr_grid.iter().map(|f| format!("fpr@{}", fpr_label(*f))));
        cols.extend(["median_p", "mean_step_score", "null_step_rate"].iter().map(|s| s.to_string()));
        cols
    }

    pub fn write_csv<W: Write>(&self, w: W) -> HarnessResult<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| HarnessError::Invariant(format!("csv output: {e}"));
        out.write_record(self.csv_header()).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                self.experiment.clone(),
                r.method.clone(),
                r.params.clone(),
                r.setting.clone(),
                r.trials.to_string(),
                fmt_f64(r.mean_t),
            ];
            let get = |m: &BTreeMap<String, f64>, f: f64| m.get(&fpr_label(f)).map_or(String::new(), |v| fmt_f64(*v));
            rec.extend(self.fpr_grid.iter().map(|&f| get(&r.tpr_at_fpr, f)));
            rec.extend(self.fpr_grid.iter().map(|&f| get(&r.fpr_empirical, f)));
            rec.push(fmt_f64(r.median_p));
            rec.push(fmt_f64(r.mean_step_score));
            rec.push(fmt_f64(r.null_step_rate));
            out.write_record(rec).map_err(csv_err)?;
        }
        out.flush().map_err(|e| HarnessError::Invariant(format!("csv output: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Writes `value` as pretty JSON to `dir/name.json`.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> HarnessResult<PathBuf> {
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(value).expect("result types serialize");
    std::fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}

/// Writes the table as `dir/name.csv` and `dir/name.json`.
pub fn write_table(dir: &Path, name: &str, table: &ResultTable) -> HarnessResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let csv_path = dir.join(format!("{name}.csv"));
    std::fs::write(&csv_path, table.to_csv_string()).map_err(|e| HarnessError::io(&csv_path, e))?;
    Ok(vec![csv_path, write_json(dir, name, table)?])
}
