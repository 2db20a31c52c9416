//! Report rows, the fixed CSV layout and the per-seed aggregated summary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};

pub const REPORT_VERSION: u32 = 1;

pub const CSV_HEADER: &str =
    "sweep_id,seed,step,batch,stage,rouge1_f1,rougeL_f1,meteor_lite,trr,ppl_test,adapter_l2,wall_ms,error";

/// One attacked batch at one stage. Failed sweep points produce a single row
/// with only `sweep_id`, `seed` and `error` set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub sweep_id: usize,
    pub seed: u64,
    pub step: Option<usize>,
    pub batch: Option<usize>,
    pub stage: String,
    pub rouge1_f1: Option<f64>,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: Option<f64>,
    pub meteor_lite: Option<f64>,
    pub trr: Option<f64>,
    pub ppl_test: Option<f64>,
    pub adapter_l2: Option<f64>,
    pub wall_ms: Option<u64>,
    pub error: String,
}

impl Row {
    pub fn failed(sweep_id: usize, seed: u64, error: String) -> Self {
        Row {
            sweep_id,
            seed,
            error,
            ..Row::default()
        }
    }

    pub fn is_error(&self) -> bool {
        !self.error.is_empty()
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "rouge1_f1" => self.rouge1_f1,
            "rougeL_f1" => self.rouge_l_f1,
            "meteor_lite" => self.meteor_lite,
            "trr" => self.trr,
            _ => None,
        }
    }
}

pub const METRICS: [&str; 4] = ["rouge1_f1", "rougeL_f1", "meteor_lite", "trr"];

/// Sample mean and standard deviation (n − 1); `std` is absent for n < 2.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub sweep_id: usize,
    pub stage: String,
    pub metric: String,
    pub mean: f64,
    pub std: Option<f64>,
    /// Number of seeds contributing.
    pub n: usize,
    /// Per-seed means, in seed order.
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityEntry {
    pub sweep_id: usize,
    pub seed: u64,
    pub step: usize,
    pub ppl_test: Option<f64>,
    pub adapter_l2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointInfo {
    pub id: usize,
    pub overrides: Vec<(String, Value)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub sweep_id: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    /// Echo of the experiment configuration, if known.
    pub config: Option<Value>,
    pub points: Vec<PointInfo>,
    /// What the per-run seed controls.
    pub seed_roles: String,
    /// Word metrics are over whitespace words of detokenized bytes.
    pub word_level: bool,
    pub metrics: Vec<SummaryEntry>,
    pub utility: Vec<UtilityEntry>,
    pub failures: Vec<FailedRun>,
}

pub const SEED_ROLES: &str = "adapter init, fine-tuning data order and probe batches, defense noise, \
inverter init and order; pretraining uses pretrain.seed";

/// Means over every batch and step of one seed, then mean ± std over seeds.
pub fn summarize(rows: &[Row]) -> Vec<SummaryEntry> {
    let mut by: BTreeMap<(usize, String, &str), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.is_error()) {
        for m in METRICS {
            if let Some(v) = r.metric(m) {
                by.entry((r.sweep_id, r.stage.clone(), m))
                    .or_default()
                    .entry(r.seed)
                    .or_default()
                    .push(v);
            }
        }
    }
    by.into_iter()
        .map(|((sweep_id, stage, metric), seeds)| {
            let per_seed: Vec<f64> = seeds.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            let (mean, std) = mean_std(&per_seed);
            SummaryEntry {
                sweep_id,
                stage,
                metric: metric.to_string(),
                mean,
                std,
                n: per_seed.len(),
                per_seed,
            }
        })
        .collect()
}

fn utility(rows: &[Row]) -> Vec<UtilityEntry> {
    let mut seen = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.is_error()) {
        if let Some(step) = r.step {
            seen.entry((r.sweep_id, r.seed, step)).or_insert(UtilityEntry {
                sweep_id: r.sweep_id,
                seed: r.seed,
                step,
                ppl_test: r.ppl_test,
                adapter_l2: r.adapter_l2,
            });
        }
    }
    seen.into_values().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<Row>,
    pub summary: Summary,
}

impl Report {
    pub fn new(rows: Vec<Row>, config: Option<Value>, points: Vec<PointInfo>) -> Result<Self> {
        if rows.is_empty() {
            return Err(LabError::Config("a report needs at least one row".into()));
        }
        let failures = rows
            .iter()
            .filter(|r| r.is_error())
            .map(|r| FailedRun {
                sweep_id: r.sweep_id,
                seed: r.seed,
                error: r.error.clone(),
            })
            .collect();
        let summary = Summary {
            format_version: REPORT_VERSION,
            config,
            points,
            seed_roles: SEED_ROLES.into(),
            word_level: true,
            metrics: summarize(&rows),
            utility: utility(&rows),
            failures,
        };
        Ok(Report { rows, summary })
    }

    /// Writes `report.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("report.csv"), &self.rows)?;
        write_summary(&dir.join("summary.json"), &self.summary)
    }

    pub fn entry(&self, sweep_id: usize, stage: &str, metric: &str) -> Option<&SummaryEntry> {
        self.summary
            .metrics
            .iter()
            .find(|e| e.sweep_id == sweep_id && e.stage == stage && e.metric == metric)
    }
}

pub fn csv_string(rows: &[Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Io(e.to_string()))?;
    let s = String::from_utf8(bytes).map_err(|e| LabError::Io(e.to_string()))?;
    if rows.is_empty() {
        return Ok(format!("{CSV_HEADER}\n"));
    }
    Ok(s)
}

pub fn write_csv(path: &Path, rows: &[Row]) -> Result<()> {
    std::fs::write(path, csv_string(rows)?)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(LabError::Config(format!("unexpected report header {header:?}")));
    }
    r.deserialize().map(|x| x.map_err(LabError::from)).collect()
}

pub fn write_summary(path: &Path, s: &Summary) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(s)?)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// The CSV with the wall-time column blanked, for determinism comparisons.
pub fn without_wall_time(rows: &[Row]) -> Result<String> {
    let stripped: Vec<Row> = rows.iter().cloned().map(|r| Row { wall_ms: None, ..r }).collect();
    csv_string(&stripped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, stage: &str, trr: f64) -> Row {
        Row {
            sweep_id: 0,
            seed,
            step: Some(0),
            batch: Some(0),
            stage: stage.into(),
            rouge1_f1: Some(trr),
            rouge_l_f1: Some(trr),
            meteor_lite: Some(trr),
            trr: Some(trr),
            ppl_test: Some(3.5),
            adapter_l2: Some(0.25),
            wall_ms: Some(12),
            error: String::new(),
        }
    }

    #[test]
    fn header_is_fixed_and_single_row_gives_two_lines() {
        let s = csv_string(&[row(1, "sip", 0.5)]).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(csv_string(&[]).unwrap().trim(), CSV_HEADER);
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, Some(1.0));
        assert_eq!(mean_std(&[4.0]).1, None);
    }

    #[test]
    fn summary_averages_per_seed_first() {
        let rows = vec![
            row(1, "sip", 0.0),
            row(1, "sip", 1.0),
            row(2, "sip", 1.0),
            row(3, "sip", 1.5),
            Row::failed(1, 1, "boom".into()),
        ];
        let rep = Report::new(rows, None, vec![]).unwrap();
        let e = rep.entry(0, "sip", "trr").unwrap();
        assert_eq!(e.per_seed, vec![0.5, 1.0, 1.5]);
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.std, Some(0.5));
        assert_eq!(rep.summary.failures.len(), 1);
        assert!(Report::new(vec![], None, vec![]).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row(1, "b+f", 0.123456789012345), Row::failed(2, 7, "bad, \"quoted\"".into())];
        let rep = Report::new(rows.clone(), Some(serde_json::json!({"version": 1})), vec![]).unwrap();
        rep.write(dir.path()).unwrap();
        assert_eq!(read_csv(&dir.path().join("report.csv")).unwrap(), rows);
        assert_eq!(read_summary(&dir.path().join("summary.json")).unwrap(), rep.summary);
    }
}
