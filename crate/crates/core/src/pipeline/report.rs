//! Study reports: per-replication rows, summaries, and plot-ready CSV series.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunMode;
use super::{num, write_csv, write_json};
use crate::error::{invalid, Error, Result};
use crate::scores::DiagnosticReport;

/// One estimator's error in one replication of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub replication: usize,
    pub estimator: String,
    pub error: f64,
    /// Error divided by the baseline estimator's error in the same replication.
    pub relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub estimator: String,
    pub n: usize,
    pub mean_error: f64,
    pub sd_error: f64,
    pub mean_relative_error: Option<f64>,
    pub sd_relative_error: Option<f64>,
}

/// Selected rank per replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub scenario: String,
    pub replication: usize,
    pub k_hat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeSeries {
    pub scenario: String,
    pub replication: usize,
    /// `(j, f_j, f_{j+1} / f_j)`.
    pub rows: Vec<(usize, f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub mode: RunMode,
    pub replications: usize,
    pub baseline: Option<String>,
    pub rows: Vec<ReportRow>,
    pub ranks: Vec<RankRow>,
    pub scree: Vec<ScreeSeries>,
    /// Estimators of the original comparison that are not implemented here.
    pub omitted_estimators: Vec<String>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl StudyReport {
    /// Mean and standard deviation per (scenario, estimator), in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.scenario.clone(), r.estimator.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
                let rels: Vec<f64> = rows.iter().filter_map(|r| r.relative_error).collect();
                let (mean_error, sd_error) = mean_sd(&errs);
                let (mr, sr) = if rels.len() == rows.len() && !rels.is_empty() {
                    let (m, s) = mean_sd(&rels);
                    (Some(m), Some(s))
                } else {
                    (None, None)
                };
                SummaryRow {
                    scenario: key.0,
                    estimator: key.1,
                    n: rows.len(),
                    mean_error,
                    sd_error,
                    mean_relative_error: mr,
                    sd_relative_error: sr,
                }
            })
            .collect()
    }

    /// Summary entry for one scenario and estimator.
    pub fn summary_for(&self, scenario: &str, estimator: &str) -> Option<SummaryRow> {
        self.summary()
            .into_iter()
            .find(|s| s.scenario == scenario && s.estimator == estimator)
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Write `errors.csv`, `summary.csv`, `summary.json`, and (when present) `ranks.csv`
/// and `scree/<scenario>_rep<r>.csv`.
pub fn emit_report(report: &StudyReport, dir: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(invalid("study report has no rows"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.scenario.clone(),
                r.replication.to_string(),
                r.estimator.clone(),
                num(r.error),
                opt(r.relative_error),
            ]
        })
        .collect();
    write_csv(
        &dir.join("errors.csv"),
        &["scenario", "replication", "estimator", "error", "relative_error"],
        &rows,
    )?;
    let summary = report.summary();
    let srows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            let band = |m: Option<f64>, sd: Option<f64>, sign: f64| match (m, sd) {
                (Some(m), Some(sd)) => num(m + sign * 2.0 * sd),
                _ => String::new(),
            };
            vec![
                s.scenario.clone(),
                s.estimator.clone(),
                s.n.to_string(),
                num(s.mean_error),
                num(s.sd_error),
                opt(s.mean_relative_error),
                opt(s.sd_relative_error),
                band(s.mean_relative_error, s.sd_relative_error, -1.0),
                band(s.mean_relative_error, s.sd_relative_error, 1.0),
            ]
        })
        .collect();
    write_csv(
        &dir.join("summary.csv"),
        &[
            "scenario",
            "estimator",
            "n",
            "mean_error",
            "sd_error",
            "mean_relative_error",
            "sd_relative_error",
            "relative_lower_2sd",
            "relative_upper_2sd",
        ],
        &srows,
    )?;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "mode": report.mode,
            "replications": report.replications,
            "baseline": report.baseline,
            "omitted_estimators": report.omitted_estimators,
            "summary": summary,
            "ranks": report.ranks,
        }),
    )?;
    if !report.ranks.is_empty() {
        let rows: Vec<Vec<String>> = report
            .ranks
            .iter()
            .map(|r| vec![r.scenario.clone(), r.replication.to_string(), r.k_hat.to_string()])
            .collect();
        write_csv(&dir.join("ranks.csv"), &["scenario", "replication", "k_hat"], &rows)?;
    }
    if !report.scree.is_empty() {
        let sd = dir.join("scree");
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for s in &report.scree {
            let rows: Vec<Vec<String>> = s
                .rows
                .iter()
                .map(|(j, f, r)| vec![j.to_string(), num(*f), opt(*r)])
                .collect();
            write_csv(
                &sd.join(format!("{}_rep{:03}.csv", s.scenario, s.replication)),
                &["j", "f_j", "ratio"],
                &rows,
            )?;
        }
    }
    Ok(())
}

/// Diagnostic heatmap series: one row per tested entry.
pub fn write_heatmap(path: &Path, rep: &DiagnosticReport) -> Result<()> {
    let rows: Vec<Vec<String>> = rep
        .tests
        .iter()
        .map(|t| {
            vec![
                t.row.to_string(),
                t.col.to_string(),
                num(t.estimate),
                num(t.null),
                num(t.t_stat),
                num(t.p_value),
                t.significant.to_string(),
                t.significant_bonferroni.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &["row", "col", "estimate", "null", "t", "p", "significant", "significant_bonferroni"],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> StudyReport {
        let mut rows = Vec::new();
        for rep in 0..3 {
            for (est, e) in [("TFFA", 0.1 + rep as f64 * 0.01), ("MC", 0.2 + rep as f64 * 0.03)] {
                rows.push(ReportRow {
                    scenario: "s".into(),
                    replication: rep,
                    estimator: est.into(),
                    error: e,
                    relative_error: Some(e / (0.1 + rep as f64 * 0.01)),
                });
            }
        }
        StudyReport {
            mode: RunMode::Study1,
            replications: 3,
            baseline: Some("TFFA".into()),
            rows,
            ranks: Vec::new(),
            scree: vec![ScreeSeries {
                scenario: "s".into(),
                replication: 0,
                rows: vec![(1, 4.0, Some(0.5)), (2, 2.0, None)],
            }],
            omitted_estimators: vec!["ICAS".into(), "ICA".into()],
        }
    }

    #[test]
    fn csv_rows_and_summary_means() {
        let dir = tempfile::tempdir().unwrap();
        let rep = report();
        emit_report(&rep, dir.path()).unwrap();
        let mut rdr = csv::Reader::from_path(dir.path().join("errors.csv")).unwrap();
        let records: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(records.len(), 6);
        for s in rep.summary() {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| &r[2] == s.estimator.as_str())
                .map(|r| r[3].parse().unwrap())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - s.mean_error).abs() < 1e-12);
        }
        let mut scree = csv::Reader::from_path(dir.path().join("scree/s_rep000.csv")).unwrap();
        assert_eq!(scree.headers().unwrap(), vec!["j", "f_j", "ratio"]);
        assert_eq!(scree.records().count(), 2);
    }

    #[test]
    fn empty_report_is_rejected() {
        let mut rep = report();
        rep.rows.clear();
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&rep, dir.path()).is_err());
    }
}
