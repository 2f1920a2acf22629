//! Five-number summaries and result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Method};
use crate::error::{BenchError, Result};
use crate::experiment::TrialRecord;

/// Linear-interpolation (type 7) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub n: usize,
    pub failures: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub converged: usize,
}

impl SummaryRow {
    /// Summary of the finite metrics; quantiles are NaN when every trial failed.
    pub fn from_metrics(method: &str, metrics: &[Option<f64>], converged: usize) -> Self {
        let mut ok: Vec<f64> = metrics.iter().flatten().copied().collect();
        ok.sort_by(f64::total_cmp);
        let failures = metrics.len() - ok.len();
        let q = |p| if ok.is_empty() { f64::NAN } else { quantile_sorted(&ok, p) };
        Self {
            method: method.to_string(),
            n: ok.len(),
            failures,
            min: q(0.0),
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: q(1.0),
            mean: if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 },
            converged,
        }
    }
}

/// One row per method, in order of first appearance.
pub fn summarize(records: &[TrialRecord]) -> Vec<SummaryRow> {
    let rows: Vec<CsvRecord> = records.iter().map(|r| CsvRecord::from_record(r, false)).collect();
    summarize_rows(&rows)
}

fn summarize_rows(rows: &[CsvRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, (Vec<Option<f64>>, usize)> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.method.as_str()) {
            order.push(&r.method);
        }
        let e = groups.entry(&r.method).or_default();
        e.0.push(r.metric);
        e.1 += usize::from(r.converged);
    }
    order.iter().map(|m| SummaryRow::from_metrics(m, &groups[m].0, groups[m].1)).collect()
}

/// Fixed-width table for terminals.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<12} {:>5} {:>5} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11}\n",
        "method", "n", "fail", "min", "q1", "median", "q3", "max", "mean"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>5} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e}",
            r.method, r.n, r.failures, r.min, r.q1, r.median, r.q3, r.max, r.mean
        );
    }
    s
}

/// Row layout of `trials.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRecord {
    pub trial: usize,
    pub seed: u64,
    pub method: String,
    pub metric: Option<f64>,
    pub wall_ms: Option<f64>,
    pub converged: bool,
}

impl CsvRecord {
    fn from_record(r: &TrialRecord, with_timing: bool) -> Self {
        Self {
            trial: r.trial,
            seed: r.seed,
            method: r.method.name().to_string(),
            metric: r.metric,
            wall_ms: with_timing.then_some(r.wall_ms),
            converged: r.converged,
        }
    }
}

/// Writes `trials.csv`. Wall times make the file run-dependent, so they are
/// left empty unless `with_timing` is set.
pub fn write_trials_csv(path: &Path, records: &[TrialRecord], with_timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(CsvRecord::from_record(r, with_timing))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials_csv(path: &Path) -> Result<Vec<CsvRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<CsvRecord>, _>>()?;
    if rows.is_empty() {
        return Err(BenchError::Results(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

/// Per-trial wall times and error messages.
pub fn write_timings_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trial", "method", "wall_ms", "error"])?;
    for r in records {
        w.write_record([
            r.trial.to_string(),
            r.method.name().to_string(),
            format!("{:.3}", r.wall_ms),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(cfg).expect("config serializes")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub versions: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("ddk-bench".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("ddk-core".to_string(), ddk_core::VERSION.to_string());
        Self {
            config_sha256: config_hash(cfg),
            seed: cfg.seed,
            trials: cfg.trials,
            methods: cfg.methods.clone(),
            versions,
            config: cfg.clone(),
        }
    }
}

/// Horizontal five-number boxes on a shared linear axis.
pub fn boxplot_svg(rows: &[SummaryRow], title: &str) -> String {
    let rows: Vec<&SummaryRow> = rows.iter().filter(|r| r.n > 0).collect();
    let (w, left, right, row_h, top) = (720.0, 110.0, 30.0, 44.0, 40.0);
    let h = top + row_h * rows.len().max(1) as f64 + 40.0;
    let lo = rows.iter().map(|r| r.min).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.max).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let x = |v: f64| left + (v - lo) / (hi - lo) * (w - left - right);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    for (i, r) in rows.iter().enumerate() {
        let cy = top + row_h * (i as f64 + 0.5);
        let (y0, y1) = (cy - 12.0, cy + 12.0);
        let _ = writeln!(s, r#"<text x="8" y="{:.1}">{}</text>"#, cy + 4.0, escape(&r.method));
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{cy:.1}" x2="{:.2}" y2="{cy:.1}" stroke="black"/>"#,
            x(r.min),
            x(r.max)
        );
        for v in [r.min, r.max] {
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1:.1}" x2="{0:.2}" y2="{2:.1}" stroke="black"/>"#,
                x(v),
                y0 + 6.0,
                y1 - 6.0
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{y0:.1}" width="{:.2}" height="24" fill="#9ecae1" stroke="black"/>"##,
            x(r.q1),
            (x(r.q3) - x(r.q1)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{y0:.1}" x2="{0:.2}" y2="{y1:.1}" stroke="black" stroke-width="2"/>"#,
            x(r.median)
        );
    }
    let ay = h - 25.0;
    let _ = writeln!(s, r#"<line x1="{left}" y1="{ay}" x2="{:.1}" y2="{ay}" stroke="black"/>"#, w - right);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.3e}</text>"#, x(v), ay + 15.0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes every output of a finished run into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, records: &[TrialRecord], with_timing: bool) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(dir)?;
    write_trials_csv(&dir.join("trials.csv"), records, with_timing)?;
    write_timings_csv(&dir.join("timings.csv"), records)?;
    let rows = summarize(records);
    write_summary_csv(&dir.join("summary.csv"), &rows)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&Manifest::new(cfg))?)?;
    fs::write(dir.join("boxplot.svg"), boxplot_svg(&rows, &format!("{:?}, {} trials", cfg.task.kind, cfg.trials)))?;
    Ok(rows)
}

/// Recomputes `summary.csv` and `boxplot.svg` from an existing `trials.csv`.
pub fn summarize_dir(dir: &Path) -> Result<Vec<SummaryRow>> {
    let rows = summarize_rows(&read_trials_csv(&dir.join("trials.csv"))?);
    write_summary_csv(&dir.join("summary.csv"), &rows)?;
    fs::write(dir.join("boxplot.svg"), boxplot_svg(&rows, &dir.display().to_string()))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_one_to_five() {
        let r = SummaryRow::from_metrics("m", &[5.0, 1.0, 3.0, 2.0, 4.0].map(Some), 5);
        assert_eq!((r.min, r.q1, r.median, r.q3, r.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert_eq!(r.mean, 3.0);
    }

    #[test]
    fn type7_interpolates() {
        let d = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&d, 0.25), 1.75);
        assert_eq!(quantile_sorted(&d, 0.5), 2.5);
        assert_eq!(quantile_sorted(&d, 0.75), 3.25);
    }

    #[test]
    fn single_trial_collapses() {
        let r = SummaryRow::from_metrics("m", &[Some(0.7)], 1);
        assert!([r.min, r.q1, r.median, r.q3, r.max].iter().all(|&v| v == 0.7));
    }

    #[test]
    fn failures_are_counted_not_summarized() {
        let r = SummaryRow::from_metrics("m", &[Some(1.0), None, Some(3.0)], 2);
        assert_eq!((r.n, r.failures), (2, 1));
        assert_eq!(r.median, 2.0);
        let r = SummaryRow::from_metrics("m", &[None], 0);
        assert!(r.median.is_nan());
    }

    #[test]
    fn svg_is_well_formed() {
        let rows = vec![SummaryRow::from_metrics("a<b", &[Some(1.0), Some(2.0)], 2)];
        let s = boxplot_svg(&rows, "t");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
    }
}
