//! Report files: `runs.json` with full traces, `summary.csv` with per-query
//! aggregates, and one plot-data CSV per metric.

use crate::experiment::{aggregate, AggregateRow, ExperimentResult};
use crate::{io_err, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const RUNS_FILE: &str = "runs.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const METRICS: [&str; 3] = ["cosine", "ndcg", "query_ndcg"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metric(row: &AggregateRow, name: &str) -> (Option<f64>, Option<f64>) {
    match name {
        "cosine" => (Some(row.cosine_mean), Some(row.cosine_std)),
        "ndcg" => (Some(row.ndcg_mean), Some(row.ndcg_std)),
        _ => (row.query_ndcg_mean, row.query_ndcg_std),
    }
}

pub fn summary_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("query,n,cosine_mean,cosine_std,ndcg_mean,ndcg_std,query_ndcg_mean,query_ndcg_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.query,
            r.n,
            r.cosine_mean,
            r.cosine_std,
            r.ndcg_mean,
            r.ndcg_std,
            opt(r.query_ndcg_mean),
            opt(r.query_ndcg_std)
        );
    }
    out
}

/// One metric across labelled series: `query,<label>_mean,<label>_std,...`.
pub fn plot_csv(series: &[(String, Vec<AggregateRow>)], name: &str) -> String {
    let mut out = String::from("query");
    for (label, _) in series {
        let _ = write!(out, ",{label}_mean,{label}_std");
    }
    out.push('\n');
    let n = series.iter().map(|(_, rows)| rows.len()).max().unwrap_or(0);
    for k in 0..n {
        let _ = write!(out, "{k}");
        for (_, rows) in series {
            let (m, s) = rows.get(k).map(|r| metric(r, name)).unwrap_or((None, None));
            let _ = write!(out, ",{},{}", opt(m), opt(s));
        }
        out.push('\n');
    }
    out
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Writes `runs.json`, `summary.csv` and `plot_<metric>.csv` into `dir`.
pub fn write_reports(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut json = serde_json::to_string_pretty(result)?;
    json.push('\n');
    let mut written = vec![
        write(dir.join(RUNS_FILE), &json)?,
        write(dir.join(SUMMARY_FILE), &summary_csv(&result.aggregate))?,
    ];
    let series = vec![(result.config.name.clone(), result.aggregate.clone())];
    for m in METRICS {
        written.push(write(dir.join(format!("plot_{m}.csv")), &plot_csv(&series, m))?);
    }
    Ok(written)
}

/// Reads a `runs.json` file, or the one inside a directory.
pub fn read_result(path: &Path) -> Result<ExperimentResult> {
    let file = if path.is_dir() { path.join(RUNS_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    Ok(serde_json::from_str(&text)?)
}

/// Re-aggregates stored traces and writes a summary per input plus combined
/// plot CSVs labelled by experiment name.
pub fn rereport(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut series = Vec::new();
    let mut written = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let result = read_result(input)?;
        let rows = aggregate(&result.runs);
        let label = if result.config.name.is_empty() { format!("run{k}") } else { result.config.name.clone() };
        let label = if series.iter().any(|(l, _)| *l == label) { format!("{label}_{k}") } else { label };
        written.push(write(out.join(format!("summary_{label}.csv")), &summary_csv(&rows))?);
        series.push((label, rows));
    }
    for m in METRICS {
        written.push(write(out.join(format!("plot_{m}.csv")), &plot_csv(&series, m))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(k: usize) -> AggregateRow {
        AggregateRow {
            query: k,
            n: 2,
            cosine_mean: 0.5,
            cosine_std: 0.1,
            ndcg_mean: 0.25,
            ndcg_std: 0.0,
            query_ndcg_mean: (k > 0).then_some(0.75),
            query_ndcg_std: (k > 0).then_some(0.05),
        }
    }

    #[test]
    fn summary_leaves_query_zero_blank() {
        let csv = summary_csv(&[row(0), row(1)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "0,2,0.5,0.1,0.25,0,,");
        assert_eq!(lines[2], "1,2,0.5,0.1,0.25,0,0.75,0.05");
    }

    #[test]
    fn plot_columns_follow_series() {
        let csv = plot_csv(&[("a".into(), vec![row(0), row(1)]), ("b".into(), vec![row(0)])], "query_ndcg");
        assert_eq!(csv, "query,a_mean,a_std,b_mean,b_std\n0,,,,\n1,0.75,0.05,,\n");
    }
}
