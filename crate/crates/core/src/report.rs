//! Turn finished run directories into summary tables (final-round metrics,
//! mean and sample standard deviation over seeds) and round-vs-metric curve
//! files ready for plotting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fedsim::{read_manifest, read_metrics_csv, Manifest, MetricsRow, SimError};
use crate::metrics::MetricsReport;

/// Metric column order used by every report artifact.
pub const METRIC_NAMES: [&str; 7] = ["sr", "spl", "osr", "cls", "ndtw", "ne", "asr"];

fn metric_values(r: &MetricsReport) -> [Option<f64>; 7] {
    [
        Some(r.sr),
        Some(r.spl),
        Some(r.osr),
        Some(r.cls),
        Some(r.ndtw),
        Some(r.ne),
        r.asr,
    ]
}

/// One loaded run directory.
#[derive(Debug, Clone)]
pub struct RunData {
    pub manifest: Manifest,
    pub metrics: Vec<MetricsRow>,
}

/// Mean and sample standard deviation over `n` seeds. `sd` is 0 for a
/// single sample; both are `None` when no seed reported the metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Mean and sample (n-1) standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, sd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub split: String,
    pub poisoned: bool,
    pub seeds: usize,
    /// Per-metric stats in [`METRIC_NAMES`] order.
    pub stats: [Option<Stat>; 7],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub round: usize,
    pub split: String,
    pub poisoned: bool,
    /// Per-metric means over seeds in [`METRIC_NAMES`] order.
    pub means: [Option<f64>; 7],
}

/// Load every run directory; each one must hold a manifest and metrics file.
pub fn collect(dirs: &[PathBuf]) -> Result<Vec<RunData>, SimError> {
    let mut runs = Vec::new();
    for dir in dirs {
        let manifest = read_manifest(dir)?;
        let metrics = read_metrics_csv(dir)?;
        if metrics.is_empty() {
            return Err(SimError::Io(std::io::Error::other(format!(
                "{}: no metrics rows",
                dir.display()
            ))));
        }
        runs.push(RunData { manifest, metrics });
    }
    Ok(runs)
}

type GroupKey = (String, String, bool);

fn stat_of(samples: &[Vec<Option<f64>>], m: usize) -> Option<Stat> {
    let present: Vec<f64> = samples.iter().filter_map(|s| s[m]).collect();
    if present.is_empty() {
        return None;
    }
    let (mean, sd) = mean_sd(&present);
    Some(Stat { mean, sd, n: present.len() })
}

/// Final-round metrics per (scenario, split, poisoned), aggregated over
/// seeds. ASR pools only the seeds where it was defined.
pub fn summarize(runs: &[RunData]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<GroupKey, Vec<Vec<Option<f64>>>> = BTreeMap::new();
    for run in runs {
        let last = run.metrics.iter().map(|r| r.round).max().unwrap();
        for row in run.metrics.iter().filter(|r| r.round == last) {
            groups
                .entry((run.manifest.scenario.clone(), row.split.clone(), row.poisoned))
                .or_default()
                .push(metric_values(&row.report).to_vec());
        }
    }
    groups
        .into_iter()
        .map(|((scenario, split, poisoned), samples)| SummaryRow {
            scenario,
            split,
            poisoned,
            seeds: samples.len(),
            stats: std::array::from_fn(|m| stat_of(&samples, m)),
        })
        .collect()
}

/// Per-scenario round-vs-metric curves, averaged over seeds.
pub fn curves(runs: &[RunData]) -> BTreeMap<String, Vec<CurveRow>> {
    let mut groups: BTreeMap<String, BTreeMap<(usize, String, bool), Vec<Vec<Option<f64>>>>> =
        BTreeMap::new();
    for run in runs {
        let per = groups.entry(run.manifest.scenario.clone()).or_default();
        for row in &run.metrics {
            per.entry((row.round, row.split.clone(), row.poisoned))
                .or_default()
                .push(metric_values(&row.report).to_vec());
        }
    }
    groups
        .into_iter()
        .map(|(scenario, per)| {
            let rows = per
                .into_iter()
                .map(|((round, split, poisoned), samples)| CurveRow {
                    round,
                    split,
                    poisoned,
                    means: std::array::from_fn(|m| stat_of(&samples, m).map(|s| s.mean)),
                })
                .collect();
            (scenario, rows)
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Write `summary.csv` plus one `curve-{scenario}.csv` per scenario.
pub fn write_report(out_dir: &Path, runs: &[RunData]) -> Result<(), SimError> {
    std::fs::create_dir_all(out_dir).map_err(SimError::Io)?;
    let io = |e: csv::Error| SimError::Io(std::io::Error::other(e));

    let mut w = csv::Writer::from_path(out_dir.join("summary.csv")).map_err(io)?;
    let mut header = vec!["scenario".to_string(), "split".into(), "poisoned".into(), "seeds".into()];
    for m in METRIC_NAMES {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    w.write_record(&header).map_err(io)?;
    for row in summarize(runs) {
        let mut rec = vec![
            row.scenario.clone(),
            row.split.clone(),
            (row.poisoned as u8).to_string(),
            row.seeds.to_string(),
        ];
        for stat in row.stats {
            rec.push(fmt_opt(stat.map(|s| s.mean)));
            rec.push(fmt_opt(stat.map(|s| s.sd)));
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(SimError::Io)?;

    for (scenario, rows) in curves(runs) {
        let mut w =
            csv::Writer::from_path(out_dir.join(format!("curve-{scenario}.csv"))).map_err(io)?;
        let mut header = vec!["round".to_string(), "split".into(), "poisoned".into()];
        header.extend(METRIC_NAMES.iter().map(|m| m.to_string()));
        w.write_record(&header).map_err(io)?;
        for row in rows {
            let mut rec =
                vec![row.round.to_string(), row.split.clone(), (row.poisoned as u8).to_string()];
            rec.extend(row.means.into_iter().map(fmt_opt));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(SimError::Io)?;
    }
    Ok(())
}
