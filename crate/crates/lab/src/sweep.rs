use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Strategy};
use crate::data::Splits;
use crate::train::train;

pub const DEFAULT_GROUPS: [usize; 6] = [1, 2, 3, 5, 7, 11];

/// Quantity varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Group count of a group-wise run.
    Groups,
    /// Positives per object of a one-to-many run.
    Multiplicity,
    /// Queries per group, keeping the base strategy.
    Queries,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Groups => "k",
            Axis::Multiplicity => "multiplicity",
            Axis::Queries => "queries",
        }
    }

    pub fn apply(&self, base: &RunConfig, value: usize) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Axis::Groups => cfg.strategy = Strategy::GroupWise { k: value },
            Axis::Multiplicity => cfg.strategy = Strategy::OneToMany { multiplicity: value },
            Axis::Queries => cfg.model.queries = value,
        }
        cfg
    }
}

/// One CSV row: a single run (`seed` is the seed) or a `mean` / `std` summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub seed: String,
    pub map_no_nms: Option<f64>,
    pub map_nms: Option<f64>,
    pub duplicate_rate: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Stat { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSummary {
    pub value: usize,
    pub runs: usize,
    pub failures: usize,
    pub map_no_nms: Option<Stat>,
    pub map_nms: Option<Stat>,
    pub duplicate_rate: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<ValueSummary>,
    /// Mean no-NMS mAP at K=3 above K=1, when both were swept.
    pub k3_beats_k1: Option<bool>,
}

fn summarize(value: usize, runs: &[&SweepRow]) -> ValueSummary {
    let ok: Vec<&&SweepRow> = runs.iter().filter(|r| r.error.is_none()).collect();
    let stat = |f: fn(&SweepRow) -> Option<f64>| Stat::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    ValueSummary {
        value,
        runs: runs.len(),
        failures: runs.len() - ok.len(),
        map_no_nms: stat(|r| r.map_no_nms),
        map_nms: stat(|r| r.map_nms),
        duplicate_rate: stat(|r| r.duplicate_rate),
    }
}

fn summary_rows(axis: Axis, s: &ValueSummary) -> [SweepRow; 2] {
    let pick = |f: fn(&Stat) -> f64| move |x: Option<Stat>| x.map(|s| f(&s));
    let row = |label: &str, f: fn(&Stat) -> f64| SweepRow {
        axis: axis.name().into(),
        value: s.value,
        seed: label.into(),
        map_no_nms: pick(f)(s.map_no_nms),
        map_nms: pick(f)(s.map_nms),
        duplicate_rate: pick(f)(s.duplicate_rate),
        error: None,
    };
    [row("mean", |s| s.mean), row("std", |s| s.std)]
}

pub fn run_dir(out: &Path, axis: Axis, value: usize, seed: u64) -> PathBuf {
    out.join(format!("{}_{value}", axis.name()))
        .join(format!("seed_{seed}"))
}

/// Trains every (value, seed) pair. A failing run is recorded with its error
/// and the sweep moves on. With `out` set, each run writes into its own
/// directory below it and `sweep.csv` / `sweep.json` are written there.
pub fn sweep(
    base: &RunConfig,
    axis: Axis,
    values: &[usize],
    seeds: &[u64],
    data: &Splits,
    out: Option<&Path>,
) -> Result<SweepReport> {
    if values.is_empty() || seeds.is_empty() {
        bail!("a sweep needs at least one axis value and one seed");
    }
    if let Some(v) = values.iter().find(|&&v| v == 0) {
        bail!("axis value {v} is invalid for {}", axis.name());
    }
    let mut rows = Vec::new();
    for &value in values {
        let cfg = axis.apply(base, value);
        for &seed in seeds {
            let dir = out.map(|o| run_dir(o, axis, value, seed));
            let row = match train(&cfg, seed, data, dir.as_deref()) {
                Ok(run) => SweepRow {
                    axis: axis.name().into(),
                    value,
                    seed: seed.to_string(),
                    map_no_nms: Some(run.final_eval.map_no_nms),
                    map_nms: Some(run.final_eval.map_nms),
                    duplicate_rate: Some(run.final_eval.duplicate_rate),
                    error: None,
                },
                Err(e) => {
                    log::warn!("{}={value} seed {seed} failed: {e:#}", axis.name());
                    SweepRow {
                        axis: axis.name().into(),
                        value,
                        seed: seed.to_string(),
                        map_no_nms: None,
                        map_nms: None,
                        duplicate_rate: None,
                        error: Some(format!("{e:#}")),
                    }
                }
            };
            rows.push(row);
        }
    }
    let summaries: Vec<ValueSummary> = values
        .iter()
        .map(|&v| summarize(v, &rows.iter().filter(|r| r.value == v).collect::<Vec<_>>()))
        .collect();
    let mean_at = |v: usize| {
        summaries
            .iter()
            .find(|s| s.value == v)
            .and_then(|s| s.map_no_nms)
            .map(|s| s.mean)
    };
    let k3_beats_k1 = match (axis, mean_at(3), mean_at(1)) {
        (Axis::Groups, Some(k3), Some(k1)) => Some(k3 > k1),
        _ => None,
    };
    let report = SweepReport {
        axis,
        rows,
        summaries,
        k3_beats_k1,
    };
    if let Some(dir) = out {
        write_report(&report, dir)?;
    }
    Ok(report)
}

pub fn write_report(report: &SweepReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    for s in &report.summaries {
        for row in summary_rows(report.axis, s) {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    let json = dir.join("sweep.json");
    std::fs::write(&json, serde_json::to_string_pretty(report)? + "\n")
        .with_context(|| format!("writing {}", json.display()))
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Stat::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn axis_sets_the_strategy() {
        let base = RunConfig::default();
        assert_eq!(Axis::Groups.apply(&base, 5).strategy, Strategy::GroupWise { k: 5 });
        assert_eq!(
            Axis::Multiplicity.apply(&base, 2).strategy,
            Strategy::OneToMany { multiplicity: 2 }
        );
        let q = Axis::Queries.apply(&base, 30);
        assert_eq!((q.model.queries, q.strategy), (30, base.strategy));
    }
}
