//! Metrics tables: one row per resolution level, coarse to fine.
//!
//! `metrics.csv` columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `schema_version` | [`SCHEMA_VERSION`] |
//! | `variant` | ablation variant, or `default` |
//! | `level`, `spatial`, `temporal` | level label and its aggregation factors |
//! | `seeds` | number of runs aggregated |
//! | `tiles` | evaluated tiles per run |
//! | `mae` … `psnr` | mean over runs; empty when the metric is not selected |
//! | `mae_var` … `psnr_var` | sample variance over runs; empty for a single run |
//! | `forward_passes` | network evaluations per sampled tile |
//! | `train_s_per_epoch`, `sample_s_per_run` | mean wall-clock seconds |

use std::path::Path;

use drdm_core::metrics::{mae, mse, sp_rmse, PSNR_IDENTICAL};
use drdm_core::{ResolutionLevel, SpatioTemporalGrid};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Per-level metrics of one run, pooled over tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: String,
    pub spatial: usize,
    pub temporal: usize,
    pub tiles: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub sp_rmse: Option<f64>,
    pub psnr: Option<f64>,
}

/// Running sums for one level.
#[derive(Debug, Clone)]
pub struct LevelAccumulator {
    level: ResolutionLevel,
    peak: f64,
    tiles: usize,
    abs: f64,
    sq: f64,
    sp_sq: f64,
}

impl LevelAccumulator {
    /// `peak` is the finest-level peak; it is scaled by the level cardinality
    /// because coarse cells hold sums.
    pub fn new(level: ResolutionLevel, fine_peak: f64) -> Self {
        let peak = fine_peak * level.cardinality() as f64;
        Self {
            level,
            peak,
            tiles: 0,
            abs: 0.0,
            sq: 0.0,
            sp_sq: 0.0,
        }
    }

    pub fn add(&mut self, pred: &SpatioTemporalGrid, truth: &SpatioTemporalGrid) -> Result<(), CliError> {
        self.abs += mae(pred, truth)?;
        self.sq += mse(pred, truth)?;
        self.sp_sq += sp_rmse(pred, truth)?.powi(2);
        self.tiles += 1;
        Ok(())
    }

    pub fn finish(&self, selected: &[String]) -> LevelMetrics {
        let n = self.tiles.max(1) as f64;
        let on = |name: &str| selected.iter().any(|s| s == name);
        let mse = self.sq / n;
        let psnr = if mse == 0.0 {
            PSNR_IDENTICAL
        } else {
            10.0 * (self.peak * self.peak / mse).log10()
        };
        LevelMetrics {
            level: self.level.label.clone(),
            spatial: self.level.spatial,
            temporal: self.level.temporal,
            tiles: self.tiles,
            mae: on("mae").then_some(self.abs / n),
            rmse: on("rmse").then_some(mse.sqrt()),
            sp_rmse: on("sp_rmse").then_some((self.sp_sq / n).sqrt()),
            psnr: on("psnr").then_some(psnr),
        }
    }
}

/// Everything one seed run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub levels: Vec<LevelMetrics>,
    pub forward_passes: usize,
    pub train_s_per_epoch: Option<f64>,
    pub sample_s_per_run: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub variant: String,
    pub level: String,
    pub spatial: usize,
    pub temporal: usize,
    pub seeds: usize,
    pub tiles: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub sp_rmse: Option<f64>,
    pub psnr: Option<f64>,
    pub mae_var: Option<f64>,
    pub rmse_var: Option<f64>,
    pub sp_rmse_var: Option<f64>,
    pub psnr_var: Option<f64>,
    pub forward_passes: usize,
    pub train_s_per_epoch: Option<f64>,
    pub sample_s_per_run: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub variant: String,
    pub rows: Vec<MetricsRow>,
    pub runs: Vec<RunMetrics>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Unbiased sample variance; `None` below two values.
pub fn sample_variance(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v)?;
    Some(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64)
}

fn column(runs: &[RunMetrics], i: usize, f: fn(&LevelMetrics) -> Option<f64>) -> Option<Vec<f64>> {
    runs.iter().map(|r| r.levels.get(i).and_then(f)).collect()
}

impl MetricsReport {
    /// Aggregate runs that share a level layout. Levels keep the order of the
    /// first run, which is coarse to fine.
    pub fn aggregate(variant: &str, runs: Vec<RunMetrics>) -> Result<Self, CliError> {
        let first = runs
            .first()
            .ok_or_else(|| CliError::Usage("nothing to aggregate".into()))?;
        for r in &runs {
            let a: Vec<&str> = r.levels.iter().map(|l| l.level.as_str()).collect();
            let b: Vec<&str> = first.levels.iter().map(|l| l.level.as_str()).collect();
            if a != b {
                return Err(CliError::Usage(format!("runs disagree on levels: {a:?} vs {b:?}")));
            }
        }
        let timing = |f: fn(&RunMetrics) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = runs.iter().map(f).collect();
            v.and_then(|v| mean(&v))
        };
        let train_s = timing(|r| r.train_s_per_epoch);
        let sample_s = timing(|r| r.sample_s_per_run);
        let metrics: [fn(&LevelMetrics) -> Option<f64>; 4] = [|l| l.mae, |l| l.rmse, |l| l.sp_rmse, |l| l.psnr];
        let rows = first
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let cols: Vec<Option<Vec<f64>>> = metrics.iter().map(|&f| column(&runs, i, f)).collect();
                let m = |j: usize| cols[j].as_deref().and_then(mean);
                let v = |j: usize| cols[j].as_deref().and_then(sample_variance);
                MetricsRow {
                    schema_version: SCHEMA_VERSION,
                    variant: variant.to_string(),
                    level: l.level.clone(),
                    spatial: l.spatial,
                    temporal: l.temporal,
                    seeds: runs.len(),
                    tiles: l.tiles,
                    mae: m(0),
                    rmse: m(1),
                    sp_rmse: m(2),
                    psnr: m(3),
                    mae_var: v(0),
                    rmse_var: v(1),
                    sp_rmse_var: v(2),
                    psnr_var: v(3),
                    forward_passes: first.forward_passes,
                    train_s_per_epoch: train_s,
                    sample_s_per_run: sample_s,
                }
            })
            .collect();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            variant: variant.to_string(),
            rows,
            runs,
        })
    }

    pub fn finest(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

pub fn write_csv(path: &Path, reports: &[MetricsReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for row in &r.rows {
            w.serialize(row)?;
        }
    }
    w.flush().map_err(crate::error::io_err(path))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?)
}
