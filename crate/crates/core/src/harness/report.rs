//! Plot-ready series derived from training logs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::TrainLog;

/// Rescales to `[0, 1]` by the series' own min and max. A constant series maps to 0.5.
pub fn min_max_normalize(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 1e-15) {
        return vec![0.5; xs.len()];
    }
    xs.iter().map(|x| (x - lo) / span).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSeries {
    /// Number of deviating agents, 1-based.
    pub k: usize,
    pub steps: Vec<usize>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl WeightSeries {
    pub fn mean_normalized(&self) -> f64 {
        self.normalized.iter().sum::<f64>() / self.normalized.len().max(1) as f64
    }
}

/// One set of `w_k` series per log.
pub fn report_weights(logs: &[TrainLog]) -> Result<Vec<Vec<WeightSeries>>> {
    if logs.is_empty() {
        return Err(Error::InvalidArgument("no training logs".into()));
    }
    logs.iter()
        .map(|log| {
            if log.steps.is_empty() {
                return Err(Error::InvalidArgument(format!("{} log has no steps", log.algorithm)));
            }
            let steps: Vec<usize> = log.steps.iter().map(|s| s.step).collect();
            (0..log.n_agents)
                .map(|k| {
                    let raw: Vec<f64> = log
                        .steps
                        .iter()
                        .map(|s| {
                            s.w.get(k).copied().ok_or_else(|| {
                                Error::Shape(format!("step {} has {} weights, expected {}", s.step, s.w.len(), log.n_agents))
                            })
                        })
                        .collect::<Result<_>>()?;
                    Ok(WeightSeries {
                        k: k + 1,
                        steps: steps.clone(),
                        normalized: min_max_normalize(&raw),
                        raw,
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub steps: Vec<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Set when the two logs had different step grids.
    pub note: Option<String>,
}

impl UncertaintyReport {
    pub fn to_csv(&self, label_a: &str, label_b: &str) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", label_a, label_b])?;
        for ((s, a), b) in self.steps.iter().zip(&self.a).zip(&self.b) {
            w.write_record([s.to_string(), format!("{a:.6}"), format!("{b:.6}")])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Value of `series` at the last logged step not after `step`.
fn sample_at(steps: &[usize], series: &[f64], step: usize) -> f64 {
    let i = steps.partition_point(|&s| s <= step);
    series[i.saturating_sub(1)]
}

/// Paired target ensemble std series. Logs on different step grids are
/// resampled onto the coarser one.
pub fn report_uncertainty(a: &TrainLog, b: &TrainLog) -> Result<UncertaintyReport> {
    if a.steps.is_empty() || b.steps.is_empty() {
        return Err(Error::InvalidArgument("uncertainty report needs two non-empty logs".into()));
    }
    let grid = |l: &TrainLog| l.steps.iter().map(|s| s.step).collect::<Vec<_>>();
    let series = |l: &TrainLog| l.steps.iter().map(|s| s.target_std).collect::<Vec<_>>();
    let (ga, gb) = (grid(a), grid(b));
    let (sa, sb) = (series(a), series(b));
    if ga == gb {
        return Ok(UncertaintyReport {
            steps: ga,
            a: sa,
            b: sb,
            note: None,
        });
    }
    let (coarse, fine_name) = if ga.len() <= gb.len() { (ga.clone(), "second") } else { (gb.clone(), "first") };
    let a_res = coarse.iter().map(|&s| sample_at(&ga, &sa, s)).collect();
    let b_res = coarse.iter().map(|&s| sample_at(&gb, &sb, s)).collect();
    Ok(UncertaintyReport {
        note: Some(format!(
            "step grids differ ({} vs {} points); {fine_name} log resampled onto the coarser grid",
            ga.len(),
            gb.len()
        )),
        steps: coarse,
        a: a_res,
        b: b_res,
    })
}
