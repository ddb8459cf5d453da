use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::samples::{SampleSet, SampleSource};
use super::search::{random_search, CandidateResult, LogRow, SearchGrid, DEFAULT_ITERATIONS};
use super::trainer::{derive_seed, predict_set, stream, TrainConfig};
use crate::classical::SignalMatrix;
use crate::exec::Execution;
use crate::features::{FeatureTensor, VolatilityEstimates};
use crate::market_data::{split_train_validation, ReturnsPanel, DEFAULT_TRAIN_FRACTION};
use crate::models::{ArchitectureSpec, Network};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub first_train_years: u32,
    pub step_years: u32,
    pub train_fraction: f64,
    pub iterations: usize,
    pub grid: SearchGrid,
    pub base: TrainConfig,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            first_train_years: 5,
            step_years: 5,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            iterations: DEFAULT_ITERATIONS,
            grid: SearchGrid::default(),
            base: TrainConfig::default(),
        }
    }
}

/// One expanding window: train on dates `..boundary`, test on
/// `boundary..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowBounds {
    pub index: usize,
    pub boundary: usize,
    pub end: usize,
    pub boundary_date: NaiveDate,
    pub end_date: NaiveDate,
}

fn jan_first(year: i32) -> Result<NaiveDate> {
    NaiveDate::from_ymd_opt(year, 1, 1).ok_or_else(|| Error::invalid(format!("year {year} out of range")))
}

/// Windows with boundaries on January 1 of `start + first + k * step`.
/// The final test block is cut at the end of the calendar.
pub fn window_bounds(dates: &[NaiveDate], first_train_years: u32, step_years: u32) -> Result<Vec<WindowBounds>> {
    if first_train_years == 0 || step_years == 0 {
        return Err(Error::invalid("window lengths must be at least one year"));
    }
    let (Some(first), Some(last)) = (dates.first(), dates.last()) else {
        return Err(Error::invalid("empty calendar"));
    };
    let start = first.year();
    let mut out = Vec::new();
    let mut year = start + first_train_years as i32;
    loop {
        let b = jan_first(year)?;
        if b > *last {
            break;
        }
        let e = jan_first(year + step_years as i32)?;
        let boundary = dates.partition_point(|d| *d < b);
        let end = dates.partition_point(|d| *d < e);
        out.push(WindowBounds {
            index: out.len(),
            boundary,
            end,
            boundary_date: b,
            end_date: e.min(*last),
        });
        year += step_years as i32;
    }
    if out.is_empty() {
        return Err(Error::invalid(format!(
            "panel {first}..{last} is shorter than the {first_train_years}-year training period"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub bounds: WindowBounds,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub chosen: CandidateResult,
    pub failed_candidates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandingResult {
    pub signals: SignalMatrix,
    pub windows: Vec<WindowReport>,
    /// `(window, row)` training log entries.
    pub log: Vec<(usize, LogRow)>,
    pub networks: Vec<Network>,
}

/// Chronological train/validation split of a sample set by signal date.
pub fn split_samples(set: &SampleSet, fraction: f64) -> Result<(SampleSet, SampleSet)> {
    let (Some(&first), Some(&last)) = (set.dates.first(), set.dates.last()) else {
        return Err(Error::invalid("no samples to split"));
    };
    let (_, val) = split_train_validation(first..last + 1, fraction)?;
    let cut = set.dates.partition_point(|&t| t < val.start);
    Ok((set.subset(0..cut), set.subset(cut..set.len())))
}

/// Trains one model per window with random search and writes its
/// out-of-sample signals. `tensor` must carry the architecture's `tau`.
pub fn expanding_window(
    panel: &ReturnsPanel,
    vol: &VolatilityEstimates,
    tensor: &FeatureTensor,
    arch: &ArchitectureSpec,
    cfg: &WindowConfig,
    seed: u64,
    exec: Execution,
) -> Result<ExpandingResult> {
    let bounds = window_bounds(panel.dates(), cfg.first_train_years, cfg.step_years)?;
    let tensor = if tensor.tau() == arch.tau {
        std::borrow::Cow::Borrowed(tensor)
    } else {
        std::borrow::Cow::Owned(tensor.with_tau(arch.tau)?)
    };
    let src = SampleSource {
        panel,
        vol,
        tensor: &tensor,
        sigma_tgt_daily: cfg.base.sigma_tgt_daily(),
    };
    let dims = (panel.n_assets(), tensor.n_features());
    // any instance of the architecture fixes the sample layout
    let layout = {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Network::new(super::trainer::arch_for(arch, &cfg.base), dims.0, dims.1, &mut rng)?
    };

    let mut signals = SignalMatrix::empty_like(panel);
    let mut windows = Vec::new();
    let mut log = Vec::new();
    let mut networks = Vec::new();
    for b in bounds {
        let werr = |message: String| Error::Window {
            window: b.index,
            message,
        };
        let all = src.build(&layout, 0..b.boundary.saturating_sub(1), true)?;
        let (train, val) = split_samples(&all, cfg.train_fraction).map_err(|e| werr(e.to_string()))?;
        if train.len() < 2 || val.len() < 2 {
            return Err(werr(format!(
                "too few samples ({} train, {} validation)",
                train.len(),
                val.len()
            )));
        }
        let test = src.build(&layout, b.boundary..b.end, false)?;
        if test.is_empty() {
            log::warn!("window {} has no usable test dates; skipped", b.index);
            continue;
        }
        let wseed = derive_seed(seed, &[stream::WINDOW, b.index as u64]);
        let outcome = random_search(arch, &cfg.grid, cfg.iterations, &cfg.base, wseed, (&train, &val), dims, exec)
            .map_err(|e| werr(e.to_string()))?;
        let preds = predict_set(&outcome.network, &test)?;
        let o = outcome.network.n_outputs();
        for (s, &t) in test.dates.iter().enumerate() {
            match test.assets[s] {
                Some(i) => signals.set(t, i, preds[s * o]),
                None => {
                    for i in 0..o {
                        signals.set(t, i, preds[s * o + i]);
                    }
                }
            }
        }
        log::info!(
            "window {} ({}..{}): best candidate {} val loss {:?}",
            b.index,
            b.boundary_date,
            b.end_date,
            outcome.best,
            outcome.best_result().val_loss
        );
        let failed = outcome.results.iter().filter(|r| r.error.is_some()).count();
        windows.push(WindowReport {
            bounds: b,
            train_samples: train.len(),
            val_samples: val.len(),
            test_samples: test.len(),
            chosen: outcome.best_result().clone(),
            failed_candidates: failed,
        });
        log.extend(outcome.log.into_iter().map(|r| (b.index, r)));
        networks.push(outcome.network);
    }
    Ok(ExpandingResult {
        signals,
        windows,
        log,
        networks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn daily(from: &str, to: &str) -> Vec<NaiveDate> {
        let a: NaiveDate = from.parse().unwrap();
        let b: NaiveDate = to.parse().unwrap();
        (0..=(b - a).num_days()).map(|k| a + Duration::days(k)).collect()
    }

    #[test]
    fn two_windows_for_fifteen_years() {
        let dates = daily("1990-01-01", "2004-12-31");
        let w = window_bounds(&dates, 5, 5).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].boundary_date.to_string(), "1995-01-01");
        assert_eq!(w[0].end_date.to_string(), "2000-01-01");
        assert_eq!(w[1].boundary_date.to_string(), "2000-01-01");
        assert_eq!(w[1].end, dates.len());
        assert_eq!(dates[w[1].boundary].to_string(), "2000-01-01");
    }

    #[test]
    fn short_panel_is_rejected() {
        let dates = daily("1990-01-01", "1993-06-30");
        assert!(window_bounds(&dates, 5, 5).is_err());
    }
}
