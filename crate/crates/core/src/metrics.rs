//! Performance ratios, correlations and turnover summaries.

use serde::{Deserialize, Serialize};

use crate::stats::{mean, pearson, quantile_sorted, sample_std};
use crate::training::TRADING_DAYS;
use crate::{Error, Result};

pub const DEFAULT_ROLLING_WINDOW: usize = 252;

/// Annualized performance summary of a daily return series. `None` marks
/// a ratio that is not available (zero denominator or empty sample).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub expected_return: f64,
    pub volatility: f64,
    pub downside_deviation: Option<f64>,
    pub max_drawdown: f64,
    pub sharpe: Option<f64>,
    pub sortino: Option<f64>,
    pub calmar: Option<f64>,
    pub hit_rate: f64,
    pub avg_profit_over_loss: Option<f64>,
}

impl MetricsRow {
    pub const NAMES: [&'static str; 9] = [
        "expected_return",
        "volatility",
        "downside_deviation",
        "max_drawdown",
        "sharpe",
        "sortino",
        "calmar",
        "hit_rate",
        "avg_profit_over_loss",
    ];

    /// Values in [`MetricsRow::NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 9] {
        [
            Some(self.expected_return),
            Some(self.volatility),
            self.downside_deviation,
            Some(self.max_drawdown),
            self.sharpe,
            self.sortino,
            self.calmar,
            Some(self.hit_rate),
            self.avg_profit_over_loss,
        ]
    }
}

fn ratio(num: f64, den: Option<f64>) -> Option<f64> {
    den.filter(|d| *d > 0.0).map(|d| num / d)
}

/// Largest peak-to-trough fall of the additive cumulative return path,
/// starting from zero.
pub fn max_drawdown(returns: &[f64]) -> f64 {
    let (mut cum, mut peak, mut mdd) = (0.0f64, 0.0f64, 0.0f64);
    for r in returns {
        cum += r;
        peak = peak.max(cum);
        mdd = mdd.max(peak - cum);
    }
    mdd
}

pub fn compute_metrics(returns: &[f64]) -> Result<MetricsRow> {
    if returns.len() < 2 {
        return Err(Error::invalid("metrics need at least two observations"));
    }
    let m = mean(returns);
    let er = TRADING_DAYS * m;
    let vol = sample_std(returns).unwrap_or(0.0) * TRADING_DAYS.sqrt();
    let neg: Vec<f64> = returns.iter().copied().filter(|r| *r < 0.0).collect();
    let pos: Vec<f64> = returns.iter().copied().filter(|r| *r > 0.0).collect();
    let dd = sample_std(&neg).map(|s| s * TRADING_DAYS.sqrt());
    let mdd = max_drawdown(returns);
    let avg_pl = if neg.is_empty() || pos.is_empty() {
        None
    } else {
        Some(mean(&pos) / mean(&neg).abs())
    };
    Ok(MetricsRow {
        expected_return: er,
        volatility: vol,
        downside_deviation: dd,
        max_drawdown: mdd,
        sharpe: ratio(er, Some(vol)),
        sortino: ratio(er, dd),
        calmar: ratio(er, Some(mdd)),
        hit_rate: pos.len() as f64 / returns.len() as f64,
        avg_profit_over_loss: avg_pl,
    })
}

/// Pearson correlations between equally long series; `None` where a
/// series has no variance.
pub fn correlation_matrix(series: &[Vec<f64>]) -> Result<Vec<Vec<Option<f64>>>> {
    if let Some(first) = series.first() {
        if series.iter().any(|s| s.len() != first.len()) {
            return Err(Error::invalid("correlated series must have equal length"));
        }
    }
    Ok(series
        .iter()
        .map(|a| series.iter().map(|b| pearson(a, b)).collect())
        .collect())
}

/// Correlation over each trailing `window`; the first `window - 1` entries
/// are `None`.
pub fn rolling_correlation(a: &[f64], b: &[f64], window: usize) -> Result<Vec<Option<f64>>> {
    if a.len() != b.len() {
        return Err(Error::invalid("rolling correlation needs aligned series"));
    }
    if window < 2 || window > a.len() {
        return Err(Error::invalid(format!(
            "window {window} must lie in 2..={}",
            a.len()
        )));
    }
    Ok((0..a.len())
        .map(|t| {
            if t + 1 < window {
                None
            } else {
                pearson(&a[t + 1 - window..=t], &b[t + 1 - window..=t])
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnoverSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Five-number summary and mean of a daily average-turnover series.
pub fn turnover_distribution(daily_mean_turnover: &[f64]) -> TurnoverSummary {
    if daily_mean_turnover.is_empty() {
        return TurnoverSummary {
            min: 0.0,
            q1: 0.0,
            median: 0.0,
            q3: 0.0,
            max: 0.0,
            mean: 0.0,
        };
    }
    let mut s = daily_mean_turnover.to_vec();
    s.sort_by(f64::total_cmp);
    TurnoverSummary {
        min: s[0],
        q1: quantile_sorted(&s, 0.25),
        median: quantile_sorted(&s, 0.5),
        q3: quantile_sorted(&s, 0.75),
        max: s[s.len() - 1],
        mean: mean(&s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_positive_series() {
        let m = compute_metrics(&[0.01, 0.02, 0.005, 0.03]).unwrap();
        assert_eq!(m.max_drawdown, 0.0);
        assert_eq!(m.hit_rate, 1.0);
        assert_eq!(m.calmar, None);
        assert_eq!(m.sortino, None);
        assert_eq!(m.avg_profit_over_loss, None);
    }

    #[test]
    fn alternating_series() {
        let r: Vec<f64> = (0..10).map(|k| if k % 2 == 0 { 0.01 } else { -0.01 }).collect();
        let m = compute_metrics(&r).unwrap();
        assert!(m.expected_return.abs() < 1e-15);
        assert!(m.sharpe.unwrap().abs() < 1e-12);
        assert_eq!(m.hit_rate, 0.5);
        assert!((m.avg_profit_over_loss.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn additive_drawdown() {
        assert!((max_drawdown(&[0.01, -0.02, 0.015]) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn correlations() {
        let x: Vec<f64> = (0..50).map(|k| ((k * 37) % 11) as f64).collect();
        let nx: Vec<f64> = x.iter().map(|v| -v).collect();
        let c = correlation_matrix(&[x.clone(), nx.clone(), vec![1.0; 50]]).unwrap();
        assert!((c[0][0].unwrap() - 1.0).abs() < 1e-12);
        assert!((c[0][1].unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(c[0][2], None);
        let roll = rolling_correlation(&x, &nx, 20).unwrap();
        assert!(roll[..19].iter().all(Option::is_none));
        assert!((roll[30].unwrap() + 1.0).abs() < 1e-12);
        assert!(rolling_correlation(&x, &nx, 51).is_err());
    }

    #[test]
    fn turnover_summaries() {
        let z = turnover_distribution(&[0.0; 10]);
        assert_eq!((z.min, z.max, z.mean), (0.0, 0.0, 0.0));
        let k = turnover_distribution(&[0.7; 10]);
        assert!(k.min == 0.7 && k.max == 0.7 && (k.mean - 0.7).abs() < 1e-15);
    }
}
