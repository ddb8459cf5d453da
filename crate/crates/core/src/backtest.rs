//! Strategy returns from signals: volatility-scaled aggregation, turnover,
//! transaction costs, portfolio-level rescaling and combinations.

use std::io::Write;

use chrono::NaiveDate;

use crate::classical::SignalMatrix;
use crate::features::VolatilityEstimates;
use crate::market_data::{format_exact, ReturnsPanel};
use crate::matrix::Matrix;
use crate::stats::EwmStats;
use crate::training::{bps_to_fraction, TRADING_DAYS};
use crate::{Error, Result};

pub const DEFAULT_COST_GRID: [f64; 8] = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0];
pub const DEFAULT_PORTFOLIO_SPAN: usize = 60;
/// Lower bound on the annualized portfolio volatility estimate.
pub const PORTFOLIO_VOL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub cost_bps: f64,
}

impl CostModel {
    pub fn new(cost_bps: f64) -> Result<Self> {
        if !(cost_bps >= 0.0 && cost_bps.is_finite()) {
            return Err(Error::invalid(format!("cost {cost_bps} bps must be non-negative")));
        }
        Ok(Self { cost_bps })
    }
}

/// Daily strategy returns. Series are indexed by the date on which the
/// return is realized, so entry `t + 1` holds the return of positions set
/// at `t`. `captured`, `turnover` and `usable` are indexed by signal date.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub raw: Vec<f64>,
    pub rescaled: Vec<f64>,
    /// Portfolio scale factor applied on each date.
    pub scale: Vec<f64>,
    /// True where at least one asset contributed a return.
    pub active: Vec<bool>,
    /// `R_i(t)`: volatility-scaled captured return of each asset.
    pub captured: Matrix,
    pub turnover: Matrix,
    pub usable: Vec<bool>,
}

impl BacktestResult {
    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    fn is_usable(&self, t: usize, i: usize) -> bool {
        self.usable[t * self.n_assets() + i]
    }

    /// Values of `series` on active dates.
    pub fn active_values(&self, series: &[f64]) -> Vec<f64> {
        series
            .iter()
            .zip(&self.active)
            .filter(|(_, a)| **a)
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn active_dates(&self) -> Vec<NaiveDate> {
        self.dates
            .iter()
            .zip(&self.active)
            .filter(|(_, a)| **a)
            .map(|(d, _)| *d)
            .collect()
    }

    /// Cross-asset mean turnover on each signal date with at least one
    /// usable asset.
    pub fn mean_turnover(&self) -> Vec<f64> {
        (0..self.n_dates())
            .filter_map(|t| {
                let vals: Vec<f64> = (0..self.n_assets())
                    .filter(|&i| self.is_usable(t, i))
                    .map(|i| self.turnover.get(t, i))
                    .collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }
}

fn check_aligned(signals: &SignalMatrix, panel: &ReturnsPanel, vol: &VolatilityEstimates) -> Result<()> {
    let (t, n) = (panel.n_dates(), panel.n_assets());
    if signals.n_dates() != t
        || signals.n_assets() != n
        || vol.sigma.rows() != t
        || vol.sigma.cols() != n
        || signals.dates != panel.dates()
    {
        return Err(Error::ShapeMismatch {
            op: "backtest",
            detail: "signals, returns and volatility are not aligned".into(),
        });
    }
    Ok(())
}

/// Equal-weight volatility-scaled portfolio return:
/// `r_{t+1} = 1/N_t * sum_i X_t^i * (sigma_tgt / sigma_t^i) * r_{t+1}^i`
/// with `sigma_tgt` annualized and converted to daily. Dates without a
/// usable asset return 0 and are marked inactive. The rescaled leg is a
/// copy of the raw one until [`portfolio_rescale`] is applied.
pub fn aggregate_returns(
    signals: &SignalMatrix,
    panel: &ReturnsPanel,
    vol: &VolatilityEstimates,
    sigma_tgt: f64,
) -> Result<BacktestResult> {
    check_aligned(signals, panel, vol)?;
    let (t_len, n) = (panel.n_dates(), panel.n_assets());
    let tgt = sigma_tgt / TRADING_DAYS.sqrt();
    let mut raw = vec![0.0; t_len];
    let mut active = vec![false; t_len];
    let mut captured = Matrix::zeros(t_len, n);
    let mut usable = vec![false; t_len * n];
    for t in 0..t_len.saturating_sub(1) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            let (sigma, r) = (vol.get(t, i), panel.ret(t + 1, i));
            if !(signals.is_usable(t, i) && sigma.is_finite() && r.is_finite()) {
                continue;
            }
            let ri = signals.get(t, i) * (tgt / sigma) * r;
            captured.set(t, i, ri);
            usable[t * n + i] = true;
            sum += ri;
            count += 1;
        }
        if count > 0 {
            raw[t + 1] = sum / count as f64;
            active[t + 1] = true;
        }
    }
    Ok(BacktestResult {
        dates: panel.dates().to_vec(),
        assets: panel.assets().to_vec(),
        rescaled: raw.clone(),
        scale: vec![1.0; t_len],
        raw,
        active,
        captured,
        turnover: Matrix::zeros(t_len, n),
        usable,
    })
}

/// `TO_t = sigma_tgt * |X_t / sigma_t - X_{t-1} / sigma_{t-1}|`, with the
/// position before the first usable signal taken as flat. `sigma_tgt` is
/// used as given, in the same units as `sigma`.
pub fn turnover(signals: &SignalMatrix, vol: &VolatilityEstimates, sigma_tgt: f64) -> Matrix {
    let (t_len, n) = (signals.n_dates(), signals.n_assets());
    let mut out = Matrix::zeros(t_len, n);
    for i in 0..n {
        let mut prev = 0.0;
        for t in 0..t_len {
            let sigma = vol.get(t, i);
            let pos = if signals.is_usable(t, i) && sigma.is_finite() {
                signals.get(t, i) / sigma
            } else {
                0.0
            };
            out.set(t, i, sigma_tgt * (pos - prev).abs());
            prev = pos;
        }
    }
    out
}

/// Net raw series `1/N_t * sum_i (R_i(t) - c * TO_t^i)`.
pub fn apply_costs(result: &BacktestResult, cost: CostModel) -> Vec<f64> {
    let c = bps_to_fraction(cost.cost_bps);
    if c == 0.0 {
        return result.raw.clone();
    }
    let (t_len, n) = (result.n_dates(), result.n_assets());
    let mut out = vec![0.0; t_len];
    for t in 0..t_len.saturating_sub(1) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            if result.is_usable(t, i) {
                sum += result.captured.get(t, i) - c * result.turnover.get(t, i);
                count += 1;
            }
        }
        if count > 0 {
            out[t + 1] = sum / count as f64;
        }
    }
    out
}

/// Net series after portfolio rescaling, using the scale factors of the
/// gross series.
pub fn net_rescaled(result: &BacktestResult, cost: CostModel) -> Vec<f64> {
    apply_costs(result, cost)
        .iter()
        .zip(&result.scale)
        .map(|(r, k)| r * k)
        .collect()
}

/// Scales active returns by `sigma_tgt / sigma_hat`, where `sigma_hat` is
/// the annualized EWM standard deviation of the active raw returns before
/// the date. The first `span_days` active dates are left unscaled.
/// Returns `(rescaled, scale)`.
pub fn portfolio_rescale(raw: &[f64], active: &[bool], sigma_tgt: f64, span_days: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if raw.len() != active.len() {
        return Err(Error::ShapeMismatch {
            op: "portfolio_rescale",
            detail: format!("{} returns vs {} flags", raw.len(), active.len()),
        });
    }
    if span_days < 2 || sigma_tgt <= 0.0 {
        return Err(Error::invalid("rescaling needs span >= 2 and a positive target"));
    }
    let mut stats = EwmStats::with_span(span_days);
    let mut scale = vec![1.0; raw.len()];
    for (t, (&r, &a)) in raw.iter().zip(active).enumerate() {
        if !a {
            continue;
        }
        if stats.count() >= span_days {
            let est = stats.std().unwrap_or(0.0) * TRADING_DAYS.sqrt();
            scale[t] = sigma_tgt / est.max(PORTFOLIO_VOL_FLOOR);
        }
        stats.push(r);
    }
    let rescaled = raw.iter().zip(&scale).map(|(r, k)| r * k).collect();
    Ok((rescaled, scale))
}

/// Settings for [`run_backtest`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BacktestConfig {
    /// Annualized volatility target.
    pub sigma_tgt: f64,
    pub portfolio_span: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            sigma_tgt: 0.15,
            portfolio_span: DEFAULT_PORTFOLIO_SPAN,
        }
    }
}

/// Aggregation, turnover (in the daily leverage units of the positions)
/// and portfolio rescaling.
pub fn run_backtest(
    signals: &SignalMatrix,
    panel: &ReturnsPanel,
    vol: &VolatilityEstimates,
    cfg: &BacktestConfig,
) -> Result<BacktestResult> {
    let mut res = aggregate_returns(signals, panel, vol, cfg.sigma_tgt)?;
    res.turnover = turnover(signals, vol, cfg.sigma_tgt / TRADING_DAYS.sqrt());
    let (rescaled, scale) = portfolio_rescale(&res.raw, &res.active, cfg.sigma_tgt, cfg.portfolio_span)?;
    res.rescaled = rescaled;
    res.scale = scale;
    Ok(res)
}

/// Weighted sum of the constituents' rescaled returns, rescaled again.
/// The combined series becomes the `raw` leg of the result; turnover and
/// captured returns are weighted likewise.
pub fn combine_strategies(results: &[&BacktestResult], weights: &[f64], cfg: &BacktestConfig) -> Result<BacktestResult> {
    let Some(first) = results.first() else {
        return Err(Error::invalid("nothing to combine"));
    };
    if weights.len() != results.len() {
        return Err(Error::invalid("one weight per strategy is required"));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("combination weights must sum to 1"));
    }
    if results.iter().any(|r| r.dates != first.dates || r.assets != first.assets) {
        return Err(Error::ShapeMismatch {
            op: "combine_strategies",
            detail: "strategies cover different dates or assets".into(),
        });
    }
    let (t_len, n) = (first.n_dates(), first.n_assets());
    let mut raw = vec![0.0; t_len];
    let mut captured = Matrix::zeros(t_len, n);
    let mut turnover = Matrix::zeros(t_len, n);
    for (r, w) in results.iter().zip(weights) {
        for t in 0..t_len {
            raw[t] += w * r.rescaled[t];
            for i in 0..n {
                captured.set(t, i, captured.get(t, i) + w * r.captured.get(t, i));
                turnover.set(t, i, turnover.get(t, i) + w * r.turnover.get(t, i));
            }
        }
    }
    let active: Vec<bool> = (0..t_len).map(|t| results.iter().all(|r| r.active[t])).collect();
    let usable = (0..t_len * n).map(|k| results.iter().all(|r| r.usable[k])).collect();
    for (v, a) in raw.iter_mut().zip(&active) {
        if !a {
            *v = 0.0;
        }
    }
    let (rescaled, scale) = portfolio_rescale(&raw, &active, cfg.sigma_tgt, cfg.portfolio_span)?;
    Ok(BacktestResult {
        dates: first.dates.clone(),
        assets: first.assets.clone(),
        raw,
        rescaled,
        scale,
        active,
        captured,
        turnover,
        usable,
    })
}

/// Column label of a cost level, e.g. `net_c0.5`.
pub fn cost_label(bps: f64) -> String {
    format!("net_c{bps}")
}

/// CSV `date,raw,rescaled,net_c{bps}...` over active dates. Net columns
/// are the raw series after costs.
pub fn write_returns_csv<W: Write>(result: &BacktestResult, costs: &[f64], out: W) -> Result<()> {
    let nets: Vec<Vec<f64>> = costs
        .iter()
        .map(|&c| CostModel::new(c).map(|m| apply_costs(result, m)))
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string(), "raw".into(), "rescaled".into()];
    header.extend(costs.iter().map(|&c| cost_label(c)));
    w.write_record(&header)?;
    for t in 0..result.n_dates() {
        if !result.active[t] {
            continue;
        }
        let mut rec = vec![
            result.dates[t].format("%Y-%m-%d").to_string(),
            format_exact(result.raw[t]),
            format_exact(result.rescaled[t]),
        ];
        rec.extend(nets.iter().map(|s| format_exact(s[t])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Long CSV `date,asset,turnover` over usable entries.
pub fn write_turnover_csv<W: Write>(result: &BacktestResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "asset", "turnover"])?;
    for t in 0..result.n_dates() {
        let date = result.dates[t].format("%Y-%m-%d").to_string();
        for (i, a) in result.assets.iter().enumerate() {
            if result.is_usable(t, i) {
                w.write_record([date.as_str(), a.as_str(), &format_exact(result.turnover.get(t, i))])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn setup(signals: &[Vec<f64>], returns: &[Vec<f64>], sigma: f64) -> (SignalMatrix, ReturnsPanel, VolatilityEstimates) {
        let t = returns[0].len();
        let start = NaiveDate::from_ymd_opt(2010, 1, 4).unwrap();
        let dates = (0..t).map(|k| start + Duration::days(k as i64)).collect();
        let assets = (0..returns.len()).map(|i| format!("A{i}")).collect();
        let panel = ReturnsPanel::new(dates, assets, Matrix::from_columns(returns), None).unwrap();
        let mut s = SignalMatrix::empty_like(&panel);
        for (i, col) in signals.iter().enumerate() {
            for (k, x) in col.iter().enumerate() {
                s.set(k, i, *x);
            }
        }
        let vol = VolatilityEstimates {
            sigma: Matrix::filled(t, returns.len(), sigma),
            span_days: 60,
        };
        (s, panel, vol)
    }

    #[test]
    fn zero_signals_zero_returns() {
        let (s, p, v) = setup(&[vec![0.0; 4]], &[vec![0.01, -0.02, 0.03, 0.01]], 0.01);
        let r = aggregate_returns(&s, &p, &v, 0.15).unwrap();
        assert!(r.raw.iter().all(|x| *x == 0.0));
        assert_eq!(r.active, vec![false, true, true, true]);
    }

    #[test]
    fn unit_leverage_passes_returns_through() {
        let daily = 0.15 / 252f64.sqrt();
        let rets = vec![0.0, 0.01, -0.02, 0.005];
        let (s, p, v) = setup(&[vec![1.0; 4]], &[rets.clone()], daily);
        let r = aggregate_returns(&s, &p, &v, 0.15).unwrap();
        for t in 1..4 {
            assert!((r.raw[t] - rets[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn opposite_positions_cancel() {
        let rets = vec![0.0, 0.01, -0.02];
        let (s, p, v) = setup(&[vec![1.0; 3], vec![-1.0; 3]], &[rets.clone(), rets], 0.01);
        let r = aggregate_returns(&s, &p, &v, 0.15).unwrap();
        assert!(r.raw.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn turnover_examples() {
        let (s, _, v) = setup(&[vec![1.0, 1.0, -1.0]], &[vec![0.0; 3]], 0.01);
        let to = turnover(&s, &v, 0.15);
        assert!((to.get(0, 0) - 15.0).abs() < 1e-12);
        assert_eq!(to.get(1, 0), 0.0);
        assert!((to.get(2, 0) - 30.0).abs() < 1e-12);

        let (s, _, mut v) = setup(&[vec![0.5, 0.5]], &[vec![0.0; 2]], 0.02);
        v.sigma.set(1, 0, 0.01);
        let to = turnover(&s, &v, 0.15);
        assert!((to.get(1, 0) - 0.15 * 0.5 * (1.0 / 0.01 - 1.0 / 0.02)).abs() < 1e-12);
    }

    #[test]
    fn cost_arithmetic() {
        let (s, p, v) = setup(&[vec![1.0, 1.0]], &[vec![0.0, 0.001]], 0.15 / 252f64.sqrt());
        let mut r = aggregate_returns(&s, &p, &v, 0.15).unwrap();
        assert!((r.raw[1] - 0.001).abs() < 1e-15);
        r.turnover.set(0, 0, 1.0);
        assert_eq!(apply_costs(&r, CostModel::new(0.0).unwrap()), r.raw);
        let net = apply_costs(&r, CostModel::new(5.0).unwrap());
        assert!((net[1] - 0.0005).abs() < 1e-15);
        r.turnover.set(0, 0, 0.0);
        assert_eq!(apply_costs(&r, CostModel::new(5.0).unwrap()), r.raw);
        assert!(CostModel::new(-1.0).is_err());
    }

    #[test]
    fn rescale_zero_series_and_warmup() {
        let raw = vec![0.0; 100];
        let active = vec![true; 100];
        let (scaled, k) = portfolio_rescale(&raw, &active, 0.15, 60).unwrap();
        assert!(scaled.iter().all(|x| *x == 0.0));
        assert!(k[..60].iter().all(|x| *x == 1.0));
    }

    #[test]
    fn rescale_is_homogeneous() {
        let raw: Vec<f64> = (0..300).map(|t| ((t * 7919) % 13) as f64 / 1000.0 - 0.006).collect();
        let active = vec![true; 300];
        let double: Vec<f64> = raw.iter().map(|r| 2.0 * r).collect();
        let (a, ka) = portfolio_rescale(&raw, &active, 0.15, 60).unwrap();
        let (b, kb) = portfolio_rescale(&double, &active, 0.15, 60).unwrap();
        for t in 61..300 {
            assert!((kb[t] - ka[t] / 2.0).abs() < 1e-9 * ka[t]);
            assert!((a[t] - b[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn combining_with_itself_and_its_negative() {
        let (s, p, v) = setup(
            &[vec![1.0, -0.5, 0.3, 0.8, -1.0, 0.2]],
            &[vec![0.0, 0.01, -0.02, 0.015, 0.003, -0.01]],
            0.01,
        );
        let cfg = BacktestConfig {
            portfolio_span: 2,
            ..BacktestConfig::default()
        };
        let a = run_backtest(&s, &p, &v, &cfg).unwrap();
        let same = combine_strategies(&[&a, &a], &[0.5, 0.5], &cfg).unwrap();
        assert_eq!(same.raw, a.rescaled);
        let neg = run_backtest(&s.negated(), &p, &v, &cfg).unwrap();
        let zero = combine_strategies(&[&a, &neg], &[0.5, 0.5], &cfg).unwrap();
        assert!(zero.raw.iter().all(|x| x.abs() < 1e-15));
        assert!(combine_strategies(&[&a], &[0.7], &cfg).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let (s, p, v) = setup(&[vec![1.0; 3]], &[vec![0.0, 0.01, 0.02]], 0.01);
        let r = run_backtest(&s, &p, &v, &BacktestConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_returns_csv(&r, &[0.0, 0.5, 10.0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "date,raw,rescaled,net_c0,net_c0.5,net_c10");
        assert_eq!(text.lines().count(), 3);
    }
}
