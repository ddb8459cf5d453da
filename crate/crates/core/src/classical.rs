//! Benchmark momentum signals: long-only, TSMOM, MACD and CSMOM.

use std::io::Write;

use chrono::NaiveDate;

use crate::features::{macd_features, response_phi, window_return, MacdConfig};
use crate::market_data::{format_exact, ReturnsPanel};
use crate::matrix::Matrix;
use crate::{Error, Result};

pub const DEFAULT_LOOKBACK: usize = 252;
pub const DEFAULT_DECILE: f64 = 0.10;

/// Per-date trading signals in `[-1, 1]` with a usability flag per entry.
/// Unusable entries hold a zero signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub signals: Matrix,
    pub usable: Vec<bool>,
}

impl SignalMatrix {
    /// All-zero, all-unusable signals on the panel's calendar.
    pub fn empty_like(panel: &ReturnsPanel) -> Self {
        let (t, n) = (panel.n_dates(), panel.n_assets());
        Self {
            dates: panel.dates().to_vec(),
            assets: panel.assets().to_vec(),
            signals: Matrix::zeros(t, n),
            usable: vec![false; t * n],
        }
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.signals.get(t, i)
    }

    #[inline]
    pub fn is_usable(&self, t: usize, i: usize) -> bool {
        self.usable[t * self.n_assets() + i]
    }

    /// Sets a usable signal; the value is clipped into `[-1, 1]`.
    pub fn set(&mut self, t: usize, i: usize, x: f64) {
        let n = self.n_assets();
        self.signals.set(t, i, x.clamp(-1.0, 1.0));
        self.usable[t * n + i] = true;
    }

    /// Number of usable entries on date `t`.
    pub fn usable_count(&self, t: usize) -> usize {
        (0..self.n_assets()).filter(|&i| self.is_usable(t, i)).count()
    }

    /// Signals negated entry-wise.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.signals = self.signals.map(|x| -x);
        out
    }

    /// Wide CSV `date,<asset>...`; unusable entries are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["date".to_string()];
        header.extend(self.assets.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.n_dates() {
            let mut rec = vec![self.dates[t].format("%Y-%m-%d").to_string()];
            for i in 0..self.n_assets() {
                rec.push(if self.is_usable(t, i) {
                    format_exact(self.get(t, i))
                } else {
                    String::new()
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Maximum long position on every listed asset.
pub fn long_only(panel: &ReturnsPanel) -> SignalMatrix {
    let mut out = SignalMatrix::empty_like(panel);
    for t in 0..panel.n_dates() {
        for i in 0..panel.n_assets() {
            if panel.ret(t, i).is_finite() {
                out.set(t, i, 1.0);
            }
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign of the compounded return over the last `lookback_days` returns.
pub fn tsmom_signal(panel: &ReturnsPanel, lookback_days: usize) -> Result<SignalMatrix> {
    if lookback_days == 0 {
        return Err(Error::invalid("lookback must be at least 1"));
    }
    let mut out = SignalMatrix::empty_like(panel);
    for t in 0..panel.n_dates() {
        for i in 0..panel.n_assets() {
            if let Some(r) = window_return(panel, t, i, lookback_days) {
                out.set(t, i, sign(r));
            }
        }
    }
    Ok(out)
}

/// Equal-weight average of `phi(Y)` over the MACD scale pairs.
pub fn macd_aggregate(ys: &[f64]) -> f64 {
    ys.iter().map(|&y| response_phi(y)).sum::<f64>() / ys.len() as f64
}

/// Aggregated MACD position per asset.
pub fn macd_signal(panel: &ReturnsPanel, cfg: &MacdConfig) -> Result<SignalMatrix> {
    let ys = macd_features(panel, cfg)?;
    let mut out = SignalMatrix::empty_like(panel);
    let mut buf = Vec::with_capacity(ys.len());
    for t in 0..panel.n_dates() {
        for i in 0..panel.n_assets() {
            buf.clear();
            buf.extend(ys.iter().map(|m| m.get(t, i)));
            if buf.iter().all(|y| y.is_finite()) {
                out.set(t, i, macd_aggregate(&buf));
            }
        }
    }
    Ok(out)
}

/// Number of assets in each CSMOM leg: `max(1, floor(decile * n))`.
pub fn decile_count(n: usize, decile: f64) -> usize {
    ((decile * n as f64).floor() as usize).max(1)
}

/// Decile long/short selection on one cross-section.
///
/// Assets with a score are ranked descending; ties go to the smaller
/// identifier first. The top `n` get +1, the bottom `n` get -1, and assets
/// without a score get `None`.
pub fn csmom_select(scores: &[Option<f64>], ids: &[String], decile: f64) -> Vec<Option<f64>> {
    let mut ranked: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_some()).collect();
    let mut out: Vec<Option<f64>> = scores.iter().map(|s| s.map(|_| 0.0)).collect();
    if ranked.len() < 2 {
        return scores.iter().map(|_| None).collect();
    }
    ranked.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a].unwrap(), scores[b].unwrap());
        sb.total_cmp(&sa).then_with(|| ids[a].cmp(&ids[b]))
    });
    let n = decile_count(ranked.len(), decile);
    for &i in &ranked[..n] {
        out[i] = Some(1.0);
    }
    for &i in &ranked[ranked.len() - n..] {
        out[i] = Some(-1.0);
    }
    out
}

/// Cross-sectional decile momentum on compounded lookback returns.
pub fn csmom_signal(panel: &ReturnsPanel, lookback_days: usize, decile: f64) -> Result<SignalMatrix> {
    if panel.n_assets() < 2 {
        return Err(Error::invalid("CSMOM needs at least two assets"));
    }
    if !(decile > 0.0 && decile <= 0.5) {
        return Err(Error::invalid("CSMOM decile must lie in (0, 0.5]"));
    }
    if lookback_days == 0 {
        return Err(Error::invalid("lookback must be at least 1"));
    }
    let mut out = SignalMatrix::empty_like(panel);
    for t in 0..panel.n_dates() {
        let scores: Vec<Option<f64>> = (0..panel.n_assets())
            .map(|i| window_return(panel, t, i, lookback_days))
            .collect();
        for (i, s) in csmom_select(&scores, panel.assets(), decile).into_iter().enumerate() {
            if let Some(x) = s {
                out.set(t, i, x);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn panel(cols: &[Vec<f64>]) -> ReturnsPanel {
        let t = cols[0].len();
        let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
        let dates = (0..t).map(|k| start + Duration::days(k as i64)).collect();
        let assets = (0..cols.len()).map(|i| format!("S{i:02}")).collect();
        ReturnsPanel::new(dates, assets, Matrix::from_columns(cols), None).unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("S{i:02}")).collect()
    }

    #[test]
    fn long_only_is_all_ones() {
        let p = panel(&[vec![0.01, -0.02], vec![0.0, 0.03], vec![0.1, 0.1]]);
        let s = long_only(&p);
        assert_eq!((s.n_dates(), s.n_assets()), (2, 3));
        assert!(s.signals.as_slice().iter().all(|&x| x == 1.0));
        let empty = panel(&[vec![]]);
        assert_eq!(long_only(&empty).n_dates(), 0);
    }

    #[test]
    fn tsmom_directions() {
        let p = panel(&[vec![0.01; 5], vec![-0.01; 5], vec![0.0, 0.0, 0.0, 0.25, -0.2]]);
        let s = tsmom_signal(&p, 2).unwrap();
        assert!(!s.is_usable(0, 0));
        assert_eq!(s.get(4, 0), 1.0);
        assert_eq!(s.get(4, 1), -1.0);
        // 1.25 * 0.8 == 1 exactly: a round trip has no direction
        assert_eq!(s.get(4, 2), 0.0);
        assert!(s.is_usable(4, 2));
    }

    #[test]
    fn macd_aggregate_examples() {
        assert_eq!(macd_aggregate(&[0.0, 0.0, 0.0]), 0.0);
        let r2 = 2f64.sqrt();
        let v = macd_aggregate(&[r2, r2, r2]);
        assert!((v - 0.96378).abs() < 1e-5);
        assert_eq!(macd_aggregate(&[0.7, -0.7, 0.0]), 0.0);
    }

    #[test]
    fn decile_counts() {
        assert_eq!(decile_count(10, 0.1), 1);
        assert_eq!(decile_count(46, 0.1), 4);
        assert_eq!(decile_count(12, 0.1), 1);
        assert_eq!(decile_count(2, 0.1), 1);
    }

    #[test]
    fn csmom_distinct_and_tied_scores() {
        let scores: Vec<Option<f64>> = (0..10).map(|i| Some(i as f64)).collect();
        let sel = csmom_select(&scores, &ids(10), 0.1);
        assert_eq!(sel[9], Some(1.0));
        assert_eq!(sel[0], Some(-1.0));
        assert_eq!(sel.iter().filter(|s| **s == Some(0.0)).count(), 8);

        let tied = vec![Some(0.5); 10];
        let sel = csmom_select(&tied, &ids(10), 0.1);
        assert_eq!(sel[0], Some(1.0));
        assert_eq!(sel[9], Some(-1.0));
    }

    #[test]
    fn csmom_validates_arguments() {
        let p = panel(&[vec![0.01; 3]]);
        assert!(csmom_signal(&p, 2, 0.1).is_err());
        let p2 = panel(&[vec![0.01; 3], vec![0.0; 3]]);
        assert!(csmom_signal(&p2, 2, 0.7).is_err());
    }
}
