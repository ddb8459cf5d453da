//! Seeded synthetic markets with persistent trends and a cross-asset
//! lead-lag, for tests, benchmarks and demos.
//!
//! Each asset carries a latent AR(1) trend `m_i`. Daily returns are
//!
//! ```text
//! r_i(t) = kappa * m_i(t-1) + lead * mean(r_{i-1}(t-L..t-1)) + sigma * e_i(t)
//! ```
//!
//! so asset `i` follows its own trend and, for `i > 0`, the recent
//! `L`-day performance of asset `i - 1`.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::market_data::ReturnsPanel;
use crate::matrix::Matrix;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarket {
    pub n_assets: usize,
    pub n_days: usize,
    pub start: NaiveDate,
    /// AR(1) coefficient of the latent trend.
    pub persistence: f64,
    /// Loading of the next-day return on the unit-variance trend.
    pub trend_scale: f64,
    /// Daily idiosyncratic volatility.
    pub noise_vol: f64,
    /// Loading on the leader's recent mean return.
    pub lead: f64,
    pub lead_window: usize,
}

impl Default for SyntheticMarket {
    fn default() -> Self {
        Self {
            n_assets: 10,
            n_days: 252 * 12,
            start: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
            persistence: 1.0 - 1.0 / 250.0,
            trend_scale: 5e-4,
            noise_vol: 0.01,
            lead: 0.8,
            lead_window: 20,
        }
    }
}

/// Weekdays from `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

impl SyntheticMarket {
    pub fn asset_name(i: usize) -> String {
        format!("A{i:02}")
    }

    pub fn generate(&self, seed: u64) -> Result<ReturnsPanel> {
        let (n, t_len) = (self.n_assets, self.n_days);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let innov = (1.0 - self.persistence * self.persistence).sqrt();
        let mut trend: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut r = Matrix::zeros(t_len, n);
        let l = self.lead_window.max(1);
        for t in 0..t_len {
            for i in 0..n {
                let lead = if i > 0 && t >= l {
                    self.lead * (t - l..t).map(|s| r.get(s, i - 1)).sum::<f64>() / l as f64
                } else {
                    0.0
                };
                let e: f64 = StandardNormal.sample(&mut rng);
                r.set(t, i, self.trend_scale * trend[i] + lead + self.noise_vol * e);
            }
            for m in &mut trend {
                let z: f64 = StandardNormal.sample(&mut rng);
                *m = self.persistence * *m + innov * z;
            }
        }
        ReturnsPanel::new(
            business_days(self.start, t_len),
            (0..n).map(Self::asset_name).collect(),
            r,
            None,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_shaped() {
        let m = SyntheticMarket {
            n_assets: 3,
            n_days: 300,
            ..SyntheticMarket::default()
        };
        let a = m.generate(5).unwrap();
        assert_eq!(a, m.generate(5).unwrap());
        assert_ne!(a, m.generate(6).unwrap());
        assert_eq!((a.n_dates(), a.n_assets()), (300, 3));
        assert!(a.dates().iter().all(|d| d.weekday().number_from_monday() <= 5));
    }
}
