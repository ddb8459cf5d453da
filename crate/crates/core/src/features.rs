//! Momentum features: ex-ante volatility, volatility-normalized returns,
//! normalized MACD signals, and the spatio-temporal input tensor.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::market_data::{format_exact, ReturnsPanel};
use crate::matrix::Matrix;
use crate::stats::{sample_std, timescale_decay, EwmStats};
use crate::{Error, Result};

/// Floor for daily volatility estimates.
pub const VOL_FLOOR: f64 = 1e-6;
pub const DEFAULT_VOL_SPAN: usize = 60;
pub const DEFAULT_HORIZONS: [usize; 5] = [1, 20, 63, 126, 252];

/// Causal daily volatility per asset (NaN before an asset's first return).
#[derive(Debug, Clone, PartialEq)]
pub struct VolatilityEstimates {
    pub sigma: Matrix,
    pub span_days: usize,
}

impl VolatilityEstimates {
    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.sigma.get(t, i)
    }
}

/// Exponentially weighted standard deviation of daily returns, floored at
/// [`VOL_FLOOR`]. Uses returns up to and including each date.
pub fn ex_ante_volatility(panel: &ReturnsPanel, span_days: usize) -> Result<VolatilityEstimates> {
    if span_days < 2 {
        return Err(Error::invalid("volatility span must be at least 2"));
    }
    let cols: Vec<Vec<f64>> = (0..panel.n_assets())
        .map(|i| {
            let mut stats = EwmStats::with_span(span_days);
            (0..panel.n_dates())
                .map(|t| {
                    let r = panel.ret(t, i);
                    if !r.is_finite() {
                        return f64::NAN;
                    }
                    stats.push(r);
                    stats.std().unwrap_or(0.0).max(VOL_FLOOR)
                })
                .collect()
        })
        .collect();
    Ok(VolatilityEstimates {
        sigma: Matrix::from_columns(&cols),
        span_days,
    })
}

/// Cumulative compounded return over the `k` returns ending at `t`.
pub fn window_return(panel: &ReturnsPanel, t: usize, i: usize, k: usize) -> Option<f64> {
    if k == 0 || t + 1 < k {
        return None;
    }
    let mut growth = 1.0;
    for s in t + 1 - k..=t {
        let r = panel.ret(s, i);
        if !r.is_finite() {
            return None;
        }
        growth *= 1.0 + r;
    }
    Some(growth - 1.0)
}

/// `r_{t-k,t} / (sigma_t * sqrt(k))` for each horizon; NaN when unusable.
pub fn normalized_returns(
    panel: &ReturnsPanel,
    vol: &VolatilityEstimates,
    horizons: &[usize],
) -> Result<Vec<Matrix>> {
    if horizons.contains(&0) {
        return Err(Error::invalid("horizons must be positive"));
    }
    Ok(horizons
        .iter()
        .map(|&k| {
            let mut m = Matrix::filled(panel.n_dates(), panel.n_assets(), f64::NAN);
            for i in 0..panel.n_assets() {
                for t in 0..panel.n_dates() {
                    let sigma = vol.get(t, i);
                    if let Some(r) = window_return(panel, t, i, k) {
                        if sigma.is_finite() {
                            m.set(t, i, r / (sigma * (k as f64).sqrt()));
                        }
                    }
                }
            }
            m
        })
        .collect())
}

/// Time scales and normalization windows for the MACD signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacdConfig {
    pub short_scales: Vec<usize>,
    pub long_scales: Vec<usize>,
    pub price_std_window: usize,
    pub signal_std_window: usize,
}

impl Default for MacdConfig {
    fn default() -> Self {
        Self {
            short_scales: vec![8, 16, 32],
            long_scales: vec![24, 48, 96],
            price_std_window: 63,
            signal_std_window: 252,
        }
    }
}

impl MacdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.short_scales.len() != self.long_scales.len() || self.short_scales.is_empty() {
            return Err(Error::invalid("MACD needs matching, non-empty scale lists"));
        }
        if self
            .short_scales
            .iter()
            .zip(&self.long_scales)
            .any(|(s, l)| *s < 2 || s >= l)
        {
            return Err(Error::invalid("MACD scales need 2 <= S < L pairwise"));
        }
        if self.price_std_window < 2 || self.signal_std_window < 2 {
            return Err(Error::invalid("MACD std windows must be at least 2"));
        }
        Ok(())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.short_scales.iter().copied().zip(self.long_scales.iter().copied())
    }
}

/// Exponentially weighted mean of a price path with time scale `j`
/// (decay `1 - 1/j`), starting at the first finite price.
pub fn ewm_mean(prices: &[f64], scale: usize) -> Vec<f64> {
    let mut stats = EwmStats::new(timescale_decay(scale));
    prices
        .iter()
        .map(|&p| {
            if p.is_finite() {
                stats.push(p);
                stats.mean().unwrap_or(f64::NAN)
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Raw MACD `m(S) - m(L)` of a price path.
pub fn macd_raw(prices: &[f64], short: usize, long: usize) -> Vec<f64> {
    let ms = ewm_mean(prices, short);
    let ml = ewm_mean(prices, long);
    ms.iter().zip(&ml).map(|(a, b)| a - b).collect()
}

/// Doubly normalized MACD signal `Y_t(S, L)` of a single price path.
///
/// The MACD is divided by the rolling sample std of the last
/// `price_std_window` prices, then by the rolling sample std of the last
/// `signal_std_window` normalized values. An entry is NaN until `L + 1`
/// prices feed the normalized MACD and a full signal window of those is
/// available, or when either std is zero.
pub fn macd_signal_series(prices: &[f64], short: usize, long: usize, cfg: &MacdConfig) -> Vec<f64> {
    let t_len = prices.len();
    let raw = macd_raw(prices, short, long);
    let first = prices.iter().position(|p| p.is_finite());
    let mut q = vec![f64::NAN; t_len];
    if let Some(first) = first {
        for t in first..t_len {
            let seen = t - first + 1;
            if seen < (long + 1).max(cfg.price_std_window) {
                continue;
            }
            let window = &prices[t + 1 - cfg.price_std_window..=t];
            if let Some(s) = sample_std(window) {
                if s > 0.0 {
                    q[t] = raw[t] / s;
                }
            }
        }
    }
    let w = cfg.signal_std_window;
    let mut y = vec![f64::NAN; t_len];
    for t in 0..t_len {
        if t + 1 < w {
            continue;
        }
        let window = &q[t + 1 - w..=t];
        if window.iter().any(|v| !v.is_finite()) {
            continue;
        }
        if let Some(s) = sample_std(window) {
            if s > 0.0 {
                y[t] = q[t] / s;
            }
        }
    }
    y
}

/// `Y_t(S_k, L_k)` for every scale pair: one `T x N` matrix per pair.
pub fn macd_features(panel: &ReturnsPanel, cfg: &MacdConfig) -> Result<Vec<Matrix>> {
    cfg.validate()?;
    let per_asset: Vec<Vec<Vec<f64>>> = (0..panel.n_assets())
        .map(|i| {
            let prices = panel.price_path(i);
            cfg.pairs()
                .map(|(s, l)| macd_signal_series(&prices, s, l, cfg))
                .collect()
        })
        .collect();
    Ok((0..cfg.short_scales.len())
        .map(|k| {
            let cols: Vec<Vec<f64>> = per_asset.iter().map(|a| a[k].clone()).collect();
            Matrix::from_columns(&cols)
        })
        .collect())
}

/// Bounded odd response `y * exp(-y^2 / 4) / 0.89`.
pub fn response_phi(y: f64) -> f64 {
    y * (-y * y / 4.0).exp() / 0.89
}

/// Horizons and MACD settings that define the feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub horizons: Vec<usize>,
    pub macd: MacdConfig,
    pub vol_span: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            horizons: DEFAULT_HORIZONS.to_vec(),
            macd: MacdConfig::default(),
            vol_span: DEFAULT_VOL_SPAN,
        }
    }
}

impl FeatureSpec {
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.horizons.iter().map(|k| format!("NORM_RET_{k}")).collect();
        names.extend(self.macd.pairs().map(|(s, l)| format!("MACD_{s}_{l}")));
        names
    }
}

/// Spatio-temporal input: for each date `t`, asset `i`, lag `j < tau` and
/// feature `k`, the value of feature `k` of asset `i` at date `t - j`.
///
/// Stored as the `T x N x d` base features; lags are views into it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    feature_names: Vec<String>,
    tau: usize,
    base: Vec<f64>,
}

impl FeatureTensor {
    /// Builds from base features laid out `[t][asset][feature]`.
    pub fn from_parts(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        feature_names: Vec<String>,
        tau: usize,
        base: Vec<f64>,
    ) -> Result<Self> {
        if tau == 0 {
            return Err(Error::invalid("tau must be at least 1"));
        }
        let want = dates.len() * assets.len() * feature_names.len();
        if base.len() != want {
            return Err(Error::ShapeMismatch {
                op: "FeatureTensor",
                detail: format!("base has {} values, expected {want}", base.len()),
            });
        }
        Ok(Self {
            dates,
            assets,
            feature_names,
            tau,
            base,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }
    pub fn assets(&self) -> &[String] {
        &self.assets
    }
    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }
    pub fn tau(&self) -> usize {
        self.tau
    }
    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }
    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Flattened input length `N * tau * d`.
    pub fn flat_len(&self) -> usize {
        self.n_assets() * self.tau * self.n_features()
    }

    /// Same base features with a different history length.
    pub fn with_tau(&self, tau: usize) -> Result<Self> {
        Self::from_parts(
            self.dates.clone(),
            self.assets.clone(),
            self.feature_names.clone(),
            tau,
            self.base.clone(),
        )
    }

    #[inline]
    pub fn base(&self, t: usize, i: usize, k: usize) -> f64 {
        let (n, d) = (self.n_assets(), self.n_features());
        self.base[(t * n + i) * d + k]
    }

    /// Entry `(t, i, j, k)`; NaN when `j > t`.
    pub fn get(&self, t: usize, i: usize, j: usize, k: usize) -> f64 {
        if j > t {
            f64::NAN
        } else {
            self.base(t - j, i, k)
        }
    }

    fn row_valid(&self, t: usize, asset: Option<usize>) -> bool {
        let d = self.n_features();
        match asset {
            Some(i) => (0..d).all(|k| self.base(t, i, k).is_finite()),
            None => (0..self.n_assets()).all(|i| (0..d).all(|k| self.base(t, i, k).is_finite())),
        }
    }

    /// True when every entry of the `tau`-lag window at `t` is finite.
    pub fn usable(&self, t: usize) -> bool {
        t + 1 >= self.tau && (0..self.tau).all(|j| self.row_valid(t - j, None))
    }

    /// Per-asset usability of the lag window (used by single-asset models).
    pub fn usable_for_asset(&self, t: usize, i: usize) -> bool {
        t + 1 >= self.tau && (0..self.tau).all(|j| self.row_valid(t - j, Some(i)))
    }

    pub fn usable_mask(&self) -> Vec<bool> {
        (0..self.n_dates()).map(|t| self.usable(t)).collect()
    }

    /// Flat sample at `t` in `[asset][lag][feature]` order.
    pub fn flat_sample(&self, t: usize, out: &mut Vec<f64>) {
        for i in 0..self.n_assets() {
            for j in 0..self.tau {
                for k in 0..self.n_features() {
                    out.push(self.get(t, i, j, k));
                }
            }
        }
    }

    /// Sequence sample at `t`: `tau` chronological steps of `[asset][feature]`.
    pub fn sequence_sample(&self, t: usize, out: &mut Vec<f64>) {
        for step in 0..self.tau {
            let j = self.tau - 1 - step;
            for i in 0..self.n_assets() {
                for k in 0..self.n_features() {
                    out.push(self.get(t, i, j, k));
                }
            }
        }
    }

    /// Single-asset sequence at `t`: `tau` chronological steps of features.
    pub fn asset_sequence_sample(&self, t: usize, i: usize, out: &mut Vec<f64>) {
        for step in 0..self.tau {
            let j = self.tau - 1 - step;
            for k in 0..self.n_features() {
                out.push(self.get(t, i, j, k));
            }
        }
    }

    /// Human-readable label of flat input index (`asset:feature@lag`).
    pub fn flat_label(&self, idx: usize) -> String {
        let d = self.n_features();
        let k = idx % d;
        let j = (idx / d) % self.tau;
        let i = idx / (d * self.tau);
        format!("{}:{}@lag{}", self.assets[i], self.feature_names[k], j)
    }

    /// Long CSV `date,asset,lag,feature,value` of usable dates.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "asset", "lag", "feature", "value"])?;
        for t in 0..self.n_dates() {
            if !self.usable(t) {
                continue;
            }
            let date = self.dates[t].format("%Y-%m-%d").to_string();
            for (i, a) in self.assets.iter().enumerate() {
                for j in 0..self.tau {
                    for (k, name) in self.feature_names.iter().enumerate() {
                        w.write_record([
                            date.as_str(),
                            a.as_str(),
                            &j.to_string(),
                            name.as_str(),
                            &format_exact(self.get(t, i, j, k)),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Computes every feature for every asset and stacks them with `tau` lags.
pub fn assemble_tensor(
    panel: &ReturnsPanel,
    vol: &VolatilityEstimates,
    spec: &FeatureSpec,
    tau: usize,
    exec: Execution,
) -> Result<FeatureTensor> {
    spec.macd.validate()?;
    if tau == 0 {
        return Err(Error::invalid("tau must be at least 1"));
    }
    if spec.horizons.contains(&0) {
        return Err(Error::invalid("horizons must be positive"));
    }
    let (t_len, n) = (panel.n_dates(), panel.n_assets());
    let d = spec.horizons.len() + spec.macd.short_scales.len();

    // [asset][feature][t]
    let per_asset: Vec<Vec<Vec<f64>>> = exec.map_range(n, |i| {
        let mut cols = Vec::with_capacity(d);
        for &k in &spec.horizons {
            cols.push(
                (0..t_len)
                    .map(|t| {
                        let sigma = vol.get(t, i);
                        match window_return(panel, t, i, k) {
                            Some(r) if sigma.is_finite() => r / (sigma * (k as f64).sqrt()),
                            _ => f64::NAN,
                        }
                    })
                    .collect(),
            );
        }
        let prices = panel.price_path(i);
        for (s, l) in spec.macd.pairs() {
            cols.push(macd_signal_series(&prices, s, l, &spec.macd));
        }
        cols
    });

    let mut base = vec![f64::NAN; t_len * n * d];
    for (i, cols) in per_asset.iter().enumerate() {
        for (k, col) in cols.iter().enumerate() {
            for (t, v) in col.iter().enumerate() {
                base[(t * n + i) * d + k] = *v;
            }
        }
    }
    FeatureTensor::from_parts(
        panel.dates().to_vec(),
        panel.assets().to_vec(),
        spec.names(),
        tau,
        base,
    )
}
