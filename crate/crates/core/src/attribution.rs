//! Feature attribution: exact linear Shapley values for the SLP and
//! permutation importance for any model.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::features::{FeatureTensor, VolatilityEstimates};
use crate::market_data::{format_exact, ReturnsPanel};
use crate::matrix::Matrix;
use crate::models::{ArchitectureKind, Network};
use crate::stats::{mean, sample_std};
use crate::training::{derive_seed, flat_to_model_layout, stream, TRADING_DAYS};
use crate::{Error, Result};

pub const DEFAULT_TOP: usize = 20;
pub const DEFAULT_PERMUTATIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: String,
    pub rank: usize,
    pub mean_abs_attr: f64,
}

/// Mean absolute attribution of every output to every flat input.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAttribution {
    pub assets: Vec<String>,
    pub labels: Vec<String>,
    /// `(outputs, inputs)`.
    pub mean_abs: Matrix,
    pub background: Vec<f64>,
}

fn slp_weights(net: &Network) -> Result<(&[f64], &[f64])> {
    if net.kind() != ArchitectureKind::Slp {
        return Err(Error::UnsupportedModel(format!(
            "linear attribution needs an SLP, got {}; use permutation importance instead",
            net.kind()
        )));
    }
    let mut it = net.params.iter();
    let w = &it.next().expect("weight").1.data;
    let b = &it.next().expect("bias").1.data;
    Ok((w, b))
}

/// Attribution of each output `i` to each input `j` at sample `x`:
/// `w[j][i] * (x[j] - background[j])`, as an `(outputs, inputs)` matrix.
pub fn attribution_at(net: &Network, x: &[f64], background: &[f64]) -> Result<Matrix> {
    let (w, _) = slp_weights(net)?;
    let n = net.n_outputs();
    let m = w.len() / n;
    if x.len() != m || background.len() != m {
        return Err(Error::ShapeMismatch {
            op: "attribution",
            detail: format!("sample of {} values for {m} inputs", x.len()),
        });
    }
    let mut out = Matrix::zeros(n, m);
    for j in 0..m {
        let dx = x[j] - background[j];
        for i in 0..n {
            out.set(i, j, w[j * n + i] * dx);
        }
    }
    Ok(out)
}

/// Pre-activation `w^T x + b` of an SLP.
pub fn slp_preactivation(net: &Network, x: &[f64]) -> Result<Vec<f64>> {
    let (w, b) = slp_weights(net)?;
    let n = net.n_outputs();
    let mut z = b.to_vec();
    for (j, xj) in x.iter().enumerate() {
        for i in 0..n {
            z[i] += w[j * n + i] * xj;
        }
    }
    Ok(z)
}

fn flat_rows(tensor: &FeatureTensor, dates: &[usize]) -> Result<Vec<f64>> {
    let mut rows = Vec::with_capacity(dates.len() * tensor.flat_len());
    for &t in dates {
        if !tensor.usable(t) {
            return Err(Error::invalid(format!("date index {t} has incomplete features")));
        }
        tensor.flat_sample(t, &mut rows);
    }
    Ok(rows)
}

/// Linear Shapley attribution of an SLP over the samples at `dates`.
/// The background defaults to the sample mean of each input.
pub fn slp_linear_attribution(
    net: &Network,
    tensor: &FeatureTensor,
    dates: &[usize],
    background: Option<Vec<f64>>,
) -> Result<LinearAttribution> {
    slp_weights(net)?;
    if dates.is_empty() {
        return Err(Error::invalid("attribution needs at least one sample"));
    }
    let m = tensor.flat_len();
    let rows = flat_rows(tensor, dates)?;
    let background = match background {
        Some(b) => b,
        None => (0..m)
            .map(|j| rows.iter().skip(j).step_by(m).sum::<f64>() / dates.len() as f64)
            .collect(),
    };
    let mut mean_abs = Matrix::zeros(net.n_outputs(), m);
    for x in rows.chunks(m) {
        let a = attribution_at(net, x, &background)?;
        for i in 0..a.rows() {
            for j in 0..m {
                mean_abs.set(i, j, mean_abs.get(i, j) + a.get(i, j).abs());
            }
        }
    }
    let mean_abs = mean_abs.map(|v| v / dates.len() as f64);
    Ok(LinearAttribution {
        assets: tensor.assets().to_vec(),
        labels: (0..m).map(|j| tensor.flat_label(j)).collect(),
        mean_abs,
        background,
    })
}

fn rank(labels: &[String], scores: &[f64], top: usize) -> Vec<RankedFeature> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(top)
        .enumerate()
        .map(|(r, j)| RankedFeature {
            feature: labels[j].clone(),
            rank: r + 1,
            mean_abs_attr: scores[j],
        })
        .collect()
}

impl LinearAttribution {
    /// Top features for one asset's signal.
    pub fn top_for_asset(&self, asset: usize, top: usize) -> Vec<RankedFeature> {
        rank(&self.labels, self.mean_abs.row(asset), top)
    }

    /// Top features by mean absolute attribution summed over all signals.
    pub fn top_global(&self, top: usize) -> Vec<RankedFeature> {
        let totals: Vec<f64> = (0..self.labels.len())
            .map(|j| (0..self.mean_abs.rows()).map(|i| self.mean_abs.get(i, j)).sum())
            .collect();
        rank(&self.labels, &totals, top)
    }

    pub fn asset_index(&self, name: &str) -> Option<usize> {
        self.assets.iter().position(|a| a == name)
    }
}

/// CSV `feature,rank,mean_abs_attr`.
pub fn write_ranked_csv<W: Write>(rows: &[RankedFeature], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["feature", "rank", "mean_abs_attr"])?;
    for r in rows {
        w.write_record([r.feature.as_str(), &r.rank.to_string(), &format_exact(r.mean_abs_attr)])?;
    }
    w.flush()?;
    Ok(())
}

/// Deployed signals `(dates, assets)` from canonical flat rows.
fn signals_from_flat(net: &Network, rows: &[f64], n_dates: usize) -> Result<Vec<f64>> {
    let m = rows.len() / n_dates.max(1);
    let n = net.n_assets;
    let mut input = Vec::with_capacity(n_dates * net.sample_len() * n);
    if net.kind() == ArchitectureKind::Dmn {
        for x in rows.chunks(m) {
            for i in 0..n {
                flat_to_model_layout(net, x, Some(i), &mut input);
            }
        }
        net.predict(&input, n_dates * n)
    } else {
        for x in rows.chunks(m) {
            flat_to_model_layout(net, x, None, &mut input);
        }
        net.predict(&input, n_dates)
    }
}

/// Annualized Sharpe of the equal-weight volatility-scaled returns earned
/// by `signals` (rows aligned with `dates`). Zero when undefined.
fn strategy_sharpe(signals: &[f64], dates: &[usize], panel: &ReturnsPanel, vol: &VolatilityEstimates) -> f64 {
    let n = panel.n_assets();
    let mut rets = Vec::with_capacity(dates.len());
    for (row, &t) in dates.iter().enumerate() {
        if t + 1 >= panel.n_dates() {
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            let (s, r) = (vol.get(t, i), panel.ret(t + 1, i));
            if s.is_finite() && r.is_finite() {
                sum += signals[row * n + i] / s * r;
                count += 1;
            }
        }
        if count > 0 {
            rets.push(sum / count as f64);
        }
    }
    match sample_std(&rets) {
        Some(sd) if sd > 0.0 => mean(&rets) / sd * TRADING_DAYS.sqrt(),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationImportance {
    pub feature: String,
    pub degradation: f64,
}

/// Sharpe degradation from shuffling each `(asset, lag, feature)` input
/// across the dates at `dates`, averaged over `n_permutations` seeded
/// shuffles. Also returns the unshuffled Sharpe.
#[allow(clippy::too_many_arguments)]
pub fn permutation_importance(
    net: &Network,
    tensor: &FeatureTensor,
    panel: &ReturnsPanel,
    vol: &VolatilityEstimates,
    dates: &[usize],
    n_permutations: usize,
    seed: u64,
    exec: Execution,
) -> Result<(f64, Vec<PermutationImportance>)> {
    if tensor.tau() != net.spec.tau {
        return Err(Error::invalid("tensor tau differs from the model"));
    }
    if dates.len() < 3 || n_permutations == 0 {
        return Err(Error::invalid("need at least three dates and one permutation"));
    }
    let m = tensor.flat_len();
    let rows = flat_rows(tensor, dates)?;
    let base = strategy_sharpe(&signals_from_flat(net, &rows, dates.len())?, dates, panel, vol);
    let scores = exec.map_range(m, |j| -> Result<f64> {
        let mut total = 0.0;
        for p in 0..n_permutations {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::PERMUTATION, j as u64, p as u64]));
            let mut order: Vec<usize> = (0..dates.len()).collect();
            order.shuffle(&mut rng);
            let mut shuffled = rows.clone();
            for (dst, &src) in order.iter().enumerate() {
                shuffled[dst * m + j] = rows[src * m + j];
            }
            let s = signals_from_flat(net, &shuffled, dates.len())?;
            total += base - strategy_sharpe(&s, dates, panel, vol);
        }
        Ok(total / n_permutations as f64)
    });
    let out = scores
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            s.map(|degradation| PermutationImportance {
                feature: tensor.flat_label(j),
                degradation,
            })
        })
        .collect::<Result<_>>()?;
    Ok((base, out))
}

/// Ranks permutation importances by degradation.
pub fn rank_importance(items: &[PermutationImportance], top: usize) -> Vec<RankedFeature> {
    let labels: Vec<String> = items.iter().map(|i| i.feature.clone()).collect();
    let scores: Vec<f64> = items.iter().map(|i| i.degradation).collect();
    rank(&labels, &scores, top)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchitectureSpec;
    use crate::tensor_ad::ParamId;

    fn slp(n: usize, m: usize) -> Network {
        let spec = ArchitectureSpec::new(ArchitectureKind::Slp, 0, 0.0).with_tau(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Network::new(spec, n, m / n, &mut rng).unwrap()
    }

    #[test]
    fn background_sample_has_zero_attribution() {
        let net = slp(2, 4);
        let x = [0.3, -0.1, 0.7, 2.0];
        let a = attribution_at(&net, &x, &x).unwrap();
        assert!(a.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attributions_sum_to_preactivation_change() {
        let net = slp(2, 4);
        let x = [0.3, -0.1, 0.7, 2.0];
        let mu = [0.1, 0.2, -0.3, 0.4];
        let a = attribution_at(&net, &x, &mu).unwrap();
        let (zx, zm) = (slp_preactivation(&net, &x).unwrap(), slp_preactivation(&net, &mu).unwrap());
        for i in 0..2 {
            let s: f64 = a.row(i).iter().sum();
            assert!((s - (zx[i] - zm[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn single_weight_single_attribution() {
        let mut net = slp(1, 3);
        net.params.get_mut(ParamId(0)).data = vec![0.0, 2.5, 0.0];
        let a = attribution_at(&net, &[1.0, 1.0, 1.0], &[0.0; 3]).unwrap();
        assert_eq!(a.row(0), &[0.0, 2.5, 0.0]);
    }

    #[test]
    fn non_slp_rejected() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Mlp, 3, 0.0).with_tau(1);
        let net = Network::new(spec, 1, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            attribution_at(&net, &[0.0; 2], &[0.0; 2]),
            Err(Error::UnsupportedModel(_))
        ));
    }

    #[test]
    fn ranking_orders_by_score_then_index() {
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = rank(&labels, &[0.5, 0.9, 0.5], 3);
        let names: Vec<&str> = r.iter().map(|x| x.feature.as_str()).collect();
        assert_eq!(names, ["b", "a", "c"]);
        assert_eq!(r[2].rank, 3);
    }
}
