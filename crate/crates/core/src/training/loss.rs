use crate::tensor_ad::{Graph, Tensor, Var};
use crate::{Error, Result};

pub const VARIANCE_EPSILON: f64 = 1e-12;
pub const TRADING_DAYS: f64 = 252.0;

/// Converts a cost in basis points to a fraction of notional.
pub fn bps_to_fraction(bps: f64) -> f64 {
    bps * 1e-4
}

/// Equal task weights `1 / n`.
pub fn equal_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Weighted negative annualized Sharpe ratio of the columns of `captured
/// (rows, n)`, recorded on the tape.
pub fn sharpe_loss_var(g: &mut Graph, captured: Var, weights: &[f64]) -> Result<Var> {
    let n = *g.shape(captured).last().unwrap_or(&0);
    if weights.len() != n {
        return Err(Error::ShapeMismatch {
            op: "sharpe_loss",
            detail: format!("{} task weights for {n} assets", weights.len()),
        });
    }
    let mean = g.mean_rows(captured);
    let neg_mean = g.scale(mean, -1.0);
    let centered = g.add_bias(captured, neg_mean)?;
    let sq = g.square(centered);
    let var = g.mean_rows(sq);
    let var = g.add_scalar(var, VARIANCE_EPSILON);
    let sd = g.sqrt(var);
    let ratio = g.div(mean, sd)?;
    let k = -TRADING_DAYS.sqrt();
    g.dot_const(ratio, weights.iter().map(|w| w * k).collect())
}

/// `sum_i w_i * (-sqrt(252) * mean_t R_i / std_t R_i)` with population std.
/// `captured` is row-major `(rows, n)`.
pub fn sharpe_loss(captured: &[f64], n: usize, weights: &[f64]) -> Result<f64> {
    if n == 0 || !captured.len().is_multiple_of(n) {
        return Err(Error::invalid("captured returns do not split into assets"));
    }
    let rows = captured.len() / n;
    if rows < 2 {
        return Err(Error::invalid("Sharpe loss needs at least two time steps"));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![rows, n], captured.to_vec())?);
    let loss = sharpe_loss_var(&mut g, x, weights)?;
    g.check_finite()?;
    Ok(g.value(loss).data[0])
}

/// `alpha * sum |w|` on the tape.
pub fn l1_penalty_var(g: &mut Graph, w: Var, alpha: f64) -> Var {
    let a = g.abs(w);
    let s = g.sum(a);
    g.scale(s, alpha)
}

pub fn l1_penalty(weights: &[f64], alpha: f64) -> f64 {
    alpha * weights.iter().map(|w| w.abs()).sum::<f64>()
}

/// Captured returns net of turnover costs.
///
/// `signals` has shape `(O, L, N)`: turnover pairs neighbours along `L`
/// (consecutive days of a sequence, or consecutive samples of a minibatch)
/// and the first element of each run is charged nothing. `inv_vol` holds
/// `sigma_tgt / sigma` and `scaled_returns` holds
/// `sigma_tgt / sigma * r_next`, both shaped like `signals`.
pub fn net_captured_var(
    g: &mut Graph,
    signals: Var,
    inv_vol: Vec<f64>,
    scaled_returns: Vec<f64>,
    cost_bps: f64,
) -> Result<Var> {
    let captured = g.mul_const(signals, scaled_returns)?;
    if cost_bps == 0.0 {
        return Ok(captured);
    }
    let positions = g.mul_const(signals, inv_vol)?;
    let diff = g.lag_diff(positions)?;
    let to = g.abs(diff);
    let cost = g.scale(to, bps_to_fraction(cost_bps));
    g.sub(captured, cost)
}

/// Sharpe loss on cost-adjusted captured returns for signals shaped
/// `(O, L, N)`. With `cost_bps = 0` this equals [`sharpe_loss`].
pub fn turnover_regularized_loss(
    signals: &[f64],
    shape: [usize; 3],
    inv_vol: &[f64],
    scaled_returns: &[f64],
    cost_bps: f64,
    weights: &[f64],
) -> Result<f64> {
    if cost_bps < 0.0 {
        return Err(Error::invalid("cost must be non-negative"));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(shape.to_vec(), signals.to_vec())?);
    let net = net_captured_var(&mut g, x, inv_vol.to_vec(), scaled_returns.to_vec(), cost_bps)?;
    let flat = g.reshape(net, vec![shape[0] * shape[1], shape[2]])?;
    let loss = sharpe_loss_var(&mut g, flat, weights)?;
    g.check_finite()?;
    Ok(g.value(loss).data[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharpe_of_three_day_series() {
        let loss = sharpe_loss(&[0.01, 0.02, 0.03], 1, &[1.0]).unwrap();
        let sd = (2.0f64 / 3.0).sqrt() * 0.01;
        let expected = -(252f64).sqrt() * 0.02 / (sd * sd + VARIANCE_EPSILON).sqrt();
        assert!((loss - expected).abs() < 1e-9);
        assert!((loss + 38.88).abs() < 0.01);
    }

    #[test]
    fn alternating_returns_have_zero_loss() {
        let r = [0.01, -0.01, 0.01, -0.01];
        assert!(sharpe_loss(&r, 1, &[1.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_returns_hit_the_epsilon_guard() {
        let loss = sharpe_loss(&[0.001; 10], 1, &[1.0]).unwrap();
        let expected = -(252f64).sqrt() * 0.001 / VARIANCE_EPSILON.sqrt();
        assert!(loss.is_finite());
        assert!((loss / expected - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sharpe_requires_two_rows() {
        assert!(sharpe_loss(&[0.01, 0.02], 2, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_penalty(&[1.0, -2.0], 0.0), 0.0);
        assert_eq!(l1_penalty(&[1.0, -2.0], 0.5), 1.5);
    }

    #[test]
    fn zero_cost_matches_plain_sharpe() {
        let x = [0.5, -0.2, 0.9, 0.1, 0.3, -0.7];
        let iv = [2.0, 1.0, 3.0, 1.5, 2.5, 1.0];
        let r = [0.01, -0.02, 0.005, 0.02, -0.01, 0.004];
        let sr: Vec<f64> = iv.iter().zip(&r).map(|(a, b)| a * b).collect();
        let with = turnover_regularized_loss(&x, [1, 3, 2], &iv, &sr, 0.0, &[0.5, 0.5]).unwrap();
        let captured: Vec<f64> = x.iter().zip(&sr).map(|(a, b)| a * b).collect();
        assert_eq!(with, sharpe_loss(&captured, 2, &[0.5, 0.5]).unwrap());
    }

    #[test]
    fn pair_turnover_arithmetic() {
        // positions 0.15 * 2 and 0.15 * 1: one pair, turnover 0.15
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap());
        let iv = vec![0.15 * 2.0, 0.15 * 1.0];
        let net = net_captured_var(&mut g, x, iv, vec![0.0, 0.0], 1e4).unwrap();
        let v = &g.value(net).data;
        assert_eq!(v[0], 0.0);
        assert!((v[1] + 0.15).abs() < 1e-15);
    }

    #[test]
    fn constant_positions_cost_nothing() {
        let x = [0.4; 5];
        let iv = [1.0; 5];
        let sr = [0.01, 0.02, -0.01, 0.0, 0.03];
        let a = turnover_regularized_loss(&x, [1, 5, 1], &iv, &sr, 10.0, &[1.0]).unwrap();
        let b = turnover_regularized_loss(&x, [1, 5, 1], &iv, &sr, 0.0, &[1.0]).unwrap();
        assert_eq!(a, b);
    }
}
