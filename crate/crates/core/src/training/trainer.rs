use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{l1_penalty, l1_penalty_var, net_captured_var, sharpe_loss_var};
use super::samples::SampleSet;
use crate::models::{ArchitectureSpec, Network};
use crate::tensor_ad::{clip_gradient_norm, AdamState, Graph, Tensor};
use crate::{Error, Result};

pub const DEFAULT_PATIENCE: usize = 25;
pub const DEFAULT_SIGMA_TGT: f64 = 0.15;
/// Largest number of samples evaluated in one forward pass outside training.
pub const EVAL_CHUNK: usize = 1024;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed of `master` along a path of stream identifiers.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

/// Seed stream tags.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const EPOCH: u64 = 2;
    pub const SEARCH: u64 = 3;
    pub const CANDIDATE: u64 = 4;
    pub const WINDOW: u64 = 5;
    pub const PERMUTATION: u64 = 6;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub l1_alpha: f64,
    pub dropout_rate: f64,
    pub hidden_size: usize,
    /// Per-asset loss weights; `None` means `1 / N`.
    pub task_weights: Option<Vec<f64>>,
    /// Transaction cost charged during training; 0 disables turnover
    /// regularization.
    pub cost_bps_train: f64,
    /// Annualized volatility target.
    pub sigma_tgt: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            patience: DEFAULT_PATIENCE,
            batch_size: 64,
            learning_rate: 1e-3,
            max_grad_norm: 1.0,
            l1_alpha: 0.0,
            dropout_rate: 0.0,
            hidden_size: 10,
            task_weights: None,
            cost_bps_train: 0.0,
            sigma_tgt: DEFAULT_SIGMA_TGT,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::invalid("learning rate and max gradient norm must be positive"));
        }
        if !(self.l1_alpha >= 0.0 && self.cost_bps_train >= 0.0 && self.sigma_tgt > 0.0) {
            return Err(Error::invalid("alpha, cost and volatility target must be non-negative"));
        }
        Ok(())
    }

    pub fn sigma_tgt_daily(&self) -> f64 {
        self.sigma_tgt / super::loss::TRADING_DAYS.sqrt()
    }

    fn weights(&self, outputs: usize) -> Result<Vec<f64>> {
        match &self.task_weights {
            Some(w) if w.len() == outputs => Ok(w.clone()),
            Some(w) => Err(Error::invalid(format!(
                "{} task weights for {outputs} outputs",
                w.len()
            ))),
            None => Ok(super::loss::equal_weights(outputs)),
        }
    }
}

/// Early-stopping bookkeeping on validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records epoch `epoch` (1-based). Returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Architecture of a candidate after applying the configuration's sizes.
pub fn arch_for(kind_spec: &ArchitectureSpec, cfg: &TrainConfig) -> ArchitectureSpec {
    let mut a = ArchitectureSpec::new(kind_spec.kind, cfg.hidden_size, cfg.dropout_rate).with_tau(kind_spec.tau);
    if let (Some(c), Some(base)) = (a.conv.as_mut(), kind_spec.conv) {
        c.kernel_width = base.kernel_width;
        c.pool_window = base.pool_window;
    }
    a
}

struct BatchLoss {
    graph: Graph,
    vars: Vec<crate::tensor_ad::Var>,
    data: crate::tensor_ad::Var,
    l1: Option<crate::tensor_ad::Var>,
}

/// Loss of `net` on samples `idx`: the data term (Sharpe on cost-adjusted
/// returns) and, when `with_l1`, the L1 term on the same tape.
fn batch_loss(
    net: &Network,
    set: &SampleSet,
    idx: &[usize],
    cfg: &TrainConfig,
    weights: &[f64],
    rng: Option<&mut ChaCha8Rng>,
    with_l1: bool,
) -> Result<BatchLoss> {
    let mut g = Graph::new();
    let vars = net.params.bind(&mut g);
    let (x, iv, sr) = set.gather(idx);
    let mut shape = vec![idx.len()];
    shape.extend(net.sample_shape());
    let xv = g.input(Tensor::new(shape, x)?);
    let y = net.forward(&mut g, &vars, xv, rng)?;
    let o = net.n_outputs();
    let y3 = if net.kind().is_recurrent() {
        y
    } else {
        g.reshape(y, vec![1, idx.len(), o])?
    };
    let captured = net_captured_var(&mut g, y3, iv, sr, cfg.cost_bps_train)?;
    let rows = idx.len() * set.steps;
    let flat = g.reshape(captured, vec![rows, o])?;
    let data = sharpe_loss_var(&mut g, flat, weights)?;
    let l1 = if with_l1 && cfg.l1_alpha > 0.0 {
        Some(l1_penalty_var(&mut g, vars[net.input_weight_index()], cfg.l1_alpha))
    } else {
        None
    };
    Ok(BatchLoss {
        graph: g,
        vars,
        data,
        l1,
    })
}

/// Full objective (Sharpe on cost-adjusted returns plus L1) on samples
/// `idx`, together with its gradient with respect to every parameter.
pub fn loss_and_gradient(
    net: &Network,
    set: &SampleSet,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let weights = cfg.weights(net.n_outputs())?;
    let mut b = batch_loss(net, set, idx, cfg, &weights, None, true)?;
    let total = match b.l1 {
        Some(l1) => b.graph.add(b.data, l1)?,
        None => b.data,
    };
    let grads = b.graph.backward(total)?;
    let value = b.graph.value(total).data[0];
    Ok((value, net.params.collect_grads(&grads, &b.vars)))
}

/// Objective value without gradients, evaluated in chronological order
/// with dropout off.
pub fn evaluate_loss(net: &Network, set: &SampleSet, cfg: &TrainConfig) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::invalid("evaluation needs at least two samples"));
    }
    let weights = cfg.weights(net.n_outputs())?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let b = batch_loss(net, set, &idx, cfg, &weights, None, false)?;
    b.graph.check_finite()?;
    let w = &net.params.iter().nth(net.input_weight_index()).unwrap().1.data;
    Ok(b.graph.value(b.data).data[0] + l1_penalty(w, cfg.l1_alpha))
}

/// Deployed signals for every sample, `(len, outputs)` row-major.
pub fn predict_set(net: &Network, set: &SampleSet) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(set.len() * net.n_outputs());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _, _) = set.gather(chunk);
        out.extend(net.predict(&x, chunk.len())?);
    }
    Ok(out)
}

/// Soft-thresholds `w` by `k`.
fn soft_threshold(w: &mut [f64], k: f64) {
    for v in w {
        *v = v.signum() * (v.abs() - k).max(0.0);
    }
}

/// Minibatch Adam with gradient clipping and early stopping on the
/// validation objective. The L1 term is handled by a proximal step after
/// each update, so weights it switches off are exactly zero.
pub fn train_model(
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
    n_assets: usize,
    n_features: usize,
    train: &SampleSet,
    val: &SampleSet,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 || val.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least two training and validation samples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::INIT]));
    let mut net = Network::new(arch.clone(), n_assets, n_features, &mut init_rng)?;
    let weights = cfg.weights(net.n_outputs())?;
    let l1_index = net.input_weight_index();
    let mut adam = AdamState::new(&net.params, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let mut best = net.params.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::EPOCH, epoch as u64]));
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 && !net.kind().is_recurrent() {
                continue;
            }
            let b = batch_loss(&net, train, chunk, cfg, &weights, Some(&mut rng), false)?;
            let grads = b.graph.backward(b.data)?;
            let mut gv = net.params.collect_grads(&grads, &b.vars);
            if gv.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "gradient" });
            }
            clip_gradient_norm(&mut gv, cfg.max_grad_norm);
            adam.step(&mut net.params, &gv);
            if cfg.l1_alpha > 0.0 {
                let w = &mut net.params.tensors_mut()[l1_index].data;
                soft_threshold(w, cfg.learning_rate * cfg.l1_alpha);
            }
            let w = &net.params.iter().nth(l1_index).unwrap().1.data;
            sum += b.graph.value(b.data).data[0] + l1_penalty(w, cfg.l1_alpha);
            batches += 1;
        }
        let train_loss = if batches > 0 { sum / batches as f64 } else { f64::NAN };
        let val_loss = evaluate_loss(&net, val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { op: "validation loss" });
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        let (improved, stop) = stopper.update(epoch, val_loss);
        if improved {
            best = net.params.clone();
        }
        if stop {
            break;
        }
    }
    net.params = best;
    Ok(TrainOutcome {
        network: net,
        log,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchitectureKind;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    /// One asset whose next-day return is `0.2 * x + noise` where `x` is
    /// the first of two features.
    fn predictive_set(n: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = SampleSet::empty(2, 1, 1);
        for t in 0..n {
            let x = normal(&mut rng);
            let noise = normal(&mut rng);
            set.inputs.extend([x, normal(&mut rng)]);
            set.inv_vol.push(1.0);
            set.scaled_returns.push(0.2 * x + noise);
            set.dates.push(t);
            set.assets.push(None);
        }
        set
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn early_stopping_on_worsening_loss() {
        let mut s = EarlyStopping::new(25);
        let mut stopped_at = None;
        for epoch in 1..=500 {
            let (_, stop) = s.update(epoch, epoch as f64);
            if stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(26));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn soft_threshold_examples() {
        let mut w = vec![0.5, -0.05, 0.1, -2.0];
        soft_threshold(&mut w, 0.1);
        assert_eq!(w, vec![0.4, 0.0, 0.0, -1.9]);
    }

    #[test]
    fn slp_learns_a_linear_signal() {
        let train = predictive_set(2000, 1);
        let val = predictive_set(1000, 2);
        let arch = ArchitectureSpec::new(ArchitectureKind::Slp, 0, 0.0).with_tau(1);
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 128,
            learning_rate: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train_model(&arch, &cfg, 1, 2, &train, &val).unwrap();
        // the validation loss is the negative annualized Sharpe
        assert!(out.best_val_loss < -1.0, "{}", out.best_val_loss);
        let w = &out.network.params.iter().next().unwrap().1.data;
        assert!(w[0].abs() > w[1].abs());
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let train = predictive_set(300, 3);
        let val = predictive_set(60, 4);
        let arch = ArchitectureSpec::new(ArchitectureKind::Mlp, 4, 0.3).with_tau(1);
        let cfg = TrainConfig {
            epochs: 5,
            hidden_size: 4,
            dropout_rate: 0.3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train_model(&arch, &cfg, 1, 2, &train, &val).unwrap();
        let b = train_model(&arch, &cfg, 1, 2, &train, &val).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.network, b.network);
    }

    #[test]
    fn restores_best_epoch_parameters() {
        let train = predictive_set(300, 5);
        let val = predictive_set(60, 6);
        let arch = ArchitectureSpec::new(ArchitectureKind::Slp, 0, 0.0).with_tau(1);
        let cfg = TrainConfig {
            epochs: 30,
            patience: 3,
            learning_rate: 0.5,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train_model(&arch, &cfg, 1, 2, &train, &val).unwrap();
        let v = evaluate_loss(&out.network, &val, &cfg).unwrap();
        assert_eq!(v, out.best_val_loss);
    }
}
