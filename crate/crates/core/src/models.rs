//! Spatio-temporal momentum architectures and the single-asset DMN.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor_ad::{
    dense, dropout, glorot_uniform, lstm_step, Graph, LstmVars, Parameters, Tensor, Var,
};
use crate::{Error, Result};

pub const DEFAULT_CNN_KERNEL: usize = 3;
pub const DEFAULT_CNN_POOL: usize = 4;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureKind {
    Slp,
    Mlp,
    Cnn,
    Lstm,
    Dmn,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 5] = [Self::Slp, Self::Mlp, Self::Cnn, Self::Lstm, Self::Dmn];

    pub fn default_tau(self) -> usize {
        match self {
            Self::Slp | Self::Mlp => 5,
            Self::Cnn | Self::Lstm | Self::Dmn => 63,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Self::Dmn => 100,
            _ => 500,
        }
    }

    /// Recurrent models emit one signal per time step of the input window.
    pub fn is_recurrent(self) -> bool {
        matches!(self, Self::Lstm | Self::Dmn)
    }

    pub fn uses_dropout(self) -> bool {
        !matches!(self, Self::Slp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Slp => "slp",
            Self::Mlp => "mlp",
            Self::Cnn => "cnn",
            Self::Lstm => "lstm",
            Self::Dmn => "dmn",
        }
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slp" => Ok(Self::Slp),
            "mlp" => Ok(Self::Mlp),
            "cnn" => Ok(Self::Cnn),
            "lstm" => Ok(Self::Lstm),
            "dmn" => Ok(Self::Dmn),
            other => Err(Error::invalid(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_width: usize,
    pub channels: usize,
    pub pool_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchitectureKind,
    pub hidden_size: usize,
    pub dropout_rate: f64,
    pub tau: usize,
    pub conv: Option<ConvSpec>,
}

impl ArchitectureSpec {
    pub fn new(kind: ArchitectureKind, hidden_size: usize, dropout_rate: f64) -> Self {
        let conv = (kind == ArchitectureKind::Cnn).then_some(ConvSpec {
            kernel_width: DEFAULT_CNN_KERNEL,
            channels: hidden_size,
            pool_window: DEFAULT_CNN_POOL,
        });
        Self {
            kind,
            hidden_size,
            dropout_rate: if kind.uses_dropout() { dropout_rate } else { 0.0 },
            tau: kind.default_tau(),
            conv,
        }
    }

    pub fn with_tau(mut self, tau: usize) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::invalid("tau must be at least 1"));
        }
        if self.hidden_size == 0 && self.kind != ArchitectureKind::Slp {
            return Err(Error::invalid("hidden size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        if self.kind == ArchitectureKind::Cnn {
            let c = self
                .conv
                .ok_or_else(|| Error::invalid("CNN requires a conv spec"))?;
            if c.kernel_width == 0 || c.channels == 0 || c.pool_window == 0 {
                return Err(Error::invalid("conv sizes must be positive"));
            }
            if self.tau < c.pool_window {
                return Err(Error::invalid(format!(
                    "tau {} is shorter than the pool window {}",
                    self.tau, c.pool_window
                )));
            }
        }
        Ok(())
    }
}

/// Parameters plus the bookkeeping needed to run a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: ArchitectureSpec,
    pub n_assets: usize,
    pub n_features: usize,
    pub params: Parameters,
}

impl Network {
    /// Freshly initialized network for `n_assets` assets with `n_features`
    /// features each.
    pub fn new(spec: ArchitectureSpec, n_assets: usize, n_features: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        if n_assets == 0 || n_features == 0 {
            return Err(Error::invalid("network needs at least one asset and one feature"));
        }
        let (n, d, tau, h) = (n_assets, n_features, spec.tau, spec.hidden_size);
        let mut p = Parameters::new();
        let dense_layer = |p: &mut Parameters, tag: &str, fan_in: usize, fan_out: usize, rng: &mut _| {
            p.add(format!("{tag}.weight"), glorot_uniform(vec![fan_in, fan_out], fan_in, fan_out, rng));
            p.add(format!("{tag}.bias"), Tensor::zeros(vec![fan_out]));
        };
        match spec.kind {
            ArchitectureKind::Slp => dense_layer(&mut p, "out", n * tau * d, n, rng),
            ArchitectureKind::Mlp => {
                dense_layer(&mut p, "hidden", n * tau * d, h, rng);
                dense_layer(&mut p, "out", h, n, rng);
            }
            ArchitectureKind::Cnn => {
                let c = spec.conv.expect("validated");
                let (w, ch) = (c.kernel_width, c.channels);
                p.add("conv1.kernel", glorot_uniform(vec![w, n * d, ch], w * n * d, w * ch, rng));
                p.add("conv1.bias", Tensor::zeros(vec![ch]));
                p.add("conv2.kernel", glorot_uniform(vec![w, ch, ch], w * ch, w * ch, rng));
                p.add("conv2.bias", Tensor::zeros(vec![ch]));
                let pooled = (tau / c.pool_window) * ch;
                dense_layer(&mut p, "hidden", pooled, h, rng);
                dense_layer(&mut p, "out", h, n, rng);
            }
            ArchitectureKind::Lstm | ArchitectureKind::Dmn => {
                let (input, out) = if spec.kind == ArchitectureKind::Dmn { (d, 1) } else { (n * d, n) };
                p.add("lstm.input_weight", glorot_uniform(vec![input, 4 * h], input, 4 * h, rng));
                p.add("lstm.recurrent_weight", glorot_uniform(vec![h, 4 * h], h, 4 * h, rng));
                let mut b = vec![0.0; 4 * h];
                b[h..2 * h].iter_mut().for_each(|v| *v = FORGET_BIAS);
                p.add("lstm.bias", Tensor::new(vec![4 * h], b)?);
                dense_layer(&mut p, "out", h, out, rng);
            }
        }
        Ok(Self {
            spec,
            n_assets,
            n_features,
            params: p,
        })
    }

    pub fn kind(&self) -> ArchitectureKind {
        self.spec.kind
    }

    /// Width of the signal output: `N` for spatio-temporal kinds, 1 for DMN.
    pub fn n_outputs(&self) -> usize {
        if self.kind() == ArchitectureKind::Dmn {
            1
        } else {
            self.n_assets
        }
    }

    /// Number of output time steps per sample.
    pub fn output_steps(&self) -> usize {
        if self.kind().is_recurrent() {
            self.spec.tau
        } else {
            1
        }
    }

    /// Input shape of a batch, excluding the batch dimension.
    pub fn sample_shape(&self) -> Vec<usize> {
        let (n, d, tau) = (self.n_assets, self.n_features, self.spec.tau);
        match self.kind() {
            ArchitectureKind::Slp | ArchitectureKind::Mlp => vec![n * tau * d],
            ArchitectureKind::Cnn | ArchitectureKind::Lstm => vec![tau, n * d],
            ArchitectureKind::Dmn => vec![tau, d],
        }
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Name of the input-layer weight that the L1 penalty acts on.
    pub fn input_weight_name(&self) -> &'static str {
        match self.kind() {
            ArchitectureKind::Slp => "out.weight",
            ArchitectureKind::Mlp => "hidden.weight",
            ArchitectureKind::Cnn => "conv1.kernel",
            ArchitectureKind::Lstm | ArchitectureKind::Dmn => "lstm.input_weight",
        }
    }

    pub fn input_weight_index(&self) -> usize {
        self.params
            .find(self.input_weight_name())
            .expect("input weight present")
            .0
    }

    /// Forward pass on bound parameters `vars`.
    ///
    /// Returns `(B, N)` signals for feed-forward kinds and `(B, tau, out)`
    /// signal sequences for recurrent ones. Dropout is active only when a
    /// generator is supplied.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rate = self.spec.dropout_rate;
        let shape = g.shape(x).to_vec();
        let want = self.sample_shape();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("input {:?}, expected (batch, {:?})", shape, want),
            });
        }
        match self.kind() {
            ArchitectureKind::Slp => {
                let z = dense(g, x, vars[0], vars[1])?;
                Ok(g.tanh(z))
            }
            ArchitectureKind::Mlp => self.mlp_head(g, &vars[0..4], x, rng),
            ArchitectureKind::Cnn => {
                let c = self.spec.conv.expect("validated");
                let h1 = g.causal_conv1d(x, vars[0], vars[1])?;
                let h1 = g.tanh(h1);
                let h2 = g.causal_conv1d(h1, vars[2], vars[3])?;
                let h2 = g.tanh(h2);
                let pooled = g.avg_pool1d(h2, c.pool_window)?;
                let ps = g.shape(pooled).to_vec();
                let flat = g.reshape(pooled, vec![ps[0], ps[1] * ps[2]])?;
                self.mlp_head(g, &vars[4..8], flat, rng)
            }
            ArchitectureKind::Lstm | ArchitectureKind::Dmn => {
                let lstm = LstmVars {
                    w: vars[0],
                    v: vars[1],
                    b: vars[2],
                    hidden: self.spec.hidden_size,
                };
                let mut state = None;
                let mut hs = Vec::with_capacity(self.spec.tau);
                for s in 0..self.spec.tau {
                    let u = g.select_step(x, s)?;
                    let (h, c) = lstm_step(g, u, state, &lstm)?;
                    state = Some((h, c));
                    hs.push(dropout(g, h, rate, rng.as_deref_mut())?);
                }
                let seq = g.stack_steps(&hs)?;
                let z = dense(g, seq, vars[3], vars[4])?;
                Ok(g.tanh(z))
            }
        }
    }

    fn mlp_head(&self, g: &mut Graph, vars: &[Var], x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let z1 = dense(g, x, vars[0], vars[1])?;
        let a1 = g.tanh(z1);
        let a1 = dropout(g, a1, self.spec.dropout_rate, rng)?;
        let z2 = dense(g, a1, vars[2], vars[3])?;
        Ok(g.tanh(z2))
    }

    /// Deployed signals for a batch of samples laid out per
    /// [`Network::sample_shape`]: `(B, n_outputs)` row-major. Recurrent
    /// models report the final step.
    pub fn predict(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let mut shape = vec![batch];
        shape.extend(self.sample_shape());
        let x = g.input(Tensor::new(shape, inputs.to_vec())?);
        let mut y = self.forward(&mut g, &vars, x, None)?;
        if self.kind().is_recurrent() {
            y = g.select_step(y, self.spec.tau - 1)?;
        }
        g.check_finite()?;
        Ok(g.value(y).data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn zeroed(mut net: Network) -> Network {
        for t in net.params.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        net
    }

    fn random_input(net: &Network, batch: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..batch * net.sample_len()).map(|_| r.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_parameters_give_zero_signals() {
        for kind in ArchitectureKind::ALL {
            let spec = ArchitectureSpec::new(kind, 4, 0.2).with_tau(4);
            let net = zeroed(Network::new(spec, 3, 2, &mut rng()).unwrap());
            let x = random_input(&net, 5, 1);
            let y = net.predict(&x, 5).unwrap();
            assert_eq!(y.len(), 5 * net.n_outputs());
            assert!(y.iter().all(|v| *v == 0.0), "{kind}");
        }
    }

    #[test]
    fn signals_stay_inside_unit_interval() {
        for kind in ArchitectureKind::ALL {
            let spec = ArchitectureSpec::new(kind, 6, 0.0).with_tau(4);
            let mut net = Network::new(spec, 3, 2, &mut rng()).unwrap();
            for t in net.params.tensors_mut() {
                t.data.iter_mut().for_each(|v| *v *= 20.0);
            }
            let x = random_input(&net, 8, 2);
            assert!(net.predict(&x, 8).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn slp_weight_shape() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Slp, 0, 0.0).with_tau(1);
        let net = Network::new(spec, 2, 8, &mut rng()).unwrap();
        assert_eq!(net.params.iter().next().unwrap().1.shape, vec![16, 2]);
        assert_eq!(net.spec.dropout_rate, 0.0);
    }

    #[test]
    fn mlp_with_zero_output_weight_is_constant() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Mlp, 5, 0.0).with_tau(2);
        let mut net = Network::new(spec, 2, 3, &mut rng()).unwrap();
        let w2 = net.params.find("out.weight").unwrap();
        net.params.get_mut(w2).data.iter_mut().for_each(|v| *v = 0.0);
        let b2 = net.params.find("out.bias").unwrap();
        net.params.get_mut(b2).data = vec![0.3, -0.7];
        let y = net.predict(&random_input(&net, 4, 9), 4).unwrap();
        for row in y.chunks(2) {
            assert_eq!(row, [0.3f64.tanh(), (-0.7f64).tanh()]);
        }
    }

    #[test]
    fn cnn_final_step_matters() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Cnn, 3, 0.0).with_tau(8);
        let net = Network::new(spec, 2, 2, &mut rng()).unwrap();
        let mut x = random_input(&net, 1, 5);
        let a = net.predict(&x, 1).unwrap();
        let last = x.len() - 1;
        x[last] += 1.0;
        let b = net.predict(&x, 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn cnn_requires_tau_at_least_pool() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Cnn, 3, 0.0).with_tau(3);
        assert!(Network::new(spec, 2, 2, &mut rng()).is_err());
    }

    #[test]
    fn dmn_shares_weights_across_assets() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Dmn, 4, 0.0).with_tau(5);
        let net = Network::new(spec, 3, 2, &mut rng()).unwrap();
        let one = random_input(&net, 1, 4);
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let y = net.predict(&two, 2).unwrap();
        assert_eq!(y[0], y[1]);
    }

    #[test]
    fn lstm_forget_bias_initialized() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Lstm, 3, 0.0).with_tau(2);
        let net = Network::new(spec, 1, 1, &mut rng()).unwrap();
        let b = net.params.get(net.params.find("lstm.bias").unwrap());
        assert_eq!(b.data, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Slp, 0, 0.0).with_tau(1);
        let net = Network::new(spec, 2, 2, &mut rng()).unwrap();
        assert!(matches!(net.predict(&[0.0; 5], 1), Err(Error::ShapeMismatch { .. })));
    }
}
