use std::ops::Range;

use crate::features::{FeatureTensor, VolatilityEstimates};
use crate::market_data::ReturnsPanel;
use crate::models::{ArchitectureKind, Network};
use crate::{Error, Result};

/// Materialized model inputs with the per-step quantities the loss needs.
///
/// Inputs are laid out per [`Network::sample_shape`]. For each sample,
/// `inv_vol` and `scaled_returns` hold `steps x outputs` values of
/// `sigma_tgt / sigma_s` and `sigma_tgt / sigma_s * r_{s+1}`, where `s`
/// runs over the output steps ending at the sample date.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub sample_len: usize,
    pub steps: usize,
    pub outputs: usize,
    pub inputs: Vec<f64>,
    pub inv_vol: Vec<f64>,
    pub scaled_returns: Vec<f64>,
    /// Signal date index of each sample.
    pub dates: Vec<usize>,
    /// Asset of each sample for single-asset models.
    pub assets: Vec<Option<usize>>,
}

impl SampleSet {
    pub fn empty(sample_len: usize, steps: usize, outputs: usize) -> Self {
        Self {
            sample_len,
            steps,
            outputs,
            inputs: Vec::new(),
            inv_vol: Vec::new(),
            scaled_returns: Vec::new(),
            dates: Vec::new(),
            assets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn label_len(&self) -> usize {
        self.steps * self.outputs
    }

    pub fn input(&self, s: usize) -> &[f64] {
        &self.inputs[s * self.sample_len..(s + 1) * self.sample_len]
    }

    /// Gathers inputs and labels for `idx` into contiguous buffers.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let ll = self.label_len();
        let mut x = Vec::with_capacity(idx.len() * self.sample_len);
        let mut iv = Vec::with_capacity(idx.len() * ll);
        let mut sr = Vec::with_capacity(idx.len() * ll);
        for &s in idx {
            x.extend_from_slice(self.input(s));
            iv.extend_from_slice(&self.inv_vol[s * ll..(s + 1) * ll]);
            sr.extend_from_slice(&self.scaled_returns[s * ll..(s + 1) * ll]);
        }
        (x, iv, sr)
    }

    /// Samples `range` of this set, in order.
    pub fn subset(&self, range: Range<usize>) -> Self {
        let ll = self.label_len();
        Self {
            sample_len: self.sample_len,
            steps: self.steps,
            outputs: self.outputs,
            inputs: self.inputs[range.start * self.sample_len..range.end * self.sample_len].to_vec(),
            inv_vol: self.inv_vol[range.start * ll..range.end * ll].to_vec(),
            scaled_returns: self.scaled_returns[range.start * ll..range.end * ll].to_vec(),
            dates: self.dates[range.clone()].to_vec(),
            assets: self.assets[range].to_vec(),
        }
    }
}

/// Where sample inputs come from and how targets are scaled.
pub struct SampleSource<'a> {
    pub panel: &'a ReturnsPanel,
    pub vol: &'a VolatilityEstimates,
    pub tensor: &'a FeatureTensor,
    /// Daily volatility target.
    pub sigma_tgt_daily: f64,
}

impl SampleSource<'_> {
    /// Step labels for outputs ending at date `t`, or `None` when any is
    /// missing. `asset = None` means every asset.
    fn labels(&self, t: usize, steps: usize, asset: Option<usize>, with_returns: bool) -> Option<(Vec<f64>, Vec<f64>)> {
        if t + 1 < steps {
            return None;
        }
        let assets: Vec<usize> = match asset {
            Some(i) => vec![i],
            None => (0..self.panel.n_assets()).collect(),
        };
        let mut iv = Vec::with_capacity(steps * assets.len());
        let mut sr = Vec::with_capacity(steps * assets.len());
        for s in t + 1 - steps..=t {
            for &i in &assets {
                let sigma = self.vol.get(s, i);
                if !sigma.is_finite() {
                    return None;
                }
                let k = self.sigma_tgt_daily / sigma;
                let r = if with_returns {
                    if s + 1 >= self.panel.n_dates() {
                        return None;
                    }
                    let r = self.panel.ret(s + 1, i);
                    if !r.is_finite() {
                        return None;
                    }
                    r
                } else {
                    0.0
                };
                iv.push(k);
                sr.push(k * r);
            }
        }
        Some((iv, sr))
    }

    /// Samples whose signal date lies in `dates`.
    ///
    /// With `with_returns`, only samples whose next-day returns are known
    /// are kept (training); otherwise labels are zero (inference).
    pub fn build(&self, net: &Network, dates: Range<usize>, with_returns: bool) -> Result<SampleSet> {
        let kind = net.kind();
        let tensor = self.tensor;
        if tensor.tau() != net.spec.tau {
            return Err(Error::invalid(format!(
                "tensor tau {} differs from model tau {}",
                tensor.tau(),
                net.spec.tau
            )));
        }
        if tensor.n_assets() != net.n_assets || tensor.n_features() != net.n_features {
            return Err(Error::ShapeMismatch {
                op: "samples",
                detail: "tensor dimensions differ from the model".into(),
            });
        }
        let steps = net.output_steps();
        let mut set = SampleSet::empty(net.sample_len(), steps, net.n_outputs());
        let mut buf = Vec::with_capacity(net.sample_len());
        for t in dates {
            if kind == ArchitectureKind::Dmn {
                for i in 0..tensor.n_assets() {
                    if !tensor.usable_for_asset(t, i) {
                        continue;
                    }
                    let Some((iv, sr)) = self.labels(t, steps, Some(i), with_returns) else {
                        continue;
                    };
                    buf.clear();
                    tensor.asset_sequence_sample(t, i, &mut buf);
                    set.inputs.extend_from_slice(&buf);
                    set.inv_vol.extend(iv);
                    set.scaled_returns.extend(sr);
                    set.dates.push(t);
                    set.assets.push(Some(i));
                }
                continue;
            }
            if !tensor.usable(t) {
                continue;
            }
            let Some((iv, sr)) = self.labels(t, steps, None, with_returns) else {
                continue;
            };
            buf.clear();
            match kind {
                ArchitectureKind::Slp | ArchitectureKind::Mlp => tensor.flat_sample(t, &mut buf),
                _ => tensor.sequence_sample(t, &mut buf),
            }
            set.inputs.extend_from_slice(&buf);
            set.inv_vol.extend(iv);
            set.scaled_returns.extend(sr);
            set.dates.push(t);
            set.assets.push(None);
        }
        Ok(set)
    }
}

/// Reorders a canonical `[asset][lag][feature]` flat sample into the
/// input layout of `net` (single-asset models take asset `asset`).
pub fn flat_to_model_layout(net: &Network, flat: &[f64], asset: Option<usize>, out: &mut Vec<f64>) {
    let (n, d, tau) = (net.n_assets, net.n_features, net.spec.tau);
    let at = |i: usize, j: usize, k: usize| flat[(i * tau + j) * d + k];
    match net.kind() {
        ArchitectureKind::Slp | ArchitectureKind::Mlp => out.extend_from_slice(flat),
        ArchitectureKind::Cnn | ArchitectureKind::Lstm => {
            for step in 0..tau {
                for i in 0..n {
                    for k in 0..d {
                        out.push(at(i, tau - 1 - step, k));
                    }
                }
            }
        }
        ArchitectureKind::Dmn => {
            let i = asset.expect("single-asset layout needs an asset");
            for step in 0..tau {
                for k in 0..d {
                    out.push(at(i, tau - 1 - step, k));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{assemble_tensor, ex_ante_volatility, FeatureSpec};
    use crate::matrix::Matrix;
    use crate::models::ArchitectureSpec;
    use crate::Execution;
    use chrono::{Duration, NaiveDate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel(n: usize, t: usize) -> ReturnsPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..t).map(|_| rng.gen_range(-0.02..0.02)).collect())
            .collect();
        let start = NaiveDate::from_ymd_opt(2000, 1, 3).unwrap();
        let dates = (0..t).map(|k| start + Duration::days(k as i64)).collect();
        let assets = (0..n).map(|i| format!("A{i}")).collect();
        ReturnsPanel::new(dates, assets, Matrix::from_columns(&cols), None).unwrap()
    }

    fn small_spec() -> FeatureSpec {
        let mut s = FeatureSpec::default();
        s.horizons = vec![1, 5];
        s.macd.short_scales = vec![2];
        s.macd.long_scales = vec![4];
        s.macd.price_std_window = 5;
        s.macd.signal_std_window = 5;
        s.vol_span = 5;
        s
    }

    #[test]
    fn layouts_agree_with_tensor_samples() {
        let p = panel(3, 40);
        let spec = small_spec();
        let vol = ex_ante_volatility(&p, spec.vol_span).unwrap();
        for kind in ArchitectureKind::ALL {
            let arch = ArchitectureSpec::new(kind, 2, 0.0).with_tau(4);
            let tensor = assemble_tensor(&p, &vol, &spec, 4, Execution::Sequential).unwrap();
            let net = Network::new(arch, 3, tensor.n_features(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let src = SampleSource { panel: &p, vol: &vol, tensor: &tensor, sigma_tgt_daily: 0.01 };
            let set = src.build(&net, 0..40, true).unwrap();
            assert!(!set.is_empty());
            for s in 0..set.len() {
                let mut flat = Vec::new();
                tensor.flat_sample(set.dates[s], &mut flat);
                let mut out = Vec::new();
                flat_to_model_layout(&net, &flat, set.assets[s], &mut out);
                assert_eq!(out, set.input(s), "{kind}");
            }
            // the final date has no next-day return
            assert!(set.dates.iter().all(|&t| t < 39));
        }
    }

    #[test]
    fn labels_use_next_day_returns() {
        let p = panel(2, 40);
        let spec = small_spec();
        let vol = ex_ante_volatility(&p, spec.vol_span).unwrap();
        let tensor = assemble_tensor(&p, &vol, &spec, 1, Execution::Sequential).unwrap();
        let arch = ArchitectureSpec::new(ArchitectureKind::Slp, 0, 0.0).with_tau(1);
        let net = Network::new(arch, 2, tensor.n_features(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let src = SampleSource { panel: &p, vol: &vol, tensor: &tensor, sigma_tgt_daily: 0.01 };
        let set = src.build(&net, 0..40, true).unwrap();
        let t = set.dates[0];
        let k = 0.01 / vol.get(t, 1);
        assert_eq!(set.inv_vol[1], k);
        assert_eq!(set.scaled_returns[1], k * p.ret(t + 1, 1));
    }
}
