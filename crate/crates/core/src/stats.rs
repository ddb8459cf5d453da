//! Shared streaming and windowed statistics.

/// Decay factor for span semantics: `1 - 2 / (span + 1)`.
pub fn span_decay(span: usize) -> f64 {
    1.0 - 2.0 / (span as f64 + 1.0)
}

/// Decay factor for a MACD time scale `j`: `1 - 1/j`.
pub fn timescale_decay(scale: usize) -> f64 {
    1.0 - 1.0 / scale as f64
}

/// Half-life in observations of the EWM used for MACD time scale `j`.
pub fn macd_half_life(scale: usize) -> f64 {
    0.5f64.ln() / timescale_decay(scale).ln()
}

/// Causal exponentially weighted mean and bias-corrected variance.
///
/// Observation weights are `decay^k` for the observation `k` steps back,
/// normalized by their sum. Updates use a weighted Welford recursion so
/// that large level offsets (price series) do not cancel catastrophically.
#[derive(Debug, Clone)]
pub struct EwmStats {
    decay: f64,
    count: usize,
    mean: f64,
    biased_var: f64,
    sum_w: f64,
    sum_w2: f64,
}

impl EwmStats {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            count: 0,
            mean: 0.0,
            biased_var: 0.0,
            sum_w: 0.0,
            sum_w2: 0.0,
        }
    }

    pub fn with_span(span: usize) -> Self {
        Self::new(span_decay(span))
    }

    pub fn push(&mut self, x: f64) {
        if self.count == 0 {
            self.mean = x;
            self.biased_var = 0.0;
            self.sum_w = 1.0;
            self.sum_w2 = 1.0;
        } else {
            let old_w = self.sum_w * self.decay;
            self.sum_w2 *= self.decay * self.decay;
            let old_mean = self.mean;
            let total = old_w + 1.0;
            if old_mean != x {
                self.mean = (old_w * old_mean + x) / total;
            }
            let d_old = old_mean - self.mean;
            let d_new = x - self.mean;
            self.biased_var = (old_w * (self.biased_var + d_old * d_old) + d_new * d_new) / total;
            self.sum_w = total;
            self.sum_w2 += 1.0;
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    /// Bias-corrected variance; `None` with fewer than two observations.
    pub fn variance(&self) -> Option<f64> {
        if self.count < 2 {
            return None;
        }
        let num = self.sum_w * self.sum_w;
        let den = num - self.sum_w2;
        if den <= 0.0 {
            return None;
        }
        Some((num / den * self.biased_var).max(0.0))
    }

    pub fn std(&self) -> Option<f64> {
        self.variance().map(f64::sqrt)
    }
}

/// Sample standard deviation (n - 1 denominator) of a slice.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let mean = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Population standard deviation of a slice.
pub fn population_std(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mean = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    Some((ss / xs.len() as f64).sqrt())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolation quantile of already sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}
