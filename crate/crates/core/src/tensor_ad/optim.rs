use serde::{Deserialize, Serialize};

use super::layers::Parameters;

/// Global L2 norm over a set of gradient buffers.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the factor applied (1.0 when no clipping happened).
pub fn clip_gradient_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
        *v *= scale;
    }
    scale
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &Parameters, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Applies one update and returns the per-entry step taken
    /// (`lr * m_hat / (sqrt(v_hat) + eps)`, before subtraction).
    pub fn step(&mut self, params: &mut Parameters, grads: &[Vec<f64>]) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (k, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.first_moment[k], &mut self.second_moment[k]);
            for (j, w) in t.data.iter_mut().enumerate() {
                let g = grads[k][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_ad::Tensor;

    fn one_param(v: f64) -> Parameters {
        let mut p = Parameters::new();
        p.add("w", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn clipping_examples() {
        let mut zero = vec![vec![0.0, 0.0]];
        assert_eq!(clip_gradient_norm(&mut zero, 1.0), 1.0);

        let mut g = vec![vec![3.0], vec![4.0]];
        let s = clip_gradient_norm(&mut g, 2.5);
        assert!((s - 0.5).abs() < 1e-15);
        assert!((global_norm(&g) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one_param(0.7);
        let mut adam = AdamState::new(&p, 0.1);
        for _ in 0..10 {
            adam.step(&mut p, &[vec![0.0]]);
        }
        assert_eq!(p.get(crate::tensor_ad::ParamId(0)).data[0], 0.7);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        // With g constant, m_hat = g and v_hat = g^2 exactly, so every step
        // is lr * g / (|g| + eps).
        let lr = 0.01;
        let g = 0.3;
        let mut p = one_param(0.0);
        let mut adam = AdamState::new(&p, lr);
        let mut prev = 0.0;
        for _ in 0..200 {
            adam.step(&mut p, &[vec![g]]);
            let now = p.get(crate::tensor_ad::ParamId(0)).data[0];
            let expected = lr * g / (g + 1e-8);
            assert!(((prev - now) - expected).abs() < 1e-12);
            prev = now;
        }
    }
}
