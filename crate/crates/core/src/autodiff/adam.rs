use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), AutodiffError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(AutodiffError::ParamMismatch {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001 after one step; bias correction restores 1 and 1,
        // so the update is lr / (1 + eps).
        let mut p = vec![Tensor::scalar(2.0)];
        let mut st = AdamState::new(&p, 0.1, 0.9, 0.999, 1e-8);
        st.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::column(vec![1.0, -2.0])];
        let mut st = AdamState::new(&p, 0.1, 0.5, 0.9, 1e-8);
        st.step(&mut p, &[Tensor::zeros(&[2, 1])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn deterministic_runs() {
        let run = || {
            let mut p = vec![Tensor::column(vec![0.3, 0.7, -1.1])];
            let mut st = AdamState::new(&p, 0.01, 0.5, 0.9, 1e-8);
            for k in 0..50 {
                let g = p[0].map(|x| 2.0 * x + k as f64 * 1e-3);
                st.step(&mut p, &[g]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a[0]), bits(&b[0]));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::column(vec![1.0, 2.0])];
        let mut st = AdamState::new(&p, 0.1, 0.5, 0.9, 1e-8);
        assert!(st.step(&mut p, &[Tensor::scalar(1.0)]).is_err());
    }
}
