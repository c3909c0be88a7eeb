use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam optimizer state over a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, block_sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every block.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::DimensionMismatch {
                what: "adam block count",
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let n = self.first[i].len();
            if p.len() != n || g.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "adam block",
                    expected: n,
                    got: if p.len() != n { p.len() } else { g.len() },
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[b], &mut self.second[b]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = AdamState::new(0.1, &[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.steps_taken(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        // m̂ = g, v̂ = g², so the update is -lr·g/(|g| + eps).
        let lr = 0.01;
        let mut adam = AdamState::new(lr, &[3]);
        let g = [0.5, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        adam.step(&mut [&mut p], &[&g]).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
        }
    }

    #[test]
    fn averaged_duplicate_batch_equals_single_gradient() {
        let g = [0.25, -0.75];
        let avg: Vec<f64> = g.iter().map(|v| (v + v) / 2.0).collect();
        let mut a = AdamState::new(0.05, &[2]);
        let mut b = AdamState::new(0.05, &[2]);
        let (mut pa, mut pb) = (vec![1.0, 1.0], vec![1.0, 1.0]);
        for _ in 0..2 {
            a.step(&mut [&mut pa], &[&g]).unwrap();
            b.step(&mut [&mut pb], &[&avg]).unwrap();
        }
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut adam = AdamState::new(0.1, &[2]);
        let mut p = vec![0.0; 3];
        assert!(adam.step(&mut [&mut p], &[&[0.0; 3]]).is_err());
        let mut p = vec![0.0; 2];
        assert!(adam.step(&mut [&mut p], &[&[0.0; 2], &[0.0]]).is_err());
        assert_eq!(adam.steps_taken(), 0);
    }
}
