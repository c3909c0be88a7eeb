use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Two-layer perceptron with a tanh hidden layer and a scalar output:
/// `w2 · tanh(w1ᵀ x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    /// `d_in × hidden`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// The `hidden × 1` output weights, stored flat.
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Gradients of the scalar output (times an upstream factor) with respect to
/// every parameter and to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub input: Vec<f64>,
}

impl Mlp2 {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        assert!(hidden > 0, "hidden width must be positive");
        Self {
            w1: Matrix::zeros(d_in, hidden),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(d_in, hidden);
        let a1 = (6.0 / (d_in + hidden) as f64).sqrt();
        for v in m.w1.as_mut_slice() {
            *v = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        for v in &mut m.w2 {
            *v = rng.random_range(-a2..a2);
        }
        m
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in() {
            return Err(Error::DimensionMismatch {
                what: "mlp input",
                expected: self.d_in(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.w1.tr_matvec(x).expect("checked input");
        for (zi, bi) in z.iter_mut().zip(&self.b1) {
            *zi = (*zi + bi).tanh();
        }
        z
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let a = self.hidden_activations(x);
        Ok(super::dot(&self.w2, &a) + self.b2)
    }

    /// Backpropagates `upstream * d(out)` through the network.
    pub fn backward(&self, x: &[f64], upstream: f64) -> Result<MlpGrads> {
        self.check_input(x)?;
        let a = self.hidden_activations(x);
        let w2: Vec<f64> = a.iter().map(|ai| upstream * ai).collect();
        // d out / d z_j = w2_j (1 - a_j^2)
        let dz: Vec<f64> = a
            .iter()
            .zip(&self.w2)
            .map(|(ai, wj)| upstream * wj * (1.0 - ai * ai))
            .collect();
        let mut w1 = Matrix::zeros(self.d_in(), self.hidden());
        w1.add_outer(1.0, x, &dz);
        let input = self.w1.matvec(&dz)?;
        Ok(MlpGrads {
            w1,
            b1: dz,
            w2,
            b2: upstream,
            input,
        })
    }

    /// Parameter blocks in a fixed order: `w1`, `b1`, `w2`, `[b2]`.
    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            &mut self.w2,
            std::slice::from_mut(&mut self.b2),
        ]
    }

    pub fn param_sizes(&self) -> [usize; 4] {
        let (d, h) = (self.d_in(), self.hidden());
        [d * h, h, h, 1]
    }

    pub fn num_params(&self) -> usize {
        self.param_sizes().iter().sum()
    }

    /// All parameters concatenated in [`Mlp2::params_mut`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut rest = flat;
        for block in self.params_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

impl MlpGrads {
    pub fn zeros_like(m: &Mlp2) -> Self {
        Self {
            w1: Matrix::zeros(m.d_in(), m.hidden()),
            b1: vec![0.0; m.hidden()],
            w2: vec![0.0; m.hidden()],
            b2: 0.0,
            input: vec![0.0; m.d_in()],
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.w1.as_mut_slice().iter_mut().zip(other.w1.as_slice()) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        self.b2 += other.b2;
        for (a, b) in self.input.iter_mut().zip(&other.input) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        self.b1.iter_mut().for_each(|v| *v *= s);
        self.w2.iter_mut().for_each(|v| *v *= s);
        self.b2 *= s;
        self.input.iter_mut().for_each(|v| *v *= s);
    }

    /// Parameter gradients (input gradient excluded) in `Mlp2::params_mut` order.
    pub fn param_blocks(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            &self.b1,
            &self.w2,
            std::slice::from_ref(&self.b2),
        ]
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        self.param_blocks().concat()
    }
}
