//! Affine layers for the MLP control model.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::params::{LayerGrads, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenseActivation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    n_in: usize,
    n_out: usize,
    activation: DenseActivation,
    /// Row-major `(n_out, n_in)`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseRecord {
    pub inputs: Array2<f64>,
    pub outputs: Array2<f64>,
}

impl DenseLayer {
    /// He-normal weights, zero bias.
    pub fn init_he<R: Rng + ?Sized>(n_in: usize, n_out: usize, activation: DenseActivation, rng: &mut R) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(KanError::InvalidArgument(format!("layer dims must be >= 1, got {n_in}x{n_out}")));
        }
        let dist = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).expect("positive std");
        let weights = (0..n_in * n_out).map(|_| dist.sample(rng)).collect();
        Ok(Self { n_in, n_out, activation, weights, bias: vec![0.0; n_out] })
    }

    pub fn from_parts(
        n_in: usize,
        n_out: usize,
        activation: DenseActivation,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != n_in * n_out {
            return Err(KanError::LengthMismatch { expected: n_in * n_out, got: weights.len() });
        }
        if bias.len() != n_out {
            return Err(KanError::LengthMismatch { expected: n_out, got: bias.len() });
        }
        Ok(Self { n_in, n_out, activation, weights, bias })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn activation(&self) -> DenseActivation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.n_out, self.n_in), &self.weights).expect("consistent shape")
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<DenseRecord> {
        if x.ncols() != self.n_in {
            return Err(KanError::ShapeMismatch {
                expected: format!("batch x {}", self.n_in),
                got: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        let mut out = x.dot(&self.weight_view().t());
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
                if self.activation == DenseActivation::Tanh {
                    *v = v.tanh();
                }
            }
        }
        Ok(DenseRecord { inputs: x.to_owned(), outputs: out })
    }

    pub fn backward_with(
        &self,
        record: &DenseRecord,
        d_out: ArrayView2<'_, f64>,
        need_input_grad: bool,
    ) -> Result<(Option<Array2<f64>>, LayerGrads)> {
        if d_out.dim() != record.outputs.dim() {
            return Err(KanError::ShapeMismatch {
                expected: format!("{:?}", record.outputs.dim()),
                got: format!("{:?}", d_out.dim()),
            });
        }
        let d_pre = match self.activation {
            DenseActivation::Identity => d_out.to_owned(),
            DenseActivation::Tanh => &d_out * &record.outputs.mapv(|y| 1.0 - y * y),
        };
        let d_w = d_pre.t().dot(&record.inputs);
        let d_b = d_pre.sum_axis(Axis(0));
        let dx = need_input_grad.then(|| d_pre.dot(&self.weight_view()));
        Ok((dx, LayerGrads { groups: vec![d_w.into_raw_vec_and_offset().0, d_b.to_vec()] }))
    }
}

impl Parameters for DenseLayer {
    fn param_groups(&self) -> Vec<&[f64]> {
        vec![&self.weights, &self.bias]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(1, "dense");
        let layer = DenseLayer::init_he(3, 2, DenseActivation::Tanh, &mut r).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
        let wy = Array2::from_shape_fn((4, 2), |_| r.random_range(-1.0..1.0));
        let loss = |l: &DenseLayer| (&l.forward(x.view()).unwrap().outputs * &wy).sum();
        let rec = layer.forward(x.view()).unwrap();
        let (_, grads) = layer.backward_with(&rec, wy.view(), false).unwrap();
        let h = 1e-6;
        for (gi, g) in grads.groups.iter().enumerate() {
            for (i, a) in g.iter().enumerate() {
                let mut up = layer.clone();
                up.param_groups_mut()[gi][i] += h;
                let mut dn = layer.clone();
                dn.param_groups_mut()[gi][i] -= h;
                let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
                assert!((a - fd).abs() < 1e-7);
            }
        }
    }
}
