//! Parameter and gradient plumbing shared by every layer kind.

use serde::{Deserialize, Serialize};

/// Flat parameter groups of one layer, in a fixed order.
pub trait Parameters {
    fn param_groups(&self) -> Vec<&[f64]>;
    fn param_groups_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_groups().iter().map(|g| g.len()).sum()
    }
}

/// Gradients of one layer, laid out like its [`Parameters::param_groups`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrads {
    pub groups: Vec<Vec<f64>>,
}

impl LayerGrads {
    pub fn zeros_like<P: Parameters + ?Sized>(layer: &P) -> Self {
        Self { groups: layer.param_groups().iter().map(|g| vec![0.0; g.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.groups.iter_mut().flatten().for_each(|x| *x *= factor);
    }

    pub fn squared_norm(&self) -> f64 {
        self.groups.iter().flatten().map(|x| x * x).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.groups.iter().flatten().all(|x| *x == 0.0)
    }
}
