//! Autoencoder recommenders: the KAN variant and the parameter-matched MLP
//! control.
//!
//! Both variants map a user's binary interaction vector to a latent code and
//! back to one score per item, and expose the same operations, so training and
//! evaluation code never branches on the kind.

use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::activation::{sigmoid, softplus, BaseActivation};
use crate::error::{KanError, Result};
use crate::kan_layer::{layer_entropy, layer_l1, regularizer_gradient, KanLayer, LayerActivationRecord};
use crate::mlp::{DenseActivation, DenseLayer, DenseRecord};
use crate::params::{LayerGrads, Parameters};
use crate::rng;
use crate::spline::SplineGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Kan,
    Mlp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Kan => "kan",
            Self::Mlp => "mlp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kan" => Ok(Self::Kan),
            "mlp" => Ok(Self::Mlp),
            other => Err(KanError::InvalidConfig(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Reconstruction loss. Both are summed over items and averaged over users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    /// Per-item binary cross-entropy on logits.
    Bce,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Bce => "bce",
        })
    }
}

impl FromStr for LossKind {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Self::Mse),
            "bce" | "ce" => Ok(Self::Bce),
            other => Err(KanError::InvalidConfig(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub item_count: usize,
    pub latent_dim: usize,
    /// Layers per side; the encoder and decoder are symmetric.
    pub layers: usize,
    pub grid_count: usize,
    pub spline_order: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub activation: BaseActivation,
    pub loss: LossKind,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Kan,
            item_count: 1,
            latent_dim: 512,
            layers: 1,
            grid_count: 2,
            spline_order: 3,
            grid_min: -1.0,
            grid_max: 1.0,
            activation: BaseActivation::Silu,
            loss: LossKind::Mse,
            lambda: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(KanError::InvalidConfig(msg));
        if self.item_count == 0 {
            return bad("item count must be >= 1".into());
        }
        if self.latent_dim == 0 {
            return bad("latent dim must be >= 1".into());
        }
        if self.layers == 0 {
            return bad("layer count must be >= 1".into());
        }
        if self.grid_count == 0 || self.spline_order == 0 {
            return bad("grid count and spline order must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a non-negative finite number, got {}", self.lambda));
        }
        if !(self.grid_min < self.grid_max) {
            return bad(format!("grid range [{}, {}] is empty", self.grid_min, self.grid_max));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<SplineGrid> {
        SplineGrid::new(self.grid_min, self.grid_max, self.grid_count, self.spline_order)
    }

    /// Encoder widths `|I| -> .. -> h`, linearly interpolated and rounded.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let (i, h, l) = (self.item_count as f64, self.latent_dim as f64, self.layers);
        (0..=l)
            .map(|s| {
                if s == 0 {
                    self.item_count
                } else if s == l {
                    self.latent_dim
                } else {
                    (i + (h - i) * s as f64 / l as f64).round().max(1.0) as usize
                }
            })
            .collect()
    }

    /// Parameters in the KAN variant: `G + k + 1` per edge.
    pub fn kan_param_count(&self) -> usize {
        let per_edge = self.grid_count + self.spline_order + 1;
        2 * self.encoder_widths().windows(2).map(|w| w[0] * w[1]).sum::<usize>() * per_edge
    }

    /// MLP encoder widths whose parameter count is closest to the KAN variant.
    ///
    /// Every hidden width (latent included) is the KAN width times one common
    /// factor, found by bisection.
    pub fn mlp_encoder_widths(&self) -> Vec<usize> {
        let base = self.encoder_widths();
        let target = self.kan_param_count() as f64;
        let widths_for = |f: f64| -> Vec<usize> {
            base.iter()
                .enumerate()
                .map(|(s, w)| if s == 0 { *w } else { ((*w as f64) * f).round().max(1.0) as usize })
                .collect()
        };
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while (mlp_param_count(&widths_for(hi)) as f64) < target {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if (mlp_param_count(&widths_for(mid)) as f64) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let a = widths_for(lo);
        let b = widths_for(hi);
        let da = (mlp_param_count(&a) as f64 - target).abs();
        let db = (mlp_param_count(&b) as f64 - target).abs();
        if da < db {
            a
        } else {
            b
        }
    }
}

/// Parameter count of a symmetric MLP autoencoder with the given encoder widths.
pub fn mlp_param_count(encoder_widths: &[usize]) -> usize {
    encoder_widths.windows(2).map(|w| 2 * w[0] * w[1] + w[0] + w[1]).sum()
}

fn mirrored(encoder: &[usize]) -> Vec<usize> {
    encoder.iter().rev().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Kan(KanLayer),
    Dense(DenseLayer),
}

impl Layer {
    pub fn n_in(&self) -> usize {
        match self {
            Self::Kan(l) => l.n_in(),
            Self::Dense(l) => l.n_in(),
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Self::Kan(l) => l.n_out(),
            Self::Dense(l) => l.n_out(),
        }
    }

    pub fn as_kan(&self) -> Option<&KanLayer> {
        match self {
            Self::Kan(l) => Some(l),
            Self::Dense(_) => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Self::Kan(l) => l.is_finite(),
            Self::Dense(l) => l.is_finite(),
        }
    }

    /// The parameter behind edge `(q, p)` that delta tracking follows: the
    /// first spline coefficient for KAN, the weight for dense layers.
    pub fn tracked_param_index(&self, q: usize, p: usize) -> (usize, usize) {
        match self {
            Self::Kan(l) => (1, (q * l.n_in() + p) * l.grid().basis_count()),
            Self::Dense(l) => (0, q * l.n_in() + p),
        }
    }
}

impl Parameters for Layer {
    fn param_groups(&self) -> Vec<&[f64]> {
        match self {
            Self::Kan(l) => l.param_groups(),
            Self::Dense(l) => l.param_groups(),
        }
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Self::Kan(l) => l.param_groups_mut(),
            Self::Dense(l) => l.param_groups_mut(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum LayerRecord {
    Kan(LayerActivationRecord),
    Dense(DenseRecord),
}

impl LayerRecord {
    pub fn outputs(&self) -> &Array2<f64> {
        match self {
            Self::Kan(r) => &r.outputs,
            Self::Dense(r) => &r.outputs,
        }
    }

    pub fn edge_outputs_l1(&self) -> Option<&Array2<f64>> {
        match self {
            Self::Kan(r) => r.edge_outputs_l1.as_ref(),
            Self::Dense(_) => None,
        }
    }
}

/// Scores plus the per-layer records backpropagation needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub scores: Array2<f64>,
    pub records: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub reg: f64,
}

/// Gradients for every layer, in model order.
pub type ModelGrads = Vec<LayerGrads>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfModel {
    config: ModelConfig,
    layers: Vec<Layer>,
    encoder_len: usize,
}

impl CfModel {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = rng::stream(config.seed, rng::STREAM_INIT);
        let layers: Vec<Layer> = match config.kind {
            ModelKind::Kan => {
                let grid = config.grid()?;
                let enc = config.encoder_widths();
                let all: Vec<usize> = enc.iter().chain(mirrored(&enc).iter().skip(1)).copied().collect();
                all.windows(2)
                    .map(|w| KanLayer::init_he(w[0], w[1], grid.clone(), config.activation, &mut init).map(Layer::Kan))
                    .collect::<Result<_>>()?
            }
            ModelKind::Mlp => {
                let enc = config.mlp_encoder_widths();
                let kan = config.kan_param_count() as f64;
                let mlp = mlp_param_count(&enc) as f64;
                if (mlp - kan).abs() / kan > 0.05 {
                    warn!("MLP parameter count {mlp} is more than 5% away from the KAN count {kan}");
                }
                let all: Vec<usize> = enc.iter().chain(mirrored(&enc).iter().skip(1)).copied().collect();
                let n = all.len() - 1;
                all.windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        let act = if i + 1 == n { DenseActivation::Identity } else { DenseActivation::Tanh };
                        DenseLayer::init_he(w[0], w[1], act, &mut init).map(Layer::Dense)
                    })
                    .collect::<Result<_>>()?
            }
        };
        let encoder_len = config.layers;
        Ok(Self { config, layers, encoder_len })
    }

    /// Reassembles a model from stored layers, validating their shapes.
    pub fn from_parts(config: ModelConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        if layers.len() != 2 * config.layers {
            return Err(KanError::InvalidConfig(format!(
                "expected {} layers, got {}",
                2 * config.layers,
                layers.len()
            )));
        }
        for w in layers.windows(2) {
            if w[0].n_out() != w[1].n_in() {
                return Err(KanError::InvalidConfig("layer widths do not chain".into()));
            }
        }
        let kinds_ok = layers.iter().all(|l| matches!((config.kind, l), (ModelKind::Kan, Layer::Kan(_)) | (ModelKind::Mlp, Layer::Dense(_))));
        if !kinds_ok || layers[0].n_in() != config.item_count || layers[layers.len() - 1].n_out() != config.item_count {
            return Err(KanError::InvalidConfig("layers do not match the model config".into()));
        }
        let encoder_len = config.layers;
        Ok(Self { config, layers, encoder_len })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn item_count(&self) -> usize {
        self.config.item_count
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.config.lambda = lambda;
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn encoder(&self) -> &[Layer] {
        &self.layers[..self.encoder_len]
    }

    pub fn decoder(&self) -> &[Layer] {
        &self.layers[self.encoder_len..]
    }

    /// Width of the latent code.
    pub fn latent_width(&self) -> usize {
        self.layers[self.encoder_len - 1].n_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    /// Whether the training objective needs the per-edge magnitudes.
    fn needs_edge_stats(&self) -> bool {
        self.config.kind == ModelKind::Kan && self.config.lambda > 0.0
    }

    fn check_input(&self, users: ArrayView2<'_, f64>) -> Result<()> {
        if users.ncols() != self.config.item_count {
            return Err(KanError::ShapeMismatch {
                expected: format!("batch x {}", self.config.item_count),
                got: format!("{} x {}", users.nrows(), users.ncols()),
            });
        }
        Ok(())
    }

    /// Scores for a batch of user vectors, with records for backpropagation.
    /// KAN records always carry edge magnitudes.
    pub fn predict(&self, users: ArrayView2<'_, f64>) -> Result<ForwardPass> {
        self.forward(users, self.config.kind == ModelKind::Kan)
    }

    /// Forward pass; `edge_stats` requests KAN edge magnitudes.
    pub fn forward(&self, users: ArrayView2<'_, f64>, edge_stats: bool) -> Result<ForwardPass> {
        self.check_input(users)?;
        let mut records = Vec::with_capacity(self.layers.len());
        let mut current = users.to_owned();
        for layer in &self.layers {
            let record = match layer {
                Layer::Kan(l) => LayerRecord::Kan(l.forward_with(current.view(), edge_stats)?),
                Layer::Dense(l) => LayerRecord::Dense(l.forward(current.view())?),
            };
            current = record.outputs().clone();
            records.push(record);
        }
        Ok(ForwardPass { scores: current, records })
    }

    /// Scores only, without keeping records.
    pub fn scores(&self, users: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(users)?;
        let mut current = users.to_owned();
        for layer in &self.layers {
            current = match layer {
                Layer::Kan(l) => l.predict(current.view())?,
                Layer::Dense(l) => l.forward(current.view())?.outputs,
            };
        }
        Ok(current)
    }

    /// Reconstruction term alone.
    pub fn reconstruction_loss(&self, users: ArrayView2<'_, f64>, scores: ArrayView2<'_, f64>) -> f64 {
        let batch = users.nrows().max(1) as f64;
        let sum: f64 = match self.config.loss {
            LossKind::Mse => users.iter().zip(scores.iter()).map(|(u, s)| (s - u) * (s - u)).sum(),
            LossKind::Bce => users.iter().zip(scores.iter()).map(|(u, s)| softplus(*s) - u * s).sum(),
        };
        sum / batch
    }

    /// Sum over KAN layers of `|Phi|_1 + S(Phi)`; zero for MLP models or when
    /// the records carry no edge magnitudes.
    pub fn regularization(&self, records: &[LayerRecord]) -> f64 {
        if self.config.kind != ModelKind::Kan {
            return 0.0;
        }
        records
            .iter()
            .filter_map(LayerRecord::edge_outputs_l1)
            .map(|m| layer_l1(m.view()) + layer_entropy(m.view()))
            .sum()
    }

    /// `total = recon + lambda * reg`.
    pub fn loss(&self, users: ArrayView2<'_, f64>, pass: &ForwardPass) -> LossBreakdown {
        let recon = self.reconstruction_loss(users, pass.scores.view());
        let reg = self.regularization(&pass.records);
        LossBreakdown { total: recon + self.config.lambda * reg, recon, reg }
    }

    fn score_gradient(&self, users: ArrayView2<'_, f64>, scores: ArrayView2<'_, f64>) -> Array2<f64> {
        let batch = users.nrows().max(1) as f64;
        let mut d = scores.to_owned();
        for (g, u) in d.iter_mut().zip(users.iter()) {
            *g = match self.config.loss {
                LossKind::Mse => 2.0 * (*g - u) / batch,
                LossKind::Bce => (sigmoid(*g) - u) / batch,
            };
        }
        d
    }

    /// Loss and exact gradients of the total objective with respect to every
    /// parameter, including the regularizer path through the edge magnitudes.
    pub fn gradients(&self, users: ArrayView2<'_, f64>) -> Result<(LossBreakdown, ModelGrads)> {
        let pass = self.forward(users, self.needs_edge_stats())?;
        let loss = self.loss(users, &pass);
        let lambda = self.config.lambda;
        let mut upstream = self.score_gradient(users, pass.scores.view());
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        for (idx, (layer, record)) in self.layers.iter().zip(&pass.records).enumerate().rev() {
            let need_dx = idx > 0;
            let (dx, g) = match (layer, record) {
                (Layer::Kan(l), LayerRecord::Kan(r)) => {
                    let (mut dx, mut g) = l.backward_with(r, upstream.view(), need_dx)?;
                    if lambda > 0.0 {
                        if let Some(m) = r.edge_outputs_l1.as_ref() {
                            let d_edge = regularizer_gradient(m.view()) * lambda;
                            l.backward_edge_magnitudes(r, d_edge.view(), &mut g, dx.as_mut())?;
                        }
                    }
                    (dx, g)
                }
                (Layer::Dense(l), LayerRecord::Dense(r)) => l.backward_with(r, upstream.view(), need_dx)?,
                _ => unreachable!("records are produced by the same layers"),
            };
            grads.push(g);
            if let Some(dx) = dx {
                upstream = dx;
            }
        }
        grads.reverse();
        Ok((loss, grads))
    }
}
