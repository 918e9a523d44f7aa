//! A single KAN layer: a matrix of learnable edge activations.
//!
//! Edge `(q, p)` maps input `p` to a contribution to output `q`:
//!
//! ```text
//! phi_qp(x) = w_qp * (sigma(x) + sum_i c_qpi * B_i(clamp(x)))
//! ```
//!
//! The forward pass is computed as one dense product. Every input `x_bp` is
//! expanded into a feature block `[sigma(x), B_0(x), .., B_{G+k-1}(x)]`, and
//! every edge into the matching block of effective weights
//! `[w, w*c_0, .., w*c_{G+k-1}]`; the layer output is the product of the two
//! matrices. Gradients with respect to `w` and `c` are recovered from the
//! gradient of the effective weights by the chain rule.
//!
//! The per-edge magnitudes `|phi_qp|_1` (batch mean of `|phi_qp(x_bp)|`) feed
//! the sparsity regularizer and the importance scores used for pruning. They
//! cannot be factored into a matrix product, so they are only computed on
//! request. Inputs that repeat within a column (binary interaction vectors
//! have just two distinct values) are evaluated once and weighted by their
//! multiplicity.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::BaseActivation;
use crate::error::{KanError, Result};
use crate::params::{LayerGrads, Parameters};
use crate::spline::{SplineGrid, MAX_ORDER};

/// Output rows handled per parallel task when accumulating edge statistics.
const ROW_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    n_in: usize,
    n_out: usize,
    grid: SplineGrid,
    activation: BaseActivation,
    /// `w_qp`, row-major `(n_out, n_in)`.
    scales: Vec<f64>,
    /// `c_qpi`, row-major `(n_out, n_in, G + k)`.
    coeffs: Vec<f64>,
}

/// Distinct values of each input column within a batch, with everything the
/// edge-magnitude pass needs precomputed.
#[derive(Debug, Clone)]
struct ColumnGroups {
    /// Offsets into the per-unique arrays; column `p` owns `start[p]..start[p+1]`.
    start: Vec<usize>,
    count: Vec<f64>,
    sigma: Vec<f64>,
    dsigma: Vec<f64>,
    first_basis: Vec<usize>,
    /// `k + 1` local basis values per unique value.
    values: Vec<f64>,
    /// `k + 1` local basis derivatives per unique value, zero where clamped.
    derivs: Vec<f64>,
    /// `(batch, n_in)`: unique index for each sample's input.
    sample_unique: Vec<usize>,
}

/// What [`KanLayer::forward`] keeps for the backward pass and the regularizer.
#[derive(Debug, Clone)]
pub struct LayerActivationRecord {
    pub inputs: Array2<f64>,
    pub outputs: Array2<f64>,
    /// Batch-mean `|phi_qp|`, shaped `(n_out, n_in)`. `None` when the forward
    /// pass was run without edge statistics.
    pub edge_outputs_l1: Option<Array2<f64>>,
    features: Array2<f64>,
    groups: Option<ColumnGroups>,
}

impl LayerActivationRecord {
    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }
}

/// `|Phi|_1`: sum of the per-edge magnitudes.
pub fn layer_l1(edge_l1: ArrayView2<'_, f64>) -> f64 {
    edge_l1.sum()
}

/// Entropy of the normalized edge magnitudes, with `0 log 0 = 0` and zero
/// entropy for an all-zero layer.
pub fn layer_entropy(edge_l1: ArrayView2<'_, f64>) -> f64 {
    let total = edge_l1.sum();
    if total <= 0.0 {
        return 0.0;
    }
    -edge_l1
        .iter()
        .filter(|m| **m > 0.0)
        .map(|m| {
            let s = m / total;
            s * s.ln()
        })
        .sum::<f64>()
}

/// Gradient of `layer_l1 + layer_entropy` with respect to each edge magnitude.
///
/// With `s_e = m_e / M`, `dS/dm_e = -(ln s_e + S) / M`. Edges with zero mass
/// get the L1 term only.
pub fn regularizer_gradient(edge_l1: ArrayView2<'_, f64>) -> Array2<f64> {
    let total = edge_l1.sum();
    let entropy = layer_entropy(edge_l1);
    edge_l1.mapv(|m| {
        if total > 0.0 && m > 0.0 {
            1.0 - ((m / total).ln() + entropy) / total
        } else {
            1.0
        }
    })
}

impl KanLayer {
    /// He-initialized layer: scales ~ N(0, 2/n_in), coefficients with the
    /// same deviation further divided by `sqrt(G + k)`.
    pub fn init_he<R: Rng + ?Sized>(
        n_in: usize,
        n_out: usize,
        grid: SplineGrid,
        activation: BaseActivation,
        rng: &mut R,
    ) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(KanError::InvalidArgument(format!("layer dims must be >= 1, got {n_in}x{n_out}")));
        }
        let nb = grid.basis_count();
        let std = (2.0 / n_in as f64).sqrt();
        let scale_dist = Normal::new(0.0, std).expect("positive std");
        let coeff_dist = Normal::new(0.0, std / (nb as f64).sqrt()).expect("positive std");
        let scales = (0..n_out * n_in).map(|_| scale_dist.sample(rng)).collect();
        let coeffs = (0..n_out * n_in * nb).map(|_| coeff_dist.sample(rng)).collect();
        Ok(Self { n_in, n_out, grid, activation, scales, coeffs })
    }

    /// Builds a layer from explicit parameters.
    pub fn from_parts(
        n_in: usize,
        n_out: usize,
        grid: SplineGrid,
        activation: BaseActivation,
        scales: Vec<f64>,
        coeffs: Vec<f64>,
    ) -> Result<Self> {
        let nb = grid.basis_count();
        if scales.len() != n_out * n_in {
            return Err(KanError::LengthMismatch { expected: n_out * n_in, got: scales.len() });
        }
        if coeffs.len() != n_out * n_in * nb {
            return Err(KanError::LengthMismatch { expected: n_out * n_in * nb, got: coeffs.len() });
        }
        Ok(Self { n_in, n_out, grid, activation, scales, coeffs })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn activation(&self) -> BaseActivation {
        self.activation
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn scales_mut(&mut self) -> &mut [f64] {
        &mut self.scales
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn scale(&self, q: usize, p: usize) -> f64 {
        self.scales[q * self.n_in + p]
    }

    /// Coefficients of edge `(q, p)`.
    pub fn edge_coeffs(&self, q: usize, p: usize) -> &[f64] {
        let nb = self.grid.basis_count();
        let start = (q * self.n_in + p) * nb;
        &self.coeffs[start..start + nb]
    }

    /// Evaluates a single edge activation.
    pub fn edge_value(&self, q: usize, p: usize, x: f64) -> Result<f64> {
        let spline = self.grid.eval(self.edge_coeffs(q, p), x)?;
        Ok(self.scale(q, p) * (self.activation.apply(x) + spline))
    }

    pub fn is_finite(&self) -> bool {
        self.scales.iter().chain(&self.coeffs).all(|v| v.is_finite())
    }

    fn block(&self) -> usize {
        self.grid.basis_count() + 1
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.n_in {
            return Err(KanError::ShapeMismatch {
                expected: format!("batch x {}", self.n_in),
                got: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        Ok(())
    }

    /// Effective weights `[w, w*c_0, ..]`, shaped `(n_out, n_in * (G+k+1))`.
    fn effective_weights(&self) -> Array2<f64> {
        let nb = self.grid.basis_count();
        let block = nb + 1;
        let mut v = Array2::<f64>::zeros((self.n_out, self.n_in * block));
        v.as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(self.n_in * block)
            .enumerate()
            .for_each(|(q, row)| {
                for p in 0..self.n_in {
                    let e = q * self.n_in + p;
                    let w = self.scales[e];
                    let dst = &mut row[p * block..(p + 1) * block];
                    dst[0] = w;
                    for (d, c) in dst[1..].iter_mut().zip(&self.coeffs[e * nb..(e + 1) * nb]) {
                        *d = w * c;
                    }
                }
            });
        v
    }

    fn features(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let k = self.grid.order();
        let block = self.block();
        let width = self.n_in * block;
        let mut f = Array2::<f64>::zeros((x.nrows(), width));
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        f.as_slice_mut().expect("standard layout").par_chunks_mut(width).enumerate().for_each(|(b, row)| {
            let mut local = [0.0; MAX_ORDER + 1];
            for p in 0..self.n_in {
                let raw = xs[b * self.n_in + p];
                let xc = self.grid.clamp(raw);
                let span = self.grid.span(xc);
                self.grid.local_values(xc, span, &mut local);
                let dst = &mut row[p * block..(p + 1) * block];
                dst[0] = self.activation.apply(raw);
                let first = 1 + span - k;
                dst[first..=first + k].copy_from_slice(&local[..=k]);
            }
        });
        f
    }

    fn column_groups(&self, x: ArrayView2<'_, f64>) -> ColumnGroups {
        let k = self.grid.order();
        let batch = x.nrows();
        let mut g = ColumnGroups {
            start: Vec::with_capacity(self.n_in + 1),
            count: Vec::new(),
            sigma: Vec::new(),
            dsigma: Vec::new(),
            first_basis: Vec::new(),
            values: Vec::new(),
            derivs: Vec::new(),
            sample_unique: vec![0; batch * self.n_in],
        };
        let mut order: Vec<usize> = (0..batch).collect();
        let mut local = [0.0; MAX_ORDER + 1];
        for p in 0..self.n_in {
            g.start.push(g.count.len());
            let col = x.column(p);
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            let mut prev: Option<f64> = None;
            for &b in &order {
                let v = col[b];
                if prev.is_none_or(|pv| pv.to_bits() != v.to_bits()) {
                    let xc = self.grid.clamp(v);
                    let span = self.grid.span(xc);
                    g.count.push(0.0);
                    g.sigma.push(self.activation.apply(v));
                    g.dsigma.push(self.activation.derivative(v));
                    g.first_basis.push(span - k);
                    self.grid.local_values(xc, span, &mut local);
                    g.values.extend_from_slice(&local[..=k]);
                    if self.grid.is_clamped(v) {
                        g.derivs.extend(std::iter::repeat_n(0.0, k + 1));
                    } else {
                        self.grid.local_derivatives(xc, span, &mut local);
                        g.derivs.extend_from_slice(&local[..=k]);
                    }
                    prev = Some(v);
                }
                let u = g.count.len() - 1;
                g.count[u] += 1.0;
                g.sample_unique[b * self.n_in + p] = u;
            }
        }
        g.start.push(g.count.len());
        g
    }

    /// Batch-mean `|phi_qp|` for every edge.
    fn edge_magnitudes(&self, groups: &ColumnGroups, batch: usize) -> Array2<f64> {
        let k = self.grid.order();
        let nb = self.grid.basis_count();
        let inv_batch = 1.0 / batch as f64;
        let mut m = Array2::<f64>::zeros((self.n_out, self.n_in));
        m.as_slice_mut().expect("standard layout").par_chunks_mut(self.n_in).enumerate().for_each(|(q, row)| {
            for (p, slot) in row.iter_mut().enumerate() {
                let e = q * self.n_in + p;
                let w = self.scales[e];
                let c = &self.coeffs[e * nb..(e + 1) * nb];
                let mut acc = 0.0;
                for u in groups.start[p]..groups.start[p + 1] {
                    let first = groups.first_basis[u];
                    let vals = &groups.values[u * (k + 1)..(u + 1) * (k + 1)];
                    let spline: f64 = vals.iter().zip(&c[first..=first + k]).map(|(b, ci)| b * ci).sum();
                    acc += groups.count[u] * (w * (groups.sigma[u] + spline)).abs();
                }
                *slot = acc * inv_batch;
            }
        });
        m
    }

    /// Forward pass with edge statistics, as needed by the regularizer and
    /// importance scoring.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, LayerActivationRecord)> {
        let record = self.forward_with(x, true)?;
        Ok((record.outputs.clone(), record))
    }

    /// Forward pass; `edge_stats` controls whether `edge_outputs_l1` is filled.
    pub fn forward_with(&self, x: ArrayView2<'_, f64>, edge_stats: bool) -> Result<LayerActivationRecord> {
        self.check_input(x)?;
        let features = self.features(x);
        let outputs = features.dot(&self.effective_weights().t());
        let (edge_outputs_l1, groups) = if edge_stats && x.nrows() > 0 {
            let groups = self.column_groups(x);
            (Some(self.edge_magnitudes(&groups, x.nrows())), Some(groups))
        } else {
            (None, None)
        };
        Ok(LayerActivationRecord { inputs: x.to_owned(), outputs, edge_outputs_l1, features, groups })
    }

    /// Outputs only.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.features(x).dot(&self.effective_weights().t()))
    }

    /// Backward pass through the layer outputs.
    pub fn backward(
        &self,
        record: &LayerActivationRecord,
        d_out: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, LayerGrads)> {
        let (dx, grads) = self.backward_with(record, d_out, true)?;
        Ok((dx.expect("requested"), grads))
    }

    /// Backward pass; the input gradient is skipped when `need_input_grad` is
    /// false (first layer of a network).
    pub fn backward_with(
        &self,
        record: &LayerActivationRecord,
        d_out: ArrayView2<'_, f64>,
        need_input_grad: bool,
    ) -> Result<(Option<Array2<f64>>, LayerGrads)> {
        let batch = record.batch_size();
        if d_out.dim() != (batch, self.n_out) || record.inputs.ncols() != self.n_in {
            return Err(KanError::ShapeMismatch {
                expected: format!("{batch} x {}", self.n_out),
                got: format!("{} x {}", d_out.nrows(), d_out.ncols()),
            });
        }
        let nb = self.grid.basis_count();
        let block = nb + 1;
        let dv = d_out.t().dot(&record.features);
        let dv = dv.as_slice().expect("standard layout");

        let mut d_scales = vec![0.0; self.n_out * self.n_in];
        let mut d_coeffs = vec![0.0; self.n_out * self.n_in * nb];
        d_scales
            .par_chunks_mut(self.n_in)
            .zip(d_coeffs.par_chunks_mut(self.n_in * nb))
            .enumerate()
            .for_each(|(q, (ds, dc))| {
                for p in 0..self.n_in {
                    let e = q * self.n_in + p;
                    let w = self.scales[e];
                    let src = &dv[(q * self.n_in + p) * block..(q * self.n_in + p + 1) * block];
                    let c = &self.coeffs[e * nb..(e + 1) * nb];
                    let mut acc = src[0];
                    for i in 0..nb {
                        acc += src[1 + i] * c[i];
                        dc[p * nb + i] = src[1 + i] * w;
                    }
                    ds[p] = acc;
                }
            });

        let dx = need_input_grad.then(|| {
            let df = d_out.dot(&self.effective_weights());
            self.input_grad_from_features(record.inputs.view(), &df)
        });
        Ok((dx, LayerGrads { groups: vec![d_scales, d_coeffs] }))
    }

    fn input_grad_from_features(&self, x: ArrayView2<'_, f64>, df: &Array2<f64>) -> Array2<f64> {
        let k = self.grid.order();
        let block = self.block();
        let width = self.n_in * block;
        let df = df.as_slice().expect("standard layout");
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut dx = Array2::<f64>::zeros((x.nrows(), self.n_in));
        dx.as_slice_mut().expect("standard layout").par_chunks_mut(self.n_in).enumerate().for_each(|(b, row)| {
            let mut local = [0.0; MAX_ORDER + 1];
            let dfr = &df[b * width..(b + 1) * width];
            for (p, slot) in row.iter_mut().enumerate() {
                let raw = xs[b * self.n_in + p];
                let src = &dfr[p * block..(p + 1) * block];
                let mut acc = src[0] * self.activation.derivative(raw);
                if !self.grid.is_clamped(raw) {
                    let span = self.grid.span(raw);
                    self.grid.local_derivatives(raw, span, &mut local);
                    let first = 1 + span - k;
                    acc += src[first..=first + k].iter().zip(&local[..=k]).map(|(a, b)| a * b).sum::<f64>();
                }
                *slot = acc;
            }
        });
        dx
    }

    /// Accumulates the gradient of a loss term that depends on the edge
    /// magnitudes. `d_edge` is the loss gradient with respect to each
    /// `|phi_qp|_1`, shaped `(n_out, n_in)`. Parameter gradients are added to
    /// `grads`; when `dx` is given the input gradient is added to it.
    pub fn backward_edge_magnitudes(
        &self,
        record: &LayerActivationRecord,
        d_edge: ArrayView2<'_, f64>,
        grads: &mut LayerGrads,
        dx: Option<&mut Array2<f64>>,
    ) -> Result<()> {
        let groups = record.groups.as_ref().ok_or_else(|| {
            KanError::InvalidArgument("forward pass was run without edge statistics".into())
        })?;
        if d_edge.dim() != (self.n_out, self.n_in) {
            return Err(KanError::ShapeMismatch {
                expected: format!("{} x {}", self.n_out, self.n_in),
                got: format!("{} x {}", d_edge.nrows(), d_edge.ncols()),
            });
        }
        let k = self.grid.order();
        let nb = self.grid.basis_count();
        let inv_batch = 1.0 / record.batch_size() as f64;
        let n_unique = groups.count.len();
        let need_dx = dx.is_some();
        let d_edge = d_edge.as_standard_layout();
        let d_edge = d_edge.as_slice().expect("standard layout");

        let (ds_all, dc_all) = grads.groups.split_at_mut(1);
        // Each chunk of output rows owns its parameter gradients and returns a
        // partial input gradient per unique input value; partials are summed in
        // chunk order so the result does not depend on the thread count.
        let partials: Vec<Vec<f64>> = ds_all[0]
            .par_chunks_mut(self.n_in * ROW_CHUNK)
            .zip(dc_all[0].par_chunks_mut(self.n_in * nb * ROW_CHUNK))
            .enumerate()
            .map(|(chunk, (ds, dc))| {
                let mut du = if need_dx { vec![0.0; n_unique] } else { Vec::new() };
                let rows = ds.len() / self.n_in;
                for r in 0..rows {
                    let q = chunk * ROW_CHUNK + r;
                    for p in 0..self.n_in {
                        let e = q * self.n_in + p;
                        let g = d_edge[e] * inv_batch;
                        if g == 0.0 {
                            continue;
                        }
                        let w = self.scales[e];
                        let c = &self.coeffs[e * nb..(e + 1) * nb];
                        let dce = &mut dc[(r * self.n_in + p) * nb..(r * self.n_in + p + 1) * nb];
                        let mut dw = 0.0;
                        for u in groups.start[p]..groups.start[p + 1] {
                            let first = groups.first_basis[u];
                            let vals = &groups.values[u * (k + 1)..(u + 1) * (k + 1)];
                            let inner =
                                groups.sigma[u] + vals.iter().zip(&c[first..=first + k]).map(|(b, ci)| b * ci).sum::<f64>();
                            let phi = w * inner;
                            let sign = if phi > 0.0 {
                                1.0
                            } else if phi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            if sign == 0.0 {
                                continue;
                            }
                            let t = g * sign * groups.count[u];
                            dw += t * inner;
                            for (slot, b) in dce[first..=first + k].iter_mut().zip(vals) {
                                *slot += t * w * b;
                            }
                            if need_dx {
                                let ders = &groups.derivs[u * (k + 1)..(u + 1) * (k + 1)];
                                let dspline: f64 = ders.iter().zip(&c[first..=first + k]).map(|(d, ci)| d * ci).sum();
                                du[u] += g * sign * w * (groups.dsigma[u] + dspline);
                            }
                        }
                        ds[r * self.n_in + p] += dw;
                    }
                }
                du
            })
            .collect();

        if let Some(dx) = dx {
            let mut du = vec![0.0; n_unique];
            for part in &partials {
                for (a, b) in du.iter_mut().zip(part) {
                    *a += b;
                }
            }
            let batch = record.batch_size();
            for b in 0..batch {
                for p in 0..self.n_in {
                    dx[[b, p]] += du[groups.sample_unique[b * self.n_in + p]];
                }
            }
        }
        Ok(())
    }

    /// Row-wise forward on a single sample, used by importance tracing.
    pub fn forward_sample(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| KanError::InvalidArgument(e.to_string()))?;
        Ok(self.predict(view)?.index_axis(Axis(0), 0).to_vec())
    }
}

impl Parameters for KanLayer {
    fn param_groups(&self) -> Vec<&[f64]> {
        vec![&self.scales, &self.coeffs]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.scales, &mut self.coeffs]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array2;
    use rand::Rng;

    fn grid() -> SplineGrid {
        SplineGrid::new(-1.0, 1.0, 2, 3).unwrap()
    }

    fn random_layer(n_in: usize, n_out: usize, seed: u64) -> KanLayer {
        let mut r = rng::stream(seed, rng::STREAM_INIT);
        KanLayer::init_he(n_in, n_out, grid(), BaseActivation::Silu, &mut r).unwrap()
    }

    fn random_input(batch: usize, n_in: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "input");
        Array2::from_shape_fn((batch, n_in), |_| r.random_range(-0.95..0.95))
    }

    /// Scalar loop over edges, straight from the edge definition.
    fn scalar_forward(layer: &KanLayer, x: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn((x.nrows(), layer.n_out()), |(b, q)| {
            (0..layer.n_in()).map(|p| layer.edge_value(q, p, x[[b, p]]).unwrap()).sum()
        })
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = random_layer(3, 4, 11);
        let b = random_layer(3, 4, 11);
        assert_eq!(a, b);
        assert_eq!(a.coeffs().len(), 4 * 3 * 5);
        assert_eq!(a.scales().len(), 12);
    }

    #[test]
    fn he_scale_statistics() {
        let layer = random_layer(1024, 16, 3);
        let n = layer.scales().len() as f64;
        let mean = layer.scales().iter().sum::<f64>() / n;
        let var = layer.scales().iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let target = (2.0f64 / 1024.0).sqrt();
        assert!((var.sqrt() - target).abs() / target < 0.1);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let layer = random_layer(5, 3, 1);
        let x = random_input(4, 5, 2);
        let (y, rec) = layer.forward(x.view()).unwrap();
        let oracle = scalar_forward(&layer, &x);
        for (a, b) in y.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let m = rec.edge_outputs_l1.unwrap();
        for q in 0..3 {
            for p in 0..5 {
                let direct: f64 =
                    (0..4).map(|b| layer.edge_value(q, p, x[[b, p]]).unwrap().abs()).sum::<f64>() / 4.0;
                assert!((m[[q, p]] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_scales_give_zero_output_and_zero_mass() {
        let mut layer = random_layer(4, 2, 5);
        layer.scales_mut().fill(0.0);
        let x = random_input(3, 4, 6);
        let (y, rec) = layer.forward(x.view()).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let m = rec.edge_outputs_l1.unwrap();
        assert_eq!(layer_l1(m.view()), 0.0);
        assert_eq!(layer_entropy(m.view()), 0.0);
    }

    #[test]
    fn relu_identity_with_zero_spline() {
        let mut layer = KanLayer::init_he(3, 2, grid(), BaseActivation::Relu, &mut rng::stream(0, "t")).unwrap();
        layer.coeffs_mut().fill(0.0);
        layer.scales_mut().fill(1.0);
        let x = Array2::from_shape_vec((2, 3), vec![0.0, 0.5, 1.0, 2.0, 0.25, 3.0]).unwrap();
        let y = layer.predict(x.view()).unwrap();
        for b in 0..2 {
            let s: f64 = x.row(b).sum();
            assert!((y[[b, 0]] - s).abs() < 1e-12 && (y[[b, 1]] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let layer = random_layer(3, 2, 0);
        let x = Array2::<f64>::zeros((2, 4));
        assert!(matches!(layer.forward(x.view()), Err(KanError::ShapeMismatch { .. })));
    }

    #[test]
    fn uniform_edges_have_log_n_entropy() {
        let m = Array2::from_elem((2, 2), 0.7);
        assert!((layer_entropy(m.view()) - 4f64.ln()).abs() < 1e-12);
        assert!((layer_l1(m.view()) - 2.8).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_double_loop() {
        let mut r = rng::stream(4, "m");
        let m = Array2::from_shape_fn((3, 5), |_| r.random_range(0.0..2.0));
        let mut total = 0.0f64;
        for q in 0..3 {
            for p in 0..5 {
                total += m[[q, p]];
            }
        }
        let mut ent = 0.0f64;
        for q in 0..3 {
            for p in 0..5 {
                let s = m[[q, p]] / total;
                ent -= s * s.ln();
            }
        }
        assert!((layer_entropy(m.view()) - ent).abs() < 1e-12);
        assert!(layer_entropy(m.view()) <= 15f64.ln() + 1e-12);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let mut r = rng::stream(8, "m");
        let m = Array2::from_shape_fn((2, 3), |_| r.random_range(0.1..1.5));
        let g = regularizer_gradient(m.view());
        let f = |m: &Array2<f64>| layer_l1(m.view()) + layer_entropy(m.view());
        let h = 1e-6;
        for idx in [(0, 0), (1, 2), (0, 1)] {
            let mut up = m.clone();
            up[idx] += h;
            let mut dn = m.clone();
            dn[idx] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let layer = random_layer(3, 2, 9);
        let x = random_input(4, 3, 1);
        let (_, rec) = layer.forward(x.view()).unwrap();
        let (dx, grads) = layer.backward(&rec, Array2::zeros((4, 2)).view()).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
        assert!(grads.is_zero());
    }

    /// Scalar test loss: sum(Y * weights) + sum(|phi|_1 * edge_weights).
    fn probe_loss(layer: &KanLayer, x: &Array2<f64>, wy: &Array2<f64>, wm: &Array2<f64>) -> f64 {
        let (y, rec) = layer.forward(x.view()).unwrap();
        (&y * wy).sum() + (&rec.edge_outputs_l1.unwrap() * wm).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let layer = random_layer(4, 3, 21);
        let x = random_input(3, 4, 22);
        let mut r = rng::stream(23, "w");
        let wy = Array2::from_shape_fn((3, 3), |_| r.random_range(-1.0..1.0));
        let wm = Array2::from_shape_fn((3, 4), |_| r.random_range(-1.0..1.0));

        let (_, rec) = layer.forward(x.view()).unwrap();
        let (mut dx, mut grads) = layer.backward(&rec, wy.view()).unwrap();
        layer.backward_edge_magnitudes(&rec, wm.view(), &mut grads, Some(&mut dx)).unwrap();

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for (gi, group) in grads.groups.iter().enumerate() {
            for (i, analytic) in group.iter().enumerate() {
                let mut up = layer.clone();
                up.param_groups_mut()[gi][i] += h;
                let mut dn = layer.clone();
                dn.param_groups_mut()[gi][i] -= h;
                let fd = (probe_loss(&up, &x, &wy, &wm) - probe_loss(&dn, &x, &wy, &wm)) / (2.0 * h);
                assert!(rel(*analytic, fd) < 1e-4, "group {gi} index {i}: {analytic} vs {fd}");
            }
        }
        for b in 0..3 {
            for p in 0..4 {
                let mut up = x.clone();
                up[[b, p]] += h;
                let mut dn = x.clone();
                dn[[b, p]] -= h;
                let fd = (probe_loss(&layer, &up, &wy, &wm) - probe_loss(&layer, &dn, &wy, &wm)) / (2.0 * h);
                assert!(rel(dx[[b, p]], fd) < 1e-4, "dx[{b},{p}]: {} vs {fd}", dx[[b, p]]);
            }
        }
    }

    #[test]
    fn clamped_inputs_only_flow_through_base_activation() {
        let layer = random_layer(2, 2, 31);
        let x = Array2::from_shape_vec((1, 2), vec![1.7, -2.5]).unwrap();
        let (_, rec) = layer.forward(x.view()).unwrap();
        let dy = Array2::from_elem((1, 2), 1.0);
        let (dx, _) = layer.backward(&rec, dy.view()).unwrap();
        for p in 0..2 {
            let expect: f64 = (0..2).map(|q| layer.scale(q, p)).sum::<f64>() * layer.activation().derivative(x[[0, p]]);
            assert!((dx[[0, p]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let layer = random_layer(4, 3, 41);
        let x = random_input(5, 4, 42);
        let y = layer.predict(x.view()).unwrap();
        for b in 0..5 {
            let row = layer.forward_sample(x.row(b).as_slice().unwrap()).unwrap();
            for q in 0..3 {
                assert!((row[q] - y[[b, q]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn repeated_inputs_are_grouped_exactly() {
        let layer = random_layer(3, 2, 51);
        let x = Array2::from_shape_vec((4, 3), vec![0., 1., 0., 1., 1., 0., 0., 0., 0., 1., 1., 1.]).unwrap();
        let (_, rec) = layer.forward(x.view()).unwrap();
        let m = rec.edge_outputs_l1.unwrap();
        for q in 0..2 {
            for p in 0..3 {
                let direct: f64 =
                    (0..4).map(|b| layer.edge_value(q, p, x[[b, p]]).unwrap().abs()).sum::<f64>() / 4.0;
                assert!((m[[q, p]] - direct).abs() < 1e-12);
            }
        }
    }
}
