//! Uniform B-spline bases over a fixed grid.
//!
//! A grid with `G` intervals on `[range_min, range_max]` and order `k` carries
//! `G + 2k + 1` knots (the interval knots extended by `k` uniform slots on each
//! side) and `G + k` basis functions. Evaluation uses the triangular
//! Cox–de Boor scheme on the single knot span containing `x`, so only the
//! `k + 1` locally supported bases are ever computed.

use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

/// Largest supported spline order.
pub const MAX_ORDER: usize = 15;

/// Knot layout shared by every edge of one KAN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    range_min: f64,
    range_max: f64,
    grid_count: usize,
    order: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(range_min: f64, range_max: f64, grid_count: usize, order: usize) -> Result<Self> {
        if !(range_min.is_finite() && range_max.is_finite()) || range_min >= range_max {
            return Err(KanError::InvalidArgument(format!(
                "grid range must satisfy min < max, got [{range_min}, {range_max}]"
            )));
        }
        if grid_count == 0 {
            return Err(KanError::InvalidArgument("grid count must be >= 1".into()));
        }
        if order == 0 || order > MAX_ORDER {
            return Err(KanError::InvalidArgument(format!(
                "spline order must be in 1..={MAX_ORDER}, got {order}"
            )));
        }
        let step = (range_max - range_min) / grid_count as f64;
        let knots = (0..grid_count + 2 * order + 1)
            .map(|j| range_min + (j as f64 - order as f64) * step)
            .collect();
        Ok(Self { range_min, range_max, grid_count, order, knots })
    }

    pub fn range_min(&self) -> f64 {
        self.range_min
    }

    pub fn range_max(&self) -> f64 {
        self.range_max
    }

    pub fn grid_count(&self) -> usize {
        self.grid_count
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `G + k`.
    pub fn basis_count(&self) -> usize {
        self.grid_count + self.order
    }

    pub fn step(&self) -> f64 {
        (self.range_max - self.range_min) / self.grid_count as f64
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.range_min, self.range_max)
    }

    /// True when `x` lies outside the grid range and would be clamped.
    pub fn is_clamped(&self, x: f64) -> bool {
        x < self.range_min || x > self.range_max
    }

    /// Index of the knot span `[t_s, t_{s+1})` holding `x`; `x` must already be
    /// clamped. The right boundary is folded into the last interior span.
    pub(crate) fn span(&self, x: f64) -> usize {
        let k = self.order;
        let rel = ((x - self.range_min) / self.step()).floor();
        let interval = if rel <= 0.0 { 0 } else { (rel as usize).min(self.grid_count - 1) };
        interval + k
    }

    /// Writes the `k + 1` nonzero basis values at `x` into `out`. The value
    /// `out[r]` belongs to basis `span - k + r`.
    pub(crate) fn local_values(&self, x: f64, span: usize, out: &mut [f64]) {
        self.local_values_of_degree(x, span, self.order, out);
    }

    fn local_values_of_degree(&self, x: f64, span: usize, degree: usize, out: &mut [f64]) {
        let t = &self.knots;
        let mut left = [0.0; MAX_ORDER + 1];
        let mut right = [0.0; MAX_ORDER + 1];
        out[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            out[j] = saved;
        }
    }

    /// Writes the first derivatives of the `k + 1` nonzero bases at `x`.
    pub(crate) fn local_derivatives(&self, x: f64, span: usize, out: &mut [f64]) {
        let k = self.order;
        let t = &self.knots;
        let mut lower = [0.0; MAX_ORDER + 1];
        self.local_values_of_degree(x, span, k - 1, &mut lower);
        // lower[r] is B_{span-k+1+r, k-1}.
        for (r, slot) in out.iter_mut().enumerate().take(k + 1) {
            let j = span - k + r;
            let a = if r >= 1 { lower[r - 1] } else { 0.0 };
            let b = if r < k { lower[r] } else { 0.0 };
            let da = k as f64 / (t[j + k] - t[j]);
            let db = k as f64 / (t[j + k + 1] - t[j + 1]);
            *slot = da * a - db * b;
        }
    }

    fn check_finite(x: f64) -> Result<()> {
        if x.is_finite() {
            Ok(())
        } else {
            Err(KanError::InvalidArgument(format!("spline input must be finite, got {x}")))
        }
    }

    /// All `G + k` basis values at the clamped `x`.
    pub fn basis_values(&self, x: f64) -> Result<Vec<f64>> {
        Self::check_finite(x)?;
        let xc = self.clamp(x);
        let span = self.span(xc);
        let mut local = [0.0; MAX_ORDER + 1];
        self.local_values(xc, span, &mut local);
        let mut out = vec![0.0; self.basis_count()];
        let first = span - self.order;
        out[first..=span].copy_from_slice(&local[..=self.order]);
        Ok(out)
    }

    /// All `G + k` basis derivatives `dB_i/dx` at the clamped `x`.
    ///
    /// At the range boundaries this is the one-sided derivative from inside
    /// the grid; callers that clamp treat the input derivative as zero outside.
    pub fn basis_derivatives(&self, x: f64) -> Result<Vec<f64>> {
        Self::check_finite(x)?;
        let xc = self.clamp(x);
        let span = self.span(xc);
        let mut local = [0.0; MAX_ORDER + 1];
        self.local_derivatives(xc, span, &mut local);
        let mut out = vec![0.0; self.basis_count()];
        let first = span - self.order;
        out[first..=span].copy_from_slice(&local[..=self.order]);
        Ok(out)
    }

    /// `sum_i coeffs[i] * B_i(clamp(x))`.
    pub fn eval(&self, coeffs: &[f64], x: f64) -> Result<f64> {
        if coeffs.len() != self.basis_count() {
            return Err(KanError::LengthMismatch { expected: self.basis_count(), got: coeffs.len() });
        }
        Self::check_finite(x)?;
        let xc = self.clamp(x);
        let span = self.span(xc);
        let mut local = [0.0; MAX_ORDER + 1];
        self.local_values(xc, span, &mut local);
        let first = span - self.order;
        Ok(local[..=self.order].iter().zip(&coeffs[first..=span]).map(|(b, c)| b * c).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook recursive Cox–de Boor over the full knot vector.
    fn cox_de_boor(t: &[f64], i: usize, degree: usize, x: f64) -> f64 {
        if degree == 0 {
            return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + degree] - t[i];
        if d1 > 0.0 {
            v += (x - t[i]) / d1 * cox_de_boor(t, i, degree - 1, x);
        }
        let d2 = t[i + degree + 1] - t[i + 1];
        if d2 > 0.0 {
            v += (t[i + degree + 1] - x) / d2 * cox_de_boor(t, i + 1, degree - 1, x);
        }
        v
    }

    #[test]
    fn knot_layout() {
        let g = SplineGrid::new(-1.0, 1.0, 2, 3).unwrap();
        assert_eq!(g.basis_count(), 5);
        assert_eq!(g.knots().len(), 9);
        for w in g.knots().windows(2) {
            assert!((w[1] - w[0] - 1.0).abs() < 1e-12);
        }

        let g = SplineGrid::new(0.0, 1.0, 1, 1).unwrap();
        assert_eq!(g.basis_count(), 2);
        assert_eq!(g.knots(), &[-1.0, 0.0, 1.0, 2.0]);

        assert_eq!(SplineGrid::new(-1.0, 1.0, 5, 3).unwrap().basis_count(), 8);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(SplineGrid::new(1.0, -1.0, 2, 3).is_err());
        assert!(SplineGrid::new(0.0, 0.0, 2, 3).is_err());
        assert!(SplineGrid::new(-1.0, 1.0, 0, 3).is_err());
        assert!(SplineGrid::new(-1.0, 1.0, 2, 0).is_err());
        let g = SplineGrid::new(-1.0, 1.0, 2, 3).unwrap();
        assert!(g.basis_values(f64::NAN).is_err());
        assert!(g.eval(&[0.0; 4], 0.0).is_err());
    }

    #[test]
    fn cubic_values_at_interior_knot() {
        // Hand evaluation of the uniform cubic B-spline at a knot: 1/6, 2/3, 1/6.
        let g = SplineGrid::new(-1.0, 1.0, 2, 3).unwrap();
        let v = g.basis_values(0.0).unwrap();
        let nz: Vec<f64> = v.iter().copied().filter(|b| *b > 1e-15).collect();
        assert_eq!(nz.len(), 3);
        for (a, b) in nz.iter().zip([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_hats() {
        let g = SplineGrid::new(0.0, 1.0, 1, 1).unwrap();
        let v = g.basis_values(0.5).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15);
        let d = g.basis_derivatives(0.25).unwrap();
        assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_recursive_oracle() {
        for order in 1..=3 {
            for grid_count in 1..=5 {
                let g = SplineGrid::new(-1.0, 1.0, grid_count, order).unwrap();
                for step in 0..=200 {
                    let x = -1.0 + 2.0 * step as f64 / 200.0;
                    // The half-open recursion is zero at the right boundary; probe just inside.
                    let probe = if step == 200 { 1.0 - 1e-12 } else { x };
                    let fast = g.basis_values(probe).unwrap();
                    for (i, f) in fast.iter().enumerate() {
                        let slow = cox_de_boor(g.knots(), i, order, probe);
                        assert!((f - slow).abs() < 1e-12, "G={grid_count} k={order} x={probe} i={i}");
                    }
                }
            }
        }
    }

    #[test]
    fn right_boundary_keeps_partition_of_unity() {
        let g = SplineGrid::new(-1.0, 1.0, 3, 3).unwrap();
        let s: f64 = g.basis_values(1.0).unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        // Outside inputs are clamped.
        assert_eq!(g.basis_values(7.0).unwrap(), g.basis_values(1.0).unwrap());
        assert_eq!(g.basis_values(-7.0).unwrap(), g.basis_values(-1.0).unwrap());
    }

    #[test]
    fn zero_and_unit_coefficients() {
        let g = SplineGrid::new(-1.0, 1.0, 4, 3).unwrap();
        let zeros = vec![0.0; g.basis_count()];
        let ones = vec![1.0; g.basis_count()];
        for x in [-0.9, -0.3, 0.0, 0.41, 0.99] {
            assert_eq!(g.eval(&zeros, x).unwrap(), 0.0);
            assert!((g.eval(&ones, x).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    fn grid_strategy() -> impl Strategy<Value = SplineGrid> {
        (1usize..=5, 1usize..=3).prop_map(|(g, k)| SplineGrid::new(-1.0, 1.0, g, k).unwrap())
    }

    proptest! {
        #[test]
        fn eval_matches_direct_summation(
            grid in grid_strategy(),
            x in -1.0f64..1.0,
            seed in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let coeffs = &seed[..grid.basis_count()];
            let basis = grid.basis_values(x).unwrap();
            let direct: f64 = basis.iter().zip(coeffs).map(|(b, c)| b * c).sum();
            prop_assert!((grid.eval(coeffs, x).unwrap() - direct).abs() < 1e-12);
        }

        #[test]
        fn eval_is_linear_in_coefficients(
            grid in grid_strategy(),
            x in -1.0f64..1.0,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            c1 in proptest::collection::vec(-2.0f64..2.0, 8),
            c2 in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let n = grid.basis_count();
            let mix: Vec<f64> = c1[..n].iter().zip(&c2[..n]).map(|(u, v)| a * u + b * v).collect();
            let lhs = grid.eval(&mix, x).unwrap();
            let rhs = a * grid.eval(&c1[..n], x).unwrap() + b * grid.eval(&c2[..n], x).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn derivatives_sum_to_zero(grid in grid_strategy(), x in -0.999f64..0.999) {
            let s: f64 = grid.basis_derivatives(x).unwrap().iter().sum();
            prop_assert!(s.abs() < 1e-10);
        }
    }
}
