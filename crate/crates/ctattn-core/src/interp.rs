//! Closed-form continuous-time interpolants with knots at the observation
//! times: natural cubic splines (default) and piecewise-linear interpolation.
//! These realize the continuous query function and the residual path.
//!
//! Evaluation is a linear map of the knot values, so the differentiable route
//! goes through [`basis_matrix`]: a constant [E, N] matrix applied to the
//! value matrix with a tape matmul, letting gradients flow back through the
//! tridiagonal solve.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplineKind {
    Cubic,
    Linear,
}

impl FromStr for SplineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cubic" => Ok(SplineKind::Cubic),
            "linear" => Ok(SplineKind::Linear),
            other => Err(Error::invalid(format!(
                "interpolation: expected `cubic` or `linear`, got `{other}`"
            ))),
        }
    }
}

/// Piecewise polynomial through (t_i, values_i). Immutable after `fit`.
///
/// Outside [t_1, t_N] both kinds continue linearly with the endpoint slope,
/// which keeps the cubic kind C^1 (and, with the natural boundary, C^2) at
/// the window edges.
#[derive(Clone, Debug)]
pub struct SplineFunction {
    pub kind: SplineKind,
    times: Vec<f64>,
    values: Tensor,
    /// Second derivatives at the knots, one row per knot (cubic kind only).
    m2: Option<Tensor>,
}

impl SplineFunction {
    pub fn fit(kind: SplineKind, times: &[f64], values: &Tensor) -> Result<Self> {
        let n = times.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "spline fit: need at least 2 knots, got {n}"
            )));
        }
        if values.rows() != n {
            return Err(Error::ShapeMismatch {
                op: "spline fit",
                lhs: vec![n],
                rhs: values.shape.clone(),
            });
        }
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!(
                    "spline fit: knot times must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        let m2 = match kind {
            SplineKind::Linear => None,
            SplineKind::Cubic => {
                let d = values.cols();
                let mut m2 = Tensor::zeros(&[n, d]);
                let mut col = vec![0.0; n];
                for j in 0..d {
                    for i in 0..n {
                        col[i] = values.at(i, j);
                    }
                    let m = natural_second_derivs(times, &col);
                    for i in 0..n {
                        m2.set(i, j, m[i]);
                    }
                }
                Some(m2)
            }
        };
        Ok(SplineFunction {
            kind,
            times: times.to_vec(),
            values: values.clone(),
            m2,
        })
    }

    pub fn n_knots(&self) -> usize {
        self.times.len()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn knot_times(&self) -> &[f64] {
        &self.times
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.times.len();
        // Index i with times[i] <= t < times[i+1], clamped to valid segments.
        let i = self.times.partition_point(|&k| k <= t);
        i.clamp(1, n - 1) - 1
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if t < self.times[0] {
            return self.extrapolate(t, 0);
        }
        if t > self.times[n - 1] {
            return self.extrapolate(t, n - 1);
        }
        let i = self.segment(t);
        self.eval_in_segment(t, i)
    }

    pub fn eval_deriv(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        let t_clamped = t.clamp(self.times[0], self.times[n - 1]);
        let i = self.segment(t_clamped);
        self.deriv_in_segment(t_clamped, i)
    }

    fn extrapolate(&self, t: f64, knot: usize) -> Vec<f64> {
        let t0 = self.times[knot];
        let y0 = self.eval_in_segment(t0, if knot == 0 { 0 } else { knot - 1 });
        let s = self.deriv_in_segment(t0, if knot == 0 { 0 } else { knot - 1 });
        y0.iter()
            .zip(s.iter())
            .map(|(&y, &sl)| y + sl * (t - t0))
            .collect()
    }

    fn eval_in_segment(&self, t: f64, i: usize) -> Vec<f64> {
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let d = self.dim();
        match self.kind {
            SplineKind::Linear => {
                let w = (t - t0) / h;
                (0..d)
                    .map(|j| self.values.at(i, j) * (1.0 - w) + self.values.at(i + 1, j) * w)
                    .collect()
            }
            SplineKind::Cubic => {
                let m2 = self.m2.as_ref().expect("cubic spline has second derivs");
                let (a, b) = (t1 - t, t - t0);
                (0..d)
                    .map(|j| {
                        let (m0, m1) = (m2.at(i, j), m2.at(i + 1, j));
                        let (y0, y1) = (self.values.at(i, j), self.values.at(i + 1, j));
                        m0 * a * a * a / (6.0 * h)
                            + m1 * b * b * b / (6.0 * h)
                            + (y0 / h - m0 * h / 6.0) * a
                            + (y1 / h - m1 * h / 6.0) * b
                    })
                    .collect()
            }
        }
    }

    fn deriv_in_segment(&self, t: f64, i: usize) -> Vec<f64> {
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let d = self.dim();
        match self.kind {
            SplineKind::Linear => (0..d)
                .map(|j| (self.values.at(i + 1, j) - self.values.at(i, j)) / h)
                .collect(),
            SplineKind::Cubic => {
                let m2 = self.m2.as_ref().expect("cubic spline has second derivs");
                let (a, b) = (t1 - t, t - t0);
                (0..d)
                    .map(|j| {
                        let (m0, m1) = (m2.at(i, j), m2.at(i + 1, j));
                        let (y0, y1) = (self.values.at(i, j), self.values.at(i + 1, j));
                        -m0 * a * a / (2.0 * h) + m1 * b * b / (2.0 * h) + (y1 - y0) / h
                            - (m1 - m0) * h / 6.0
                    })
                    .collect()
            }
        }
    }
}

/// Second derivatives of the natural cubic spline through (times, y):
/// zero at both ends, Thomas solve for the interior.
fn natural_second_derivs(times: &[f64], y: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut m = vec![0.0; n];
    if n == 2 {
        return m;
    }
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut sup = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for idx in 0..k {
        let i = idx + 1;
        let h0 = times[i] - times[i - 1];
        let h1 = times[i + 1] - times[i];
        diag[idx] = (h0 + h1) / 3.0;
        sup[idx] = h1 / 6.0;
        rhs[idx] = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
    }
    // Forward elimination: sub-diagonal entry for row idx is h0/6.
    for idx in 1..k {
        let i = idx + 1;
        let sub = (times[i] - times[i - 1]) / 6.0;
        let w = sub / diag[idx - 1];
        diag[idx] -= w * sup[idx - 1];
        rhs[idx] -= w * rhs[idx - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for idx in (0..k - 1).rev() {
        m[idx + 1] = (rhs[idx] - sup[idx] * m[idx + 2]) / diag[idx];
    }
    m
}

/// Constant [E, N] matrix mapping knot values to evaluations at `eval_times`
/// (column j is the interpolant of the j-th unit data vector). Multiplying it
/// with a value matrix on a tape reproduces `SplineFunction::eval` exactly.
pub fn basis_matrix(kind: SplineKind, knot_times: &[f64], eval_times: &[f64]) -> Result<Tensor> {
    let n = knot_times.len();
    if n == 0 {
        return Err(Error::invalid("basis_matrix: no knots"));
    }
    if n == 1 {
        // A single observation extends as a constant function.
        return Ok(Tensor::full(&[eval_times.len(), 1], 1.0));
    }
    let mut out = Tensor::zeros(&[eval_times.len(), n]);
    let mut unit = Tensor::zeros(&[n, 1]);
    for j in 0..n {
        unit.data[j] = 1.0;
        let s = SplineFunction::fit(kind, knot_times, &unit)?;
        for (e, &t) in eval_times.iter().enumerate() {
            out.set(e, j, s.eval(t)[0]);
        }
        unit.data[j] = 0.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn hat_spline() -> SplineFunction {
        // Knots (0,0), (1,1), (2,0).
        let v = Tensor::col(&[0.0, 1.0, 0.0]);
        SplineFunction::fit(SplineKind::Cubic, &[0.0, 1.0, 2.0], &v).unwrap()
    }

    #[test]
    fn interpolates_knots_exactly() {
        let s = hat_spline();
        assert_eq!(s.eval(1.0)[0], 1.0);
        assert!(s.eval(0.0)[0].abs() < 1e-15);
        assert!(s.eval(2.0)[0].abs() < 1e-15);
    }

    #[test]
    fn natural_boundary_second_derivative_is_zero() {
        let s = hat_spline();
        let m2 = s.m2.as_ref().unwrap();
        assert_eq!(m2.at(0, 0), 0.0);
        assert_eq!(m2.at(2, 0), 0.0);
        // Same conclusion from second differences of the evaluation.
        let h = 1e-4;
        for t in [0.0f64, 2.0] {
            let tt = t.clamp(h, 2.0 - h);
            let dd = (s.eval(tt + h)[0] - 2.0 * s.eval(tt)[0] + s.eval(tt - h)[0]) / (h * h);
            // Interior second derivative near the ends approaches 0 linearly.
            assert!(dd.abs() < 3.5e-4 / h, "t={t}: {dd}");
        }
    }

    #[test]
    fn reference_value_at_half() {
        // Tridiagonal solve by hand: M = (0, -3, 0), so S(0.5) = 0.6875.
        let s = hat_spline();
        assert!((s.eval(0.5)[0] - 0.6875).abs() < 1e-14);
    }

    #[test]
    fn linear_kind_midpoint() {
        let v = Tensor::col(&[0.0, 4.0]);
        let s = SplineFunction::fit(SplineKind::Linear, &[0.0, 2.0], &v).unwrap();
        assert_eq!(s.eval(1.0)[0], 2.0);
    }

    #[test]
    fn two_knot_cubic_is_a_line() {
        let v = Tensor::col(&[1.0, 3.0]);
        let s = SplineFunction::fit(SplineKind::Cubic, &[0.0, 1.0], &v).unwrap();
        assert!((s.eval(0.25)[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_knots() {
        let v = Tensor::col(&[0.0, 1.0]);
        assert!(SplineFunction::fit(SplineKind::Cubic, &[0.0, 0.0], &v).is_err());
        assert!(SplineFunction::fit(SplineKind::Cubic, &[1.0, 0.0], &v).is_err());
        let v1 = Tensor::col(&[0.0]);
        assert!(SplineFunction::fit(SplineKind::Cubic, &[0.0], &v1).is_err());
    }

    #[test]
    fn extrapolation_is_continuous_and_c1() {
        let s = hat_spline();
        let eps = 1e-7;
        for (t_edge, outside) in [(0.0, -eps), (2.0, 2.0 + eps)] {
            let inside = s.eval(t_edge)[0];
            let out = s.eval(outside)[0];
            assert!((inside - out).abs() < 1e-5);
            // Slope of the continuation equals the boundary derivative.
            let slope = (s.eval(outside + eps)[0] - out) / eps;
            let expect = s.eval_deriv(t_edge)[0];
            assert!((slope - expect).abs() < 1e-5, "{slope} vs {expect}");
        }
    }

    #[test]
    fn linear_data_reproduced_everywhere() {
        // A linear function satisfies the natural boundary conditions, so the
        // cubic spline must reproduce it exactly, interior and extrapolated.
        let times = [0.0, 0.3, 1.1, 2.0, 2.7];
        let v = Tensor::col(&times.map(|t| 2.0 * t - 1.0));
        let s = SplineFunction::fit(SplineKind::Cubic, &times, &v).unwrap();
        let mut rng = crate::rng::stream(3, "interp-test");
        for _ in 0..100 {
            let t = rng.gen_range(-0.5..3.2);
            assert!((s.eval(t)[0] - (2.0 * t - 1.0)).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn spline_determined_by_its_knot_samples() {
        // Uniqueness: refitting a natural spline from its own knot values
        // gives the same function at interior points.
        let times: Vec<f64> = (0..7).map(|i| i as f64 * 0.4).collect();
        let mut rng = crate::rng::stream(11, "interp-test");
        let v = Tensor::randn(&[7, 2], 1.0, &mut rng);
        let s1 = SplineFunction::fit(SplineKind::Cubic, &times, &v).unwrap();
        let resampled: Vec<f64> = times.iter().flat_map(|&t| s1.eval(t)).collect();
        let s2 = SplineFunction::fit(
            SplineKind::Cubic,
            &times,
            &Tensor::new(vec![7, 2], resampled).unwrap(),
        )
        .unwrap();
        for i in 0..100 {
            let t = 0.012 + i as f64 * 0.024;
            let (a, b) = (s1.eval(t), s2.eval(t));
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_eval_linear_in_values() {
        let times = [0.0, 0.5, 1.3, 2.0];
        let mut rng = crate::rng::stream(5, "interp-test");
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut ab = a.clone();
        for (x, y) in ab.data.iter_mut().zip(b.data.iter()) {
            *x += y;
        }
        for kind in [SplineKind::Cubic, SplineKind::Linear] {
            let sa = SplineFunction::fit(kind, &times, &a).unwrap();
            let sb = SplineFunction::fit(kind, &times, &b).unwrap();
            let sab = SplineFunction::fit(kind, &times, &ab).unwrap();
            for i in 0..50 {
                let t = -0.2 + i as f64 * 0.05;
                let (va, vb, vab) = (sa.eval(t), sb.eval(t), sab.eval(t));
                for j in 0..3 {
                    assert!((va[j] + vb[j] - vab[j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn basis_matrix_matches_direct_eval() {
        let times = [0.0, 0.4, 1.0, 1.5];
        let evals = [-0.3, 0.0, 0.2, 0.7, 1.2, 1.5, 1.9];
        let mut rng = crate::rng::stream(9, "interp-test");
        let v = Tensor::randn(&[4, 2], 1.0, &mut rng);
        for kind in [SplineKind::Cubic, SplineKind::Linear] {
            let basis = basis_matrix(kind, &times, &evals).unwrap();
            let s = SplineFunction::fit(kind, &times, &v).unwrap();
            let out = basis.matmul(&v).unwrap();
            for (e, &t) in evals.iter().enumerate() {
                let direct = s.eval(t);
                for j in 0..2 {
                    assert!(
                        (out.at(e, j) - direct[j]).abs() < 1e-12,
                        "kind {kind:?} t={t}"
                    );
                }
            }
        }
    }
}
