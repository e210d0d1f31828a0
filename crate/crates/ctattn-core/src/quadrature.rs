//! Quadrature rules on [-1, 1]: hard-coded Gauss-Legendre up to five nodes,
//! plus the two-point endpoint (trapezoid) rule used as the default score
//! approximation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadKind {
    Linear,
    Gauss,
}

/// Nodes and weights for approximating an integral over [-1, 1].
/// Weights always sum to 2, the measure of the interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub kind: QuadKind,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// `gauss` supports P in {2, 3, 4, 5}; `linear` ignores P and uses the
    /// interval endpoints with unit weights.
    pub fn make(kind: QuadKind, p: usize) -> Result<Self> {
        match kind {
            QuadKind::Linear => Ok(QuadratureRule {
                kind,
                nodes: vec![-1.0, 1.0],
                weights: vec![1.0, 1.0],
            }),
            QuadKind::Gauss => {
                let (nodes, weights) = gauss_legendre(p)?;
                Ok(QuadratureRule {
                    kind,
                    nodes,
                    weights,
                })
            }
        }
    }

    pub fn linear() -> Self {
        Self::make(QuadKind::Linear, 2).expect("linear rule is always valid")
    }

    pub fn gauss(p: usize) -> Result<Self> {
        Self::make(QuadKind::Gauss, p)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sum of weighted samples, one sample per node. The 1/2 factor from any
    /// change of variables belongs to the caller.
    pub fn integrate(&self, samples: &[f64]) -> Result<f64> {
        if samples.len() != self.nodes.len() {
            return Err(Error::invalid(format!(
                "integrate: {} samples for {} nodes",
                samples.len(),
                self.nodes.len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(samples.iter())
            .map(|(&w, &s)| w * s)
            .sum())
    }

    /// Integrate a function over [-1, 1] by sampling it at the nodes.
    pub fn integrate_fn(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.weights
            .iter()
            .zip(self.nodes.iter())
            .map(|(&w, &x)| w * f(x))
            .sum()
    }
}

impl fmt::Display for QuadratureRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            QuadKind::Linear => write!(f, "linear"),
            QuadKind::Gauss => write!(f, "gauss:{}", self.nodes.len()),
        }
    }
}

/// Parses "linear" or "gauss:P".
impl FromStr for QuadratureRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "linear" {
            return Ok(QuadratureRule::linear());
        }
        if let Some(p) = s.strip_prefix("gauss:") {
            let p: usize = p
                .parse()
                .map_err(|_| Error::invalid(format!("quadrature: bad node count in `{s}`")))?;
            return QuadratureRule::gauss(p);
        }
        Err(Error::invalid(format!(
            "quadrature: expected `linear` or `gauss:P`, got `{s}`"
        )))
    }
}

fn gauss_legendre(p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    // Closed forms; the experiments never go past five nodes.
    let (nodes, weights): (Vec<f64>, Vec<f64>) = match p {
        2 => {
            let x = 1.0 / 3.0_f64.sqrt();
            (vec![-x, x], vec![1.0, 1.0])
        }
        3 => {
            let x = (3.0 / 5.0_f64).sqrt();
            (vec![-x, 0.0, x], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
        }
        4 => {
            let a = (3.0 / 7.0 - 2.0 / 7.0 * (6.0 / 5.0_f64).sqrt()).sqrt();
            let b = (3.0 / 7.0 + 2.0 / 7.0 * (6.0 / 5.0_f64).sqrt()).sqrt();
            let wa = (18.0 + 30.0_f64.sqrt()) / 36.0;
            let wb = (18.0 - 30.0_f64.sqrt()) / 36.0;
            (vec![-b, -a, a, b], vec![wb, wa, wa, wb])
        }
        5 => {
            let a = (5.0 - 2.0 * (10.0 / 7.0_f64).sqrt()).sqrt() / 3.0;
            let b = (5.0 + 2.0 * (10.0 / 7.0_f64).sqrt()).sqrt() / 3.0;
            let wa = (322.0 + 13.0 * 70.0_f64.sqrt()) / 900.0;
            let wb = (322.0 - 13.0 * 70.0_f64.sqrt()) / 900.0;
            (vec![-b, -a, 0.0, a, b], vec![wb, wa, 128.0 / 225.0, wa, wb])
        }
        _ => {
            return Err(Error::invalid(format!(
                "quadrature: gauss rule supports 2..=5 nodes, got {p}"
            )))
        }
    };
    Ok((nodes, weights))
}
