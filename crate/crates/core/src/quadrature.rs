//! Gauss–Hermite quadrature rescaled to the standard normal density.

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

/// Nodes and log-weights integrating against `N(0, 1)`.
///
/// Class `k` evaluates the trait at `μ_k + σ_k · node`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl QuadratureGrid {
    /// Builds an `n_nodes`-point rule. Requires `n_nodes >= 2`.
    pub fn new(n_nodes: usize) -> Result<Self> {
        if n_nodes < 2 {
            return Err(usage(format!("quadrature needs at least 2 nodes, got {n_nodes}")));
        }
        let (x, w) = gauss_hermite(n_nodes);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let nodes: Vec<f64> = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
        let weights: Vec<f64> = w.iter().map(|v| v / sqrt_pi).collect();
        let total: f64 = weights.iter().sum();
        let log_weights = weights.iter().map(|v| (v / total).ln()).collect();
        Ok(Self { nodes, log_weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }
}

/// Convenience wrapper matching the free-function style used across the crate.
pub fn make_grid(n_nodes: usize) -> Result<QuadratureGrid> {
    QuadratureGrid::new(n_nodes)
}

/// Physicists' Gauss–Hermite rule (weight `exp(-x^2)`), nodes in descending order.
///
/// Newton iteration on the orthonormal Hermite recurrence with the classic
/// asymptotic starting guesses.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^(-1/4)
    const EPS: f64 = 3.0e-15;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= EPS {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}
