//! Marginal likelihood, E-step posteriors and the smooth M-step surrogate.
//!
//! The trait is integrated out with a class-recentred Gauss–Hermite rule: for
//! class `k` the trait takes the values `μ_k + σ_k x_q` with prior weight
//! `w_q`. The discretised model is a finite mixture over `(class, node)`
//! pairs, so every quantity below is an exact function of that mixture.
//!
//! The surrogate minimised in the M-step treats the standardised node `x_q`
//! (not `θ`) as the latent variable. Its smooth part is
//!
//! ```text
//! F(Δ₂) = -Σ_{k,q} Σ_j [ r1_jkq · log π_jkq + (r_kq − r1_jkq) · log(1 − π_jkq) ]
//! ```
//!
//! where `r_kq` and `r1_jkq` are expected counts taken under the posterior at
//! the linearisation point and `π_jkq = logistic(a_j(μ_k + σ_k x_q) + d_j + δ_jk)`.

use ndarray::{Array2, Array3};

use crate::error::{dimension, usage, Result};
use crate::math::{log_sigmoid, pairwise_sum, sigmoid};
use crate::model::{ModelParams, ResponseMatrix};
use crate::quadrature::QuadratureGrid;

/// How class membership enters the posterior.
#[derive(Debug, Clone, Copy)]
pub enum Membership<'a> {
    /// Classes are latent with prior `ν`.
    Latent,
    /// Classes are observed; `ν` plays no role.
    Known(&'a [usize]),
}

/// Posterior-weighted response counts, the sufficient statistics of the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    pub(crate) n_items: usize,
    pub(crate) n_classes: usize,
    pub(crate) n_nodes: usize,
    /// `Σ_i P(ξ_i = k, x_i = x_q | y_i)`, indexed `k * Q + q`.
    pub mass: Vec<f64>,
    /// `Σ_i P(ξ_i = k, x_i = x_q | y_i) · y_ij`, indexed `j * (K+1) * Q + k * Q + q`.
    pub correct: Vec<f64>,
}

impl ExpectedCounts {
    fn zeros(n_items: usize, n_classes: usize, n_nodes: usize) -> Self {
        let cq = n_classes * n_nodes;
        Self { n_items, n_classes, n_nodes, mass: vec![0.0; cq], correct: vec![0.0; n_items * cq] }
    }

    /// Expected number of respondents in each class.
    pub fn class_totals(&self) -> Vec<f64> {
        self.mass.chunks_exact(self.n_nodes).map(pairwise_sum).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }
}

/// Output of the E-step.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    /// `P(ξ_i = k | y_i)`, shape `N × (K+1)`.
    pub class_post: Array2<f64>,
    /// `P(ξ_i = k, x_i = x_q | y_i)`, shape `N × (K+1) × Q`. Empty when not requested.
    pub node_post: Array3<f64>,
    pub counts: ExpectedCounts,
    /// `log p(y_i)` per respondent under the parameters the posterior was computed at.
    pub respondent_loglik: Vec<f64>,
    /// Sum of `respondent_loglik`.
    pub loglik: f64,
}

/// Gradient of the smooth surrogate with respect to the non-proportion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothGradient {
    pub discriminations: Vec<f64>,
    pub easiness: Vec<f64>,
    /// `J × K`, one column per non-reference class.
    pub dif_effects: Array2<f64>,
    /// Length `K`.
    pub class_means: Vec<f64>,
    /// Length `K`.
    pub class_sds: Vec<f64>,
}

impl SmoothGradient {
    pub fn norm(&self) -> f64 {
        self.discriminations
            .iter()
            .chain(&self.easiness)
            .chain(self.dif_effects.iter())
            .chain(&self.class_means)
            .chain(&self.class_sds)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Logits `η_jkq` and `Σ_j softplus(η_jkq)` for every class/node pair.
struct LogitTable {
    cq: usize,
    eta: Vec<f64>,
    neg_softplus_sum: Vec<f64>,
}

impl LogitTable {
    fn new(params: &ModelParams, grid: &QuadratureGrid) -> Self {
        let j = params.n_items();
        let c = params.n_classes();
        let q = grid.len();
        let cq = c * q;
        let mut eta = vec![0.0; j * cq];
        let mut neg_softplus_sum = vec![0.0; cq];
        for item in 0..j {
            let a = params.discriminations[item];
            let d = params.easiness[item];
            let row = &mut eta[item * cq..(item + 1) * cq];
            for k in 0..c {
                let shift = d + params.dif(item, k);
                let (mu, sd) = (params.class_means[k], params.class_sds[k]);
                for (node_idx, &x) in grid.nodes().iter().enumerate() {
                    let e = a * (mu + sd * x) + shift;
                    row[k * q + node_idx] = e;
                    neg_softplus_sum[k * q + node_idx] += log_sigmoid(-e);
                }
            }
        }
        Self { cq, eta, neg_softplus_sum }
    }

    /// `base + Σ_{j: y_j = 1} η_j` for every class/node pair.
    #[inline]
    fn fill_conditional(&self, row: &[u8], base: &[f64], out: &mut [f64]) {
        out.copy_from_slice(base);
        for (item, &y) in row.iter().enumerate() {
            if y == 1 {
                let eta = &self.eta[item * self.cq..(item + 1) * self.cq];
                for (o, e) in out.iter_mut().zip(eta) {
                    *o += e;
                }
            }
        }
    }
}

fn check_dims(data: &ResponseMatrix, params: &ModelParams) -> Result<()> {
    if data.n_items() != params.n_items() {
        return Err(dimension(format!("data has {} items, parameters have {}", data.n_items(), params.n_items())));
    }
    Ok(())
}

fn check_membership(data: &ResponseMatrix, params: &ModelParams, membership: Membership<'_>) -> Result<()> {
    if let Membership::Known(labels) = membership {
        if labels.len() != data.n_respondents() {
            return Err(dimension(format!("{} labels for {} respondents", labels.len(), data.n_respondents())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= params.n_classes()) {
            return Err(usage(format!("label {bad} out of range")));
        }
    }
    Ok(())
}

/// Single pass over respondents computing the posterior over (class, node).
///
/// Respondents are processed in index order and every accumulator is summed
/// in that order, so the result is reproducible bit for bit.
pub(crate) fn posterior_pass(
    data: &ResponseMatrix,
    params: &ModelParams,
    grid: &QuadratureGrid,
    membership: Membership<'_>,
    keep_nodes: bool,
) -> Responsibilities {
    let n = data.n_respondents();
    let j = data.n_items();
    let c = params.n_classes();
    let q = grid.len();
    let cq = c * q;
    let table = LogitTable::new(params, grid);

    // Per (class, node): log prior plus -Σ_j softplus(η); correct answers add η.
    let mut base = table.neg_softplus_sum.clone();
    for k in 0..c {
        let log_nu = match membership {
            Membership::Latent => params.class_proportions[k].ln(),
            Membership::Known(_) => 0.0,
        };
        for (node_idx, &lw) in grid.log_weights().iter().enumerate() {
            base[k * q + node_idx] += log_nu + lw;
        }
    }

    let mut counts = ExpectedCounts::zeros(j, c, q);
    let mut class_post = Array2::zeros((n, c));
    let mut node_post = if keep_nodes { Array3::zeros((n, c, q)) } else { Array3::zeros((0, c, q)) };
    let mut respondent_loglik = Vec::with_capacity(n);
    let mut joint = vec![0.0; cq];

    for (i, row) in data.rows().enumerate() {
        let (lo, hi) = match membership {
            Membership::Latent => (0, cq),
            Membership::Known(labels) => (labels[i] * q, (labels[i] + 1) * q),
        };
        table.fill_conditional(row, &base, &mut joint);
        let block = &mut joint[lo..hi];
        let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in block.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        respondent_loglik.push(max + total.ln());
        let inv = 1.0 / total;
        for v in block.iter_mut() {
            *v *= inv;
        }
        let post = &joint[lo..hi];
        for (m, p) in counts.mass[lo..hi].iter_mut().zip(post) {
            *m += p;
        }
        for (item, &y) in row.iter().enumerate() {
            if y == 1 {
                let acc = &mut counts.correct[item * cq + lo..item * cq + hi];
                for (a, p) in acc.iter_mut().zip(post) {
                    *a += p;
                }
            }
        }
        for k in lo / q..hi / q {
            let slice = &post[k * q - lo..(k + 1) * q - lo];
            class_post[[i, k]] = slice.iter().sum::<f64>();
            if keep_nodes {
                for (node_idx, &p) in slice.iter().enumerate() {
                    node_post[[i, k, node_idx]] = p;
                }
            }
        }
    }

    let loglik = pairwise_sum(&respondent_loglik);
    Responsibilities { class_post, node_post, counts, respondent_loglik, loglik }
}

/// Marginal log-likelihood with both the trait and the class integrated out.
pub fn marginal_loglik(data: &ResponseMatrix, params: &ModelParams, grid: &QuadratureGrid) -> Result<f64> {
    check_dims(data, params)?;
    params.ensure_valid()?;
    Ok(posterior_pass(data, params, grid, Membership::Latent, false).loglik)
}

/// Log-likelihood when every respondent's class is known (`ν` is ignored).
pub fn known_class_loglik(
    data: &ResponseMatrix,
    params: &ModelParams,
    grid: &QuadratureGrid,
    labels: &[usize],
) -> Result<f64> {
    check_dims(data, params)?;
    params.ensure_valid()?;
    check_membership(data, params, Membership::Known(labels))?;
    Ok(posterior_pass(data, params, grid, Membership::Known(labels), false).loglik)
}

/// `-log L(Δ) + λ Σ_{j, k≥1} |δ_jk|`.
pub fn penalized_objective(
    data: &ResponseMatrix,
    params: &ModelParams,
    grid: &QuadratureGrid,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(usage(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(-marginal_loglik(data, params, grid)? + lambda * params.l1_dif_norm())
}

/// Posterior over (class, node) for every respondent, with the full node array.
pub fn e_step(data: &ResponseMatrix, params: &ModelParams, grid: &QuadratureGrid) -> Result<Responsibilities> {
    e_step_with(data, params, grid, Membership::Latent, true)
}

/// E-step with explicit membership handling; `keep_nodes = false` skips the `N × (K+1) × Q` array.
pub fn e_step_with(
    data: &ResponseMatrix,
    params: &ModelParams,
    grid: &QuadratureGrid,
    membership: Membership<'_>,
    keep_nodes: bool,
) -> Result<Responsibilities> {
    check_dims(data, params)?;
    params.ensure_valid()?;
    check_membership(data, params, membership)?;
    Ok(posterior_pass(data, params, grid, membership, keep_nodes))
}

fn check_counts(counts: &ExpectedCounts, params: &ModelParams, grid: &QuadratureGrid) -> Result<()> {
    if counts.n_items != params.n_items() || counts.n_classes != params.n_classes() || counts.n_nodes != grid.len() {
        return Err(dimension("expected counts do not match the parameters or grid"));
    }
    Ok(())
}

/// Smooth surrogate `F(Δ₂)` at `params`, with counts taken at the linearisation point.
pub fn surrogate_value(counts: &ExpectedCounts, params: &ModelParams, grid: &QuadratureGrid) -> Result<f64> {
    check_counts(counts, params, grid)?;
    Ok(surrogate_unchecked(counts, params, grid))
}

pub(crate) fn surrogate_unchecked(counts: &ExpectedCounts, params: &ModelParams, grid: &QuadratureGrid) -> f64 {
    let c = params.n_classes();
    let q = grid.len();
    let cq = c * q;
    let mut total = 0.0;
    for item in 0..params.n_items() {
        let a = params.discriminations[item];
        let d = params.easiness[item];
        let correct = &counts.correct[item * cq..(item + 1) * cq];
        let mut item_total = 0.0;
        for k in 0..c {
            let shift = d + params.dif(item, k);
            let (mu, sd) = (params.class_means[k], params.class_sds[k]);
            for (node_idx, &x) in grid.nodes().iter().enumerate() {
                let idx = k * q + node_idx;
                let m = counts.mass[idx];
                if m == 0.0 {
                    continue;
                }
                let eta = a * (mu + sd * x) + shift;
                let r1 = correct[idx];
                // r1·log π + (m − r1)·log(1 − π) = r1·η − m·softplus(η)
                item_total += r1 * eta + m * log_sigmoid(-eta);
            }
        }
        total += item_total;
    }
    -total
}

/// Gradient of the smooth surrogate at `params` using the E-step's expected counts.
///
/// For `η_jkq = a_j θ_kq + d_j + δ_jk` with `θ_kq = μ_k + σ_k x_q`, each term
/// contributes `g_jkq = r_kq π_jkq − r1_jkq` times `∂η/∂(parameter)`: `1` for
/// `d_j` and `δ_jk`, `θ_kq` for `a_j`, `a_j` for `μ_k`, and `a_j x_q` for `σ_k`.
pub fn grad_smooth_part(
    data: &ResponseMatrix,
    resp: &Responsibilities,
    params: &ModelParams,
    grid: &QuadratureGrid,
) -> Result<SmoothGradient> {
    check_dims(data, params)?;
    if resp.class_post.nrows() != data.n_respondents() {
        return Err(dimension("responsibilities do not match the data"));
    }
    check_counts(&resp.counts, params, grid)?;
    Ok(gradient_from_counts(&resp.counts, params, grid))
}

pub(crate) fn gradient_from_counts(
    counts: &ExpectedCounts,
    params: &ModelParams,
    grid: &QuadratureGrid,
) -> SmoothGradient {
    let j = params.n_items();
    let c = params.n_classes();
    let k_extra = c - 1;
    let q = grid.len();
    let cq = c * q;
    let mut grad = SmoothGradient {
        discriminations: vec![0.0; j],
        easiness: vec![0.0; j],
        dif_effects: Array2::zeros((j, k_extra)),
        class_means: vec![0.0; k_extra],
        class_sds: vec![0.0; k_extra],
    };
    for item in 0..j {
        let a = params.discriminations[item];
        let d = params.easiness[item];
        let correct = &counts.correct[item * cq..(item + 1) * cq];
        let (mut g_a, mut g_d) = (0.0, 0.0);
        for k in 0..c {
            let shift = d + params.dif(item, k);
            let (mu, sd) = (params.class_means[k], params.class_sds[k]);
            let (mut g_class, mut g_class_x) = (0.0, 0.0);
            for (node_idx, &x) in grid.nodes().iter().enumerate() {
                let idx = k * q + node_idx;
                let theta = mu + sd * x;
                let g = counts.mass[idx] * sigmoid(a * theta + shift) - correct[idx];
                g_a += g * theta;
                g_class += g;
                g_class_x += g * x;
            }
            g_d += g_class;
            if k > 0 {
                grad.dif_effects[[item, k - 1]] = g_class;
                grad.class_means[k - 1] += a * g_class;
                grad.class_sds[k - 1] += a * g_class_x;
            }
        }
        grad.discriminations[item] = g_a;
        grad.easiness[item] = g_d;
    }
    grad
}
