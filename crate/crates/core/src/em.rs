//! Proximal-gradient EM for the L1-penalised and the pattern-constrained fits.
//!
//! Each iteration runs an E-step at the current parameters, sets the class
//! proportions to their closed-form maximiser, and takes proximal-gradient
//! steps on the remaining parameters against the smooth surrogate plus the L1
//! penalty. Accepted steps never increase the penalised surrogate, so the
//! penalised marginal objective is non-increasing across iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::likelihood::{
    gradient_from_counts, posterior_pass, surrogate_unchecked, ExpectedCounts, Membership, Responsibilities,
    SmoothGradient,
};
use crate::model::{ModelParams, ResponseMatrix, SparsityPattern};
use crate::quadrature::QuadratureGrid;

/// Settings for the EM loop and its backtracking line search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once the penalised objective changes by less than this between iterations.
    pub objective_tolerance: f64,
    pub initial_step_size: f64,
    pub line_search_shrink: f64,
    /// Give up shrinking once a trial step changes the surrogate by less than this.
    pub line_search_tolerance: f64,
    pub line_search_max_iter: usize,
    pub n_random_starts: usize,
    pub seed: u64,
    /// Proximal-gradient updates per M-step. One update gives a generalised EM step.
    pub inner_steps: usize,
    /// Lower bound applied to non-reference trait SDs after each step.
    pub sigma_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            objective_tolerance: 1e-4,
            initial_step_size: 1.0,
            line_search_shrink: 0.5,
            line_search_tolerance: 1e-6,
            line_search_max_iter: 100,
            n_random_starts: 5,
            seed: 0,
            inner_steps: 1,
            sigma_floor: 0.01,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.objective_tolerance > 0.0) || !(self.line_search_tolerance > 0.0) {
            return Err(usage("tolerances must be positive"));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(usage("line_search_shrink must lie in (0, 1)"));
        }
        if !(self.initial_step_size > 0.0) || !self.initial_step_size.is_finite() {
            return Err(usage("initial_step_size must be positive"));
        }
        if self.max_iterations == 0 || self.line_search_max_iter == 0 || self.inner_steps == 0 {
            return Err(usage("iteration caps must be at least 1"));
        }
        if self.n_random_starts == 0 {
            return Err(usage("n_random_starts must be at least 1"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(usage("sigma_floor must be positive"));
        }
        Ok(())
    }
}

/// Outcome of one EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    /// Penalised objective at the start of each iteration, plus the final value.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub n_iterations: usize,
    /// Log-likelihood of `params` (the known-class likelihood for oracle fits).
    pub final_loglik: f64,
    pub lambda: f64,
    /// Set when the line search could not find a non-increasing step.
    pub stagnated: bool,
}

impl FitResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace always holds the initial objective")
    }
}

/// Result of a single M-step.
#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub params: ModelParams,
    /// Step size of the last accepted proximal update; `0` when none was accepted.
    pub step_size: f64,
    pub stagnated: bool,
}

/// Elementwise `sign(x) · max(|x| − threshold, 0)`.
pub fn soft_threshold(x: &[f64], threshold: f64) -> Result<Vec<f64>> {
    if !(threshold >= 0.0) {
        return Err(usage(format!("threshold must be nonnegative, got {threshold}")));
    }
    Ok(x.iter().map(|&v| soft_threshold_scalar(v, threshold)).collect())
}

#[inline]
pub(crate) fn soft_threshold_scalar(x: f64, threshold: f64) -> f64 {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Closed-form class proportions: column means of the class posteriors.
pub fn update_class_proportions(resp: &Responsibilities) -> Vec<f64> {
    let n = resp.class_post.nrows() as f64;
    let mut nu: Vec<f64> = resp.class_post.columns().into_iter().map(|col| col.sum() / n).collect();
    let total: f64 = nu.iter().sum();
    for v in &mut nu {
        *v /= total;
    }
    nu
}

/// Penalty, free DIF entries and membership handling for one fit.
#[derive(Debug, Clone)]
pub(crate) struct Problem<'a> {
    pub lambda: f64,
    pub free: SparsityPattern,
    pub membership: Membership<'a>,
}

fn penalised_surrogate(counts: &ExpectedCounts, params: &ModelParams, grid: &QuadratureGrid, lambda: f64) -> f64 {
    surrogate_unchecked(counts, params, grid) + lambda * params.l1_dif_norm()
}

fn proximal_candidate(
    params: &ModelParams,
    grad: &SmoothGradient,
    step: f64,
    problem: &Problem<'_>,
    sigma_floor: f64,
) -> ModelParams {
    let mut next = params.clone();
    for (v, g) in next.discriminations.iter_mut().zip(&grad.discriminations) {
        *v -= step * g;
    }
    for (v, g) in next.easiness.iter_mut().zip(&grad.easiness) {
        *v -= step * g;
    }
    let threshold = step * problem.lambda;
    for item in 0..params.n_items() {
        for k in 1..params.n_classes() {
            next.dif_effects[[item, k]] = if problem.free.is_free(item, k) {
                soft_threshold_scalar(params.dif(item, k) - step * grad.dif_effects[[item, k - 1]], threshold)
            } else {
                0.0
            };
        }
    }
    for k in 1..params.n_classes() {
        next.class_means[k] -= step * grad.class_means[k - 1];
        next.class_sds[k] = (params.class_sds[k] - step * grad.class_sds[k - 1]).max(sigma_floor);
    }
    next
}

/// One M-step: closed-form proportions, then `config.inner_steps` proximal-gradient updates.
pub(crate) fn m_step_inner(
    resp: &Responsibilities,
    params: &ModelParams,
    grid: &QuadratureGrid,
    problem: &Problem<'_>,
    config: &EmConfig,
) -> MStepOutcome {
    let mut current = params.clone();
    if let Membership::Latent = problem.membership {
        current.class_proportions = update_class_proportions(resp);
    }
    let counts = &resp.counts;
    let mut current_value = penalised_surrogate(counts, &current, grid, problem.lambda);
    let mut last_step = 0.0;
    let mut any_accepted = false;

    for _ in 0..config.inner_steps {
        let grad = gradient_from_counts(counts, &current, grid);
        let mut step = config.initial_step_size;
        let mut accepted = None;
        for _ in 0..config.line_search_max_iter {
            let candidate = proximal_candidate(&current, &grad, step, problem, config.sigma_floor);
            let value = penalised_surrogate(counts, &candidate, grid, problem.lambda);
            if value.is_finite() && value <= current_value {
                accepted = Some((candidate, value));
                break;
            }
            if value.is_finite() && (value - current_value).abs() < config.line_search_tolerance {
                break;
            }
            step *= config.line_search_shrink;
        }
        match accepted {
            Some((candidate, value)) => {
                let decrease = current_value - value;
                current = candidate;
                current_value = value;
                last_step = step;
                any_accepted = true;
                if decrease < config.line_search_tolerance {
                    break;
                }
            }
            None => break,
        }
    }

    if !any_accepted {
        // The proportion update alone never increases the objective; keep it.
        return MStepOutcome { params: current, step_size: 0.0, stagnated: true };
    }
    MStepOutcome { params: current, step_size: last_step, stagnated: false }
}

/// One proximal-gradient M-step for the penalised problem with every DIF entry free.
pub fn m_step_proximal(
    data: &ResponseMatrix,
    resp: &Responsibilities,
    params: &ModelParams,
    grid: &QuadratureGrid,
    lambda: f64,
    config: &EmConfig,
) -> Result<MStepOutcome> {
    if !(lambda >= 0.0) {
        return Err(usage("lambda must be nonnegative"));
    }
    config.validate()?;
    if resp.class_post.nrows() != data.n_respondents() || resp.counts.n_classes() != params.n_classes() {
        return Err(crate::error::dimension("responsibilities do not match data and parameters"));
    }
    let problem = Problem {
        lambda,
        free: SparsityPattern::all_free(params.n_items(), params.n_extra_classes()),
        membership: Membership::Latent,
    };
    Ok(m_step_inner(resp, params, grid, &problem, config))
}

/// Runs EM from a single starting point.
pub(crate) fn run_em(
    data: &ResponseMatrix,
    grid: &QuadratureGrid,
    problem: &Problem<'_>,
    config: &EmConfig,
    init: ModelParams,
) -> Result<FitResult> {
    let mut params = init;
    params.apply_pattern(&problem.free);
    params.ensure_valid()?;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut stagnated = false;
    let loglik = loop {
        let resp = posterior_pass(data, &params, grid, problem.membership, false);
        let objective = -resp.loglik + problem.lambda * params.l1_dif_norm();
        if !objective.is_finite() {
            return Err(Error::NonFinite(format!("objective became {objective} at iteration {iterations}")));
        }
        trace.push(objective);
        let change = match trace.len() {
            0 | 1 => f64::INFINITY,
            n => (trace[n - 2] - trace[n - 1]).abs(),
        };
        if change < config.objective_tolerance {
            converged = true;
            break resp.loglik;
        }
        if iterations == config.max_iterations {
            break resp.loglik;
        }
        let step = m_step_inner(&resp, &params, grid, problem, config);
        iterations += 1;
        if step.stagnated {
            // Nothing moved except possibly ν; report against the last measured change.
            stagnated = true;
            if step.params != params {
                params = step.params;
                let resp = posterior_pass(data, &params, grid, problem.membership, false);
                trace.push(-resp.loglik + problem.lambda * params.l1_dif_norm());
                let n = trace.len();
                converged = (trace[n - 2] - trace[n - 1]).abs() < config.objective_tolerance;
                break resp.loglik;
            }
            converged = change < config.objective_tolerance;
            break resp.loglik;
        }
        params = step.params;
    };
    Ok(FitResult {
        params,
        objective_trace: trace,
        converged,
        n_iterations: iterations,
        final_loglik: loglik,
        lambda: problem.lambda,
        stagnated,
    })
}

/// Deterministic random starting values.
///
/// Easiness starts at the logit of each item's proportion correct (clamped to
/// ±3), discriminations are uniform on (0.5, 1.5), DIF effects start at zero,
/// proportions are uniform, class means are spread over [-1, 1] with jitter and
/// class SDs start at one.
pub fn initial_params(data: &ResponseMatrix, n_extra_classes: usize, seed: u64, start: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start);
    let j = data.n_items();
    let mut p = ModelParams::neutral(j, n_extra_classes);
    for (d, mean) in p.easiness.iter_mut().zip(data.item_means()) {
        let m = mean.clamp(1e-6, 1.0 - 1e-6);
        *d = (m / (1.0 - m)).ln().clamp(-3.0, 3.0);
    }
    for a in &mut p.discriminations {
        *a = rng.random_range(0.5..1.5);
    }
    for k in 1..=n_extra_classes {
        let spread =
            if n_extra_classes == 1 { 0.0 } else { -1.0 + 2.0 * (k - 1) as f64 / (n_extra_classes - 1) as f64 };
        p.class_means[k] = spread + rng.random_range(-0.5..0.5);
    }
    p
}

fn check_init(init: &ModelParams, data: &ResponseMatrix, n_extra_classes: usize) -> Result<()> {
    if init.n_items() != data.n_items() || init.n_extra_classes() != n_extra_classes {
        return Err(crate::error::dimension(format!(
            "initial values have J = {}, K = {}; expected J = {}, K = {}",
            init.n_items(),
            init.n_extra_classes(),
            data.n_items(),
            n_extra_classes
        )));
    }
    Ok(())
}

/// Fits with the given problem; multiple random starts when no `init` is given.
pub(crate) fn fit_problem(
    data: &ResponseMatrix,
    n_extra_classes: usize,
    grid: &QuadratureGrid,
    problem: &Problem<'_>,
    config: &EmConfig,
    init: Option<&ModelParams>,
) -> Result<FitResult> {
    config.validate()?;
    if !(problem.lambda >= 0.0) {
        return Err(usage(format!("lambda must be nonnegative, got {}", problem.lambda)));
    }
    if problem.free.n_items() != data.n_items() || problem.free.n_extra_classes() != n_extra_classes {
        return Err(crate::error::dimension("sparsity pattern does not match J and K"));
    }
    if let Some(init) = init {
        check_init(init, data, n_extra_classes)?;
        return run_em(data, grid, problem, config, init.clone());
    }

    let starts = config.n_random_starts as u64;
    let known_props = match problem.membership {
        Membership::Known(labels) => {
            let mut props = vec![0.0; n_extra_classes + 1];
            for &l in labels {
                if l > n_extra_classes {
                    return Err(usage(format!("label {l} out of range")));
                }
                props[l] += 1.0 / labels.len() as f64;
            }
            let total: f64 = props.iter().sum();
            Some(props.into_iter().map(|p| p / total).collect::<Vec<_>>())
        }
        Membership::Latent => None,
    };
    let results: Vec<Result<FitResult>> = (0..starts)
        .into_par_iter()
        .map(|s| {
            let mut init = initial_params(data, n_extra_classes, config.seed, s);
            if let Some(props) = &known_props {
                init.class_proportions = props.clone();
            }
            run_em(data, grid, problem, config, init)
        })
        .collect();
    best_of(results)
}

/// Lowest final objective wins; ties go to the earliest start.
fn best_of(results: Vec<Result<FitResult>>) -> Result<FitResult> {
    let n = results.len();
    let mut best: Option<FitResult> = None;
    let mut last_err = String::new();
    for r in results {
        match r {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.final_objective() < b.final_objective()) {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    best.ok_or(Error::AllStartsFailed { starts: n, last: last_err })
}

/// L1-penalised fit with `n_extra_classes` non-reference classes.
pub fn fit_penalized(
    data: &ResponseMatrix,
    n_extra_classes: usize,
    lambda: f64,
    grid: &QuadratureGrid,
    config: &EmConfig,
    init: Option<&ModelParams>,
) -> Result<FitResult> {
    let problem = Problem {
        lambda,
        free: SparsityPattern::all_free(data.n_items(), n_extra_classes),
        membership: Membership::Latent,
    };
    fit_problem(data, n_extra_classes, grid, &problem, config, init)
}

/// Unpenalised fit with DIF entries outside `pattern` fixed at zero.
pub fn fit_constrained(
    data: &ResponseMatrix,
    n_extra_classes: usize,
    pattern: &SparsityPattern,
    grid: &QuadratureGrid,
    config: &EmConfig,
    init: Option<&ModelParams>,
) -> Result<FitResult> {
    let problem = Problem { lambda: 0.0, free: pattern.clone(), membership: Membership::Latent };
    fit_problem(data, n_extra_classes, grid, &problem, config, init)
}
