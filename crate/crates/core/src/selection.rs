//! Regularisation path with BIC refits, choice of `K`, DIF flags and MAP classification.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit_problem, EmConfig, FitResult, Problem};
use crate::error::{usage, Error, Result};
use crate::likelihood::{gradient_from_counts, posterior_pass, Membership};
use crate::model::{count_free_params, ModelParams, ResponseMatrix, SparsityPattern};
use crate::quadrature::QuadratureGrid;

/// Penalty grid settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    /// Explicit ascending grid. `None` builds a log-spaced grid from `lambda_min`
    /// up to the smallest doubling that shrinks every DIF effect to zero.
    pub lambdas: Option<Vec<f64>>,
    pub n_lambdas: usize,
    pub lambda_min: f64,
    pub warm_start: bool,
    /// Also run the warm-started path upwards from a multi-start fit at the
    /// smallest penalty; each grid point keeps the candidate whose refit has the
    /// lower BIC.
    pub two_sided: bool,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { lambdas: None, n_lambdas: 20, lambda_min: 0.5, warm_start: true, two_sided: true }
    }
}

impl PathConfig {
    pub fn with_lambdas(lambdas: Vec<f64>) -> Self {
        Self { lambdas: Some(lambdas), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.lambdas {
            Some(l) => {
                if l.len() < 2 {
                    return Err(usage("the lambda grid needs at least two values"));
                }
                if l.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(usage("lambda values must be positive and finite"));
                }
                if l.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(usage("lambda values must be strictly increasing"));
                }
            }
            None => {
                if self.n_lambdas < 2 {
                    return Err(usage("n_lambdas must be at least 2"));
                }
                if !(self.lambda_min > 0.0) || !self.lambda_min.is_finite() {
                    return Err(usage("lambda_min must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// One grid point of the path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub lambda: f64,
    pub penalized: Option<FitResult>,
    pub pattern: Option<SparsityPattern>,
    pub refit: Option<FitResult>,
    pub bic: Option<f64>,
    pub n_free_params: Option<usize>,
    pub error: Option<String>,
}

impl PathRecord {
    fn failed(lambda: f64, err: &Error) -> Self {
        Self {
            lambda,
            penalized: None,
            pattern: None,
            refit: None,
            bic: None,
            n_free_params: None,
            error: Some(err.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.bic.is_some()
    }

    pub fn n_nonzero(&self) -> Option<usize> {
        self.pattern.as_ref().map(SparsityPattern::nnz)
    }
}

/// Records in ascending `λ` order together with the BIC choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub n_extra_classes: usize,
    pub n_respondents: usize,
    pub records: Vec<PathRecord>,
    pub selected_index: usize,
    pub selected_lambda: f64,
}

impl PathReport {
    pub fn selected(&self) -> &PathRecord {
        &self.records[self.selected_index]
    }

    pub fn selected_params(&self) -> &ModelParams {
        &self.selected().refit.as_ref().expect("selected record always has a refit").params
    }

    pub fn selected_bic(&self) -> f64 {
        self.selected().bic.expect("selected record always has a BIC")
    }

    /// Rows of `(lambda, bic, n_nonzero, loglik)` for plotting; failed points are skipped.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,bic,n_nonzero,loglik\n");
        for r in self.records.iter().filter(|r| r.is_ok()) {
            let refit = r.refit.as_ref().expect("ok records have a refit");
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.lambda,
                r.bic.expect("ok records have a BIC"),
                r.n_nonzero().unwrap_or(0),
                refit.final_loglik
            ));
        }
        out
    }
}

/// `-2 log L + log(N) · free parameters`.
pub fn bic(loglik: f64, n_respondents: usize, n_free_params: usize) -> f64 {
    -2.0 * loglik + (n_respondents as f64).ln() * n_free_params as f64
}

/// Index minimising `bic`; ties go to the larger λ (later entry in ascending order).
fn argmin_bic(records: &[PathRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        if let Some(b) = r.bic {
            if best.is_none_or(|(_, v)| b <= v) {
                best = Some((i, b));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    let mut out: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    out[0] = lo;
    out[n - 1] = hi;
    out
}

struct PathRunner<'a> {
    data: &'a ResponseMatrix,
    k: usize,
    grid: &'a QuadratureGrid,
    config: &'a EmConfig,
    membership: Membership<'a>,
}

impl PathRunner<'_> {
    fn fit(&self, lambda: f64, free: SparsityPattern, init: Option<&ModelParams>) -> Result<FitResult> {
        let problem = Problem { lambda, free, membership: self.membership };
        fit_problem(self.data, self.k, self.grid, &problem, self.config, init)
    }

    fn penalized(&self, lambda: f64, init: Option<&ModelParams>) -> Result<FitResult> {
        self.fit(lambda, SparsityPattern::all_free(self.data.n_items(), self.k), init)
    }

    fn free_params(&self, params: &ModelParams, pattern: &SparsityPattern) -> Result<usize> {
        let count = count_free_params(params, pattern)?;
        Ok(match self.membership {
            // Class proportions are not estimated when membership is observed.
            Membership::Known(_) => count - self.k,
            Membership::Latent => count,
        })
    }

    /// Grid from `lambda_min` up to a penalty at which the penalised fit has no
    /// DIF both when started from the DIF-free mixture and when tracked upwards
    /// by doubling from the dense multi-start fit. Returns the grid with the fits
    /// at its two ends.
    fn auto_grid(&self, path: &PathConfig) -> Result<(Vec<f64>, FitResult, Option<FitResult>)> {
        const MAX_DOUBLINGS: usize = 40;
        let j = self.data.n_items();
        let empty = |f: &FitResult| SparsityPattern::from_params(&f.params).nnz() == 0;
        let base = self.fit(0.0, SparsityPattern::none_free(j, self.k), None)?;
        let resp = posterior_pass(self.data, &base.params, self.grid, self.membership, false);
        let grad = gradient_from_counts(&resp.counts, &base.params, self.grid);
        let max_grad = grad.dif_effects.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut lambda = (1.05 * max_grad).max(2.0 * path.lambda_min);
        let mut top = None;
        for _ in 0..MAX_DOUBLINGS {
            let fit = self.penalized(lambda, Some(&base.params))?;
            if empty(&fit) {
                top = Some(fit);
                break;
            }
            lambda *= 2.0;
        }
        let mut top =
            top.ok_or_else(|| Error::Invariant("could not find a penalty that removes every DIF effect".into()))?;

        let mut dense = None;
        if path.two_sided {
            let bottom = self.penalized(path.lambda_min, None)?;
            let mut tracked = bottom.clone();
            let mut up = path.lambda_min;
            for _ in 0..MAX_DOUBLINGS {
                if empty(&tracked) {
                    break;
                }
                up *= 2.0;
                tracked = self.penalized(up, Some(&tracked.params))?;
            }
            if up > lambda {
                lambda = up;
                top = self.penalized(lambda, Some(&base.params))?;
                if tracked.final_objective() < top.final_objective() {
                    top = tracked;
                }
            }
            dense = Some(bottom);
        }
        let lo = if lambda > path.lambda_min { path.lambda_min } else { lambda / 100.0 };
        let dense = dense.filter(|_| lo == path.lambda_min);
        Ok((log_spaced(lo, lambda, path.n_lambdas), top, dense))
    }

    /// Warm-started fits over `order`, seeded with `seed` at the first position.
    fn warm_branch(
        &self,
        lambdas: &[f64],
        order: impl Iterator<Item = usize>,
        seed: Option<FitResult>,
    ) -> Vec<Option<Result<FitResult>>> {
        let mut out: Vec<Option<Result<FitResult>>> = vec![None; lambdas.len()];
        let mut seed = seed;
        let mut previous: Option<ModelParams> = None;
        for idx in order {
            let fit = match seed.take() {
                Some(fit) => Ok(fit),
                None => self.penalized(lambdas[idx], previous.as_ref()),
            };
            if let Ok(f) = &fit {
                previous = Some(f.params.clone());
            }
            out[idx] = Some(fit);
        }
        out
    }

    fn run(&self, path: &PathConfig) -> Result<PathReport> {
        path.validate()?;
        let (lambdas, top, bottom) = match &path.lambdas {
            Some(l) => (l.clone(), None, None),
            None if self.k == 0 => (vec![path.lambda_min, 2.0 * path.lambda_min], None, None),
            None => {
                let (l, top, bottom) = self.auto_grid(path)?;
                (l, Some(top), bottom)
            }
        };
        let m = lambdas.len();

        // Candidate penalised solutions per grid point; the problem is not convex,
        // so the two warm-started branches can end in different local solutions.
        let candidates: Vec<Vec<Result<FitResult>>> = if path.warm_start {
            let down = self.warm_branch(&lambdas, (0..m).rev(), top);
            let up =
                if path.two_sided && self.k > 0 { self.warm_branch(&lambdas, 0..m, bottom) } else { vec![None; m] };
            down.into_iter().zip(up).map(|(d, u)| d.into_iter().chain(u).collect()).collect()
        } else {
            lambdas.par_iter().map(|&lambda| vec![self.penalized(lambda, None)]).collect()
        };

        let mut refits: HashMap<SparsityPattern, Result<FitResult>> = HashMap::new();
        let mut records = Vec::with_capacity(m);
        // Refit from the sparsest end so that cached refits are reused along the path.
        for (&lambda, fits) in lambdas.iter().zip(candidates).rev() {
            let mut best: Option<PathRecord> = None;
            let mut last_err = None;
            for fit in fits {
                let fit = match fit {
                    Ok(f) => f,
                    Err(e) => {
                        last_err = Some(e);
                        continue;
                    }
                };
                let pattern = SparsityPattern::from_params(&fit.params);
                let refit = refits
                    .entry(pattern.clone())
                    .or_insert_with(|| {
                        let init = if path.warm_start { Some(&fit.params) } else { None };
                        self.fit(0.0, pattern.clone(), init)
                    })
                    .clone();
                let refit = match refit {
                    Ok(r) => r,
                    Err(e) => {
                        last_err = Some(e);
                        continue;
                    }
                };
                let n_free = self.free_params(&refit.params, &pattern)?;
                let value = bic(refit.final_loglik, self.data.n_respondents(), n_free);
                if best.as_ref().is_none_or(|b| b.bic.is_some_and(|v| value < v)) {
                    best = Some(PathRecord {
                        lambda,
                        penalized: Some(fit),
                        pattern: Some(pattern),
                        refit: Some(refit),
                        bic: Some(value),
                        n_free_params: Some(n_free),
                        error: None,
                    });
                }
            }
            records.push(match (best, last_err) {
                (Some(r), _) => r,
                (None, e) => {
                    PathRecord::failed(lambda, &e.unwrap_or_else(|| Error::Invariant("no candidate fit".into())))
                }
            });
        }
        records.reverse();

        let selected_index = argmin_bic(&records).ok_or_else(|| {
            let last = records.iter().rev().find_map(|r| r.error.clone()).unwrap_or_default();
            Error::AllStartsFailed { starts: records.len(), last }
        })?;
        Ok(PathReport {
            n_extra_classes: self.k,
            n_respondents: self.data.n_respondents(),
            selected_lambda: records[selected_index].lambda,
            selected_index,
            records,
        })
    }
}

/// Fits the penalised model along the grid, refits each sparsity pattern without
/// penalty and selects the grid point with the smallest BIC.
pub fn run_path(
    data: &ResponseMatrix,
    n_extra_classes: usize,
    path_config: &PathConfig,
    em_config: &EmConfig,
    grid: &QuadratureGrid,
) -> Result<PathReport> {
    em_config.validate()?;
    PathRunner { data, k: n_extra_classes, grid, config: em_config, membership: Membership::Latent }.run(path_config)
}

/// Path with class membership fixed at `labels` (the class proportions are not estimated).
pub fn run_path_known_classes(
    data: &ResponseMatrix,
    labels: &[usize],
    n_extra_classes: usize,
    path_config: &PathConfig,
    em_config: &EmConfig,
    grid: &QuadratureGrid,
) -> Result<PathReport> {
    em_config.validate()?;
    if labels.len() != data.n_respondents() {
        return Err(crate::error::dimension("one label per respondent is required"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > n_extra_classes) {
        return Err(usage(format!("label {bad} exceeds K = {n_extra_classes}")));
    }
    PathRunner { data, k: n_extra_classes, grid, config: em_config, membership: Membership::Known(labels) }
        .run(path_config)
}

/// Items with a nonzero DIF effect in any non-reference class of the selected refit.
pub fn flag_dif_items(report: &PathReport) -> Vec<usize> {
    flagged_in(report.selected_params())
}

pub(crate) fn flagged_in(params: &ModelParams) -> Vec<usize> {
    SparsityPattern::from_params(params).flagged_items()
}

/// Posterior class probabilities with the MAP label of each respondent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub map_labels: Vec<usize>,
    pub posteriors: Array2<f64>,
}

impl ClassificationResult {
    pub fn to_csv(&self) -> String {
        let c = self.posteriors.ncols();
        let mut out = String::from("respondent,map_class");
        for k in 0..c {
            out.push_str(&format!(",post_{k}"));
        }
        out.push('\n');
        for (i, (label, row)) in self.map_labels.iter().zip(self.posteriors.rows()).enumerate() {
            out.push_str(&format!("{},{}", i + 1, label));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// First index of the row maximum.
fn argmax_first(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// MAP classification under `params`.
pub fn classify_map(
    data: &ResponseMatrix,
    params: &ModelParams,
    grid: &QuadratureGrid,
) -> Result<ClassificationResult> {
    let resp = crate::likelihood::e_step_with(data, params, grid, Membership::Latent, false)?;
    let map_labels = resp.class_post.rows().into_iter().map(|r| argmax_first(r.iter().copied())).collect();
    Ok(ClassificationResult { map_labels, posteriors: resp.class_post })
}

/// Path reports and best BIC for each candidate `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub best_k: usize,
    pub bic_by_k: BTreeMap<usize, f64>,
    pub reports: BTreeMap<usize, PathReport>,
}

/// Runs the path for each candidate `K` and keeps the `K` with the smallest
/// selected BIC. Ties go to the smaller `K`.
pub fn select_num_classes(
    data: &ResponseMatrix,
    candidates: &[usize],
    path_config: &PathConfig,
    em_config: &EmConfig,
    grid: &QuadratureGrid,
) -> Result<ClassSelection> {
    if candidates.is_empty() {
        return Err(usage("at least one candidate K is required"));
    }
    let mut ks = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let reports: Vec<Result<PathReport>> =
        ks.par_iter().map(|&k| run_path(data, k, path_config, em_config, grid)).collect();
    let mut bic_by_k = BTreeMap::new();
    let mut by_k = BTreeMap::new();
    for (&k, report) in ks.iter().zip(reports) {
        let report = report?;
        bic_by_k.insert(k, report.selected_bic());
        by_k.insert(k, report);
    }
    let best_k = *bic_by_k
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))
        .map(|(k, _)| k)
        .expect("at least one candidate");
    Ok(ClassSelection { best_k, bic_by_k, reports: by_k })
}
