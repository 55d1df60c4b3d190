//! Synthetic data, the known-membership oracle, label resolution and evaluation metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::EmConfig;
use crate::error::{dimension, usage, Result};
use crate::model::{ModelParams, ResponseMatrix, SparsityPattern};
use crate::quadrature::QuadratureGrid;
use crate::selection::{classify_map, run_path, run_path_known_classes, ClassificationResult, PathConfig, PathReport};

/// Closed interval `[low, high]` for uniform draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.low == self.high {
            self.low
        } else {
            rng.random_range(self.low..self.high)
        }
    }
}

/// Normal trait law given by mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraitLaw {
    pub mean: f64,
    pub variance: f64,
}

impl TraitLaw {
    pub const fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemParamRanges {
    pub d: Range,
    pub a: Range,
}

impl Default for ItemParamRanges {
    fn default() -> Self {
        Self { d: Range::new(-2.0, 2.0), a: Range::new(0.5, 1.5) }
    }
}

/// Data-generating design. Item positions are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub n_respondents: usize,
    pub n_items: usize,
    pub class_proportions: Vec<f64>,
    pub dif_item_positions: Vec<usize>,
    /// One range per non-reference class.
    pub dif_effect_ranges: Vec<Range>,
    /// One law per class; the reference law must be `N(0, 1)`.
    pub trait_laws: Vec<TraitLaw>,
    #[serde(default)]
    pub item_param_ranges: ItemParamRanges,
    pub n_replications: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationDesign {
    /// Two classes with a focal share of `focal_share`; DIF on the first 10 (J = 25)
    /// or 20 (otherwise) items with effects from U(0.5, 1.5).
    pub fn two_group(n_items: usize, n_respondents: usize, focal_share: f64) -> Self {
        let n_dif = if n_items <= 25 { 10.min(n_items) } else { 20.min(n_items) };
        Self {
            n_respondents,
            n_items,
            class_proportions: vec![1.0 - focal_share, focal_share],
            dif_item_positions: (0..n_dif).collect(),
            dif_effect_ranges: vec![Range::new(0.5, 1.5)],
            trait_laws: vec![TraitLaw::new(0.0, 1.0), TraitLaw::new(0.5, 1.5)],
            item_param_ranges: ItemParamRanges::default(),
            n_replications: 100,
            seed: 0,
        }
    }

    /// Three classes with proportions (0.5, 0.3, 0.2); DIF on the last 10 (J = 25)
    /// or 20 (otherwise) items, U(0.5, 1) for class 1 and U(1, 1.5) for class 2.
    pub fn three_group(n_items: usize, n_respondents: usize) -> Self {
        let n_dif = if n_items <= 25 { 10.min(n_items) } else { 20.min(n_items) };
        Self {
            n_respondents,
            n_items,
            class_proportions: vec![0.5, 0.3, 0.2],
            dif_item_positions: (n_items - n_dif..n_items).collect(),
            dif_effect_ranges: vec![Range::new(0.5, 1.0), Range::new(1.0, 1.5)],
            trait_laws: vec![TraitLaw::new(0.0, 1.0), TraitLaw::new(0.5, 1.5), TraitLaw::new(1.0, 1.2)],
            item_param_ranges: ItemParamRanges::default(),
            n_replications: 100,
            seed: 0,
        }
    }

    /// Speeded-test analog: 26 items, the last 7 harder for a 26% focal class.
    pub fn speeded(n_respondents: usize) -> Self {
        Self {
            n_respondents,
            n_items: 26,
            class_proportions: vec![0.74, 0.26],
            dif_item_positions: (19..26).collect(),
            dif_effect_ranges: vec![Range::new(-1.8, -0.6)],
            trait_laws: vec![TraitLaw::new(0.0, 1.0), TraitLaw::new(0.0, 1.0)],
            item_param_ranges: ItemParamRanges::default(),
            n_replications: 10,
            seed: 0,
        }
    }

    pub fn n_extra_classes(&self) -> usize {
        self.class_proportions.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_proportions.len();
        if c == 0 || self.n_items == 0 || self.n_respondents == 0 {
            return Err(usage("design needs at least one class, item and respondent"));
        }
        if self.class_proportions.iter().any(|&p| !(p >= 0.0)) {
            return Err(usage("class proportions must be nonnegative"));
        }
        let total: f64 = self.class_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(usage(format!("class proportions sum to {total}, not 1")));
        }
        if self.trait_laws.len() != c || self.dif_effect_ranges.len() != c - 1 {
            return Err(usage("need one trait law per class and one DIF range per non-reference class"));
        }
        if self.trait_laws[0] != TraitLaw::new(0.0, 1.0) {
            return Err(usage("the reference trait law must be N(0, 1)"));
        }
        if self.trait_laws.iter().any(|l| !(l.variance > 0.0) || !l.mean.is_finite() || !l.variance.is_finite()) {
            return Err(usage("trait variances must be positive and finite"));
        }
        let ranges = self.dif_effect_ranges.iter().chain([&self.item_param_ranges.d, &self.item_param_ranges.a]);
        for r in ranges {
            if !(r.low <= r.high) || !r.low.is_finite() || !r.high.is_finite() {
                return Err(usage(format!("invalid range [{}, {}]", r.low, r.high)));
            }
        }
        let mut seen = vec![false; self.n_items];
        for &p in &self.dif_item_positions {
            if p >= self.n_items {
                return Err(usage(format!("DIF position {p} outside [0, {})", self.n_items)));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(usage(format!("DIF position {p} repeated")));
            }
        }
        if self.n_replications == 0 {
            return Err(usage("n_replications must be positive"));
        }
        Ok(())
    }
}

/// One simulated data set with everything that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthBundle {
    pub true_params: ModelParams,
    pub true_labels: Vec<usize>,
    pub true_thetas: Vec<f64>,
    pub data: ResponseMatrix,
}

/// Draws replication `replication` of `design` from its own ChaCha8 stream.
pub fn generate(design: &SimulationDesign, replication: u64) -> Result<TruthBundle> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    rng.set_stream(replication);
    let (n, j, k) = (design.n_respondents, design.n_items, design.n_extra_classes());

    let mut params = ModelParams::neutral(j, k);
    for d in &mut params.easiness {
        *d = design.item_param_ranges.d.sample(&mut rng);
    }
    for a in &mut params.discriminations {
        *a = design.item_param_ranges.a.sample(&mut rng);
    }
    for class in 1..=k {
        for &item in &design.dif_item_positions {
            params.dif_effects[[item, class]] = design.dif_effect_ranges[class - 1].sample(&mut rng);
        }
    }
    params.class_proportions = design.class_proportions.clone();
    for (class, law) in design.trait_laws.iter().enumerate() {
        params.class_means[class] = law.mean;
        params.class_sds[class] = law.variance.sqrt();
    }

    let mut labels = Vec::with_capacity(n);
    let mut thetas = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = k;
        for (class, &p) in design.class_proportions.iter().enumerate() {
            acc += p;
            if u < acc {
                label = class;
                break;
            }
        }
        let law = Normal::new(params.class_means[label], params.class_sds[label])
            .map_err(|e| usage(format!("trait law: {e}")))?;
        labels.push(label);
        thetas.push(law.sample(&mut rng));
    }
    let mut entries = Vec::with_capacity(n * j);
    for (&label, &theta) in labels.iter().zip(&thetas) {
        for item in 0..j {
            let p = crate::math::sigmoid(params.logit(theta, item, label));
            entries.push(u8::from(rng.random::<f64>() < p));
        }
    }
    Ok(TruthBundle {
        true_params: params,
        true_labels: labels,
        true_thetas: thetas,
        data: ResponseMatrix::new(n, j, entries)?,
    })
}

/// Known-membership fit: the penalised path with class labels fixed at the truth.
pub fn fit_oracle(
    bundle: &TruthBundle,
    grid: &QuadratureGrid,
    em_config: &EmConfig,
    path_config: &PathConfig,
) -> Result<PathReport> {
    let k = bundle.true_params.n_extra_classes();
    run_path_known_classes(&bundle.data, &bundle.true_labels, k, path_config, em_config, grid)
}

/// How estimated classes are matched to the generating classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Classes are matched by the rank of their proportions.
    NuOrdering,
    /// Minimum squared distance between (μ, ν) after reparametrising to each candidate reference.
    MeanAssignment,
    /// Minimum squared distance over every parameter after reparametrising.
    #[default]
    ParameterMatch,
}

/// `order[new] = old`: estimated class `order[new]` plays true class `new`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relabeling {
    pub order: Vec<usize>,
}

impl Relabeling {
    pub fn identity(n_classes: usize) -> Self {
        Self { order: (0..n_classes).collect() }
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &o)| i == o)
    }

    fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (new, &old) in self.order.iter().enumerate() {
            inv[old] = new;
        }
        inv
    }

    /// The same model expressed in the relabelled classes. A change of reference
    /// class reparametrises the trait scale; the likelihood is unchanged.
    pub fn apply_params(&self, params: &ModelParams) -> Result<ModelParams> {
        if self.order.len() != params.n_classes() {
            return Err(dimension("relabeling and parameters disagree on the number of classes"));
        }
        let reference = self.order[0];
        let rebased = if reference == 0 { params.clone() } else { params.with_reference(reference)? };
        // with_reference lists the remaining classes in their original order.
        let remaining: Vec<usize> = (0..params.n_classes()).filter(|&c| c != reference).collect();
        let slots: Vec<usize> = self.order[1..]
            .iter()
            .map(|old| remaining.iter().position(|r| r == old).expect("order is a permutation") + 1)
            .collect();
        if slots.is_empty() {
            return Ok(rebased);
        }
        rebased.permute_extra_classes(&slots)
    }

    pub fn apply_labels(&self, labels: &[usize]) -> Vec<usize> {
        let inv = self.inverse();
        labels.iter().map(|&l| inv[l]).collect()
    }

    pub fn apply_classification(&self, c: &ClassificationResult) -> ClassificationResult {
        let mut posteriors = c.posteriors.clone();
        for (new, &old) in self.order.iter().enumerate() {
            posteriors.column_mut(new).assign(&c.posteriors.column(old));
        }
        ClassificationResult { map_labels: self.apply_labels(&c.map_labels), posteriors }
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum()
}

fn relabel_cost(candidate: &ModelParams, truth: &ModelParams, rule: LabelRule) -> f64 {
    let structural = sq_dist(&candidate.class_means, &truth.class_means)
        + sq_dist(&candidate.class_proportions, &truth.class_proportions);
    match rule {
        LabelRule::MeanAssignment => structural,
        _ => {
            structural
                + sq_dist(&candidate.class_sds, &truth.class_sds)
                + sq_dist(&candidate.discriminations, &truth.discriminations)
                + sq_dist(&candidate.easiness, &truth.easiness)
                + sq_dist(candidate.dif_effects.as_slice().unwrap_or(&[]), truth.dif_effects.as_slice().unwrap_or(&[]))
        }
    }
}

fn rank_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

/// Matches estimated classes to the generating ones.
pub fn resolve_labels(est: &ModelParams, truth: &ModelParams, rule: LabelRule) -> Result<Relabeling> {
    if est.n_classes() != truth.n_classes() || est.n_items() != truth.n_items() {
        return Err(dimension("estimate and truth differ in J or K"));
    }
    let c = est.n_classes();
    if c == 1 {
        return Ok(Relabeling::identity(1));
    }
    if rule == LabelRule::NuOrdering {
        let est_rank = rank_order(&est.class_proportions);
        let true_rank = rank_order(&truth.class_proportions);
        let mut order = vec![0; c];
        for (e, t) in est_rank.into_iter().zip(true_rank) {
            order[t] = e;
        }
        return Ok(Relabeling { order });
    }
    let mut best: Option<(f64, Relabeling)> = None;
    for order in permutations(c) {
        let relabel = Relabeling { order };
        let candidate = relabel.apply_params(est)?;
        let cost = relabel_cost(&candidate, truth, rule);
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, relabel));
        }
    }
    Ok(best.expect("at least one permutation").1)
}

/// Detection rates pooled over all non-reference classes, and per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRates {
    pub tpr: f64,
    pub fpr: f64,
    pub tpr_by_class: Vec<f64>,
    pub fpr_by_class: Vec<f64>,
}

/// True positives over true DIF entries and false positives over DIF-free entries.
/// A class without true DIF entries has an undefined (NaN) TPR; one without
/// DIF-free entries has FPR 0.
pub fn detection_rates(estimated: &SparsityPattern, truth: &ModelParams) -> Result<DetectionRates> {
    let (j, k) = (truth.n_items(), truth.n_extra_classes());
    if estimated.n_items() != j || estimated.n_extra_classes() != k {
        return Err(dimension("pattern does not match the true parameters"));
    }
    let mut per_class = Vec::with_capacity(k);
    let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for class in 1..=k {
        let (mut ctp, mut cpos, mut cfp, mut cneg) = (0usize, 0usize, 0usize, 0usize);
        for item in 0..j {
            let flagged = estimated.is_free(item, class);
            if truth.dif(item, class) != 0.0 {
                cpos += 1;
                ctp += usize::from(flagged);
            } else {
                cneg += 1;
                cfp += usize::from(flagged);
            }
        }
        per_class.push((ratio(ctp, cpos, f64::NAN), ratio(cfp, cneg, 0.0)));
        tp += ctp;
        pos += cpos;
        fp += cfp;
        neg += cneg;
    }
    Ok(DetectionRates {
        tpr: ratio(tp, pos, f64::NAN),
        fpr: ratio(fp, neg, 0.0),
        tpr_by_class: per_class.iter().map(|r| r.0).collect(),
        fpr_by_class: per_class.iter().map(|r| r.1).collect(),
    })
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Area under the ROC curve via the Mann–Whitney statistic; ties count one half.
/// NaN when either group is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return f64::NAN;
    }
    // Average ranks over tied blocks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut end = i + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[i]] {
            end += 1;
        }
        let avg_rank = (i + end + 1) as f64 / 2.0;
        rank_sum += avg_rank * idx[i..end].iter().filter(|&&m| positive[m]).count() as f64;
        i = end;
    }
    (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Signed errors of the relabelled estimate, one vector per parameter group.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamErrors {
    pub d: Vec<f64>,
    pub a: Vec<f64>,
    /// Every non-reference DIF entry.
    pub delta: Vec<f64>,
    /// Only entries with nonzero true DIF.
    pub delta_dif: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub pi: Vec<f64>,
}

impl ParamErrors {
    pub fn between(est: &ModelParams, truth: &ModelParams) -> Result<Self> {
        if est.n_classes() != truth.n_classes() || est.n_items() != truth.n_items() {
            return Err(dimension("estimate and truth differ in J or K"));
        }
        let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>();
        let mut errors = Self {
            d: diff(&est.easiness, &truth.easiness),
            a: diff(&est.discriminations, &truth.discriminations),
            mu: diff(&est.class_means[1..], &truth.class_means[1..]),
            sigma: diff(&est.class_sds[1..], &truth.class_sds[1..]),
            pi: diff(&est.class_proportions[1..], &truth.class_proportions[1..]),
            ..Self::default()
        };
        for item in 0..truth.n_items() {
            for class in 1..truth.n_classes() {
                let e = est.dif(item, class) - truth.dif(item, class);
                errors.delta.push(e);
                if truth.dif(item, class) != 0.0 {
                    errors.delta_dif.push(e);
                }
            }
        }
        Ok(errors)
    }

    fn groups(&self) -> [&[f64]; 7] {
        [&self.d, &self.a, &self.delta, &self.delta_dif, &self.mu, &self.sigma, &self.pi]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupError {
    pub abs_bias: f64,
    pub rmse: f64,
}

/// Average absolute bias and RMSE per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Recovery {
    pub d: GroupError,
    pub a: GroupError,
    pub delta: GroupError,
    pub delta_dif: GroupError,
    pub mu: GroupError,
    pub sigma: GroupError,
    pub pi: GroupError,
}

impl Recovery {
    /// Bias and RMSE of each entry across replications, then averaged over the
    /// entries of a group. Replications must share the group layout.
    pub fn aggregate(errors: &[&ParamErrors]) -> Self {
        let group = |pick: usize| -> GroupError {
            let columns: Vec<&[f64]> = errors.iter().map(|e| e.groups()[pick]).collect();
            let len = columns.iter().map(|c| c.len()).min().unwrap_or(0);
            if len == 0 {
                return GroupError { abs_bias: f64::NAN, rmse: f64::NAN };
            }
            let b = columns.len() as f64;
            let (mut bias_sum, mut rmse_sum) = (0.0, 0.0);
            for pos in 0..len {
                let mean = columns.iter().map(|c| c[pos]).sum::<f64>() / b;
                let ms = columns.iter().map(|c| c[pos] * c[pos]).sum::<f64>() / b;
                bias_sum += mean.abs();
                rmse_sum += ms.sqrt();
            }
            GroupError { abs_bias: bias_sum / len as f64, rmse: rmse_sum / len as f64 }
        };
        Self {
            d: group(0),
            a: group(1),
            delta: group(2),
            delta_dif: group(3),
            mu: group(4),
            sigma: group(5),
            pi: group(6),
        }
    }
}

/// Evaluation of one fitted model against its truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub detection: DetectionRates,
    pub classification_error: f64,
    /// One entry per non-reference class.
    pub auc: Vec<f64>,
    pub recovery: Recovery,
    pub errors: ParamErrors,
}

fn classification_error(labels: &[usize], truth: &[usize]) -> f64 {
    let wrong = labels.iter().zip(truth).filter(|(a, b)| a != b).count();
    wrong as f64 / truth.len().max(1) as f64
}

fn class_aucs(c: &ClassificationResult, truth: &[usize]) -> Vec<f64> {
    (1..c.posteriors.ncols())
        .map(|k| {
            let positive: Vec<bool> = truth.iter().map(|&l| l == k).collect();
            auc(c.posteriors.column(k).as_slice().unwrap_or(&c.posteriors.column(k).to_vec()), &positive)
        })
        .collect()
}

/// Scores `est` and its classification after relabelling them with `relabeling`.
pub fn score(
    bundle: &TruthBundle,
    est: &ModelParams,
    classification: &ClassificationResult,
    relabeling: &Relabeling,
) -> Result<MetricsReport> {
    let truth = &bundle.true_params;
    if classification.map_labels.len() != bundle.true_labels.len()
        || classification.posteriors.ncols() != truth.n_classes()
    {
        return Err(usage("classification does not match the simulated data"));
    }
    let est = relabeling.apply_params(est)?;
    let classification = relabeling.apply_classification(classification);
    let errors = ParamErrors::between(&est, truth)?;
    Ok(MetricsReport {
        detection: detection_rates(&SparsityPattern::from_params(&est), truth)?,
        classification_error: classification_error(&classification.map_labels, &bundle.true_labels),
        auc: class_aucs(&classification, &bundle.true_labels),
        recovery: Recovery::aggregate(&[&errors]),
        errors,
    })
}

/// Everything a study records about one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub replication: u64,
    pub selected_lambda: f64,
    pub flagged_items: Vec<usize>,
    pub relabeling: Relabeling,
    pub estimate: ModelParams,
    pub truth: ModelParams,
    pub metrics: MetricsReport,
    pub classification_error_true: f64,
    pub auc_true: Vec<f64>,
    pub oracle: Option<DetectionRates>,
}

/// Study-level options beyond the fitting configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyOptions {
    pub label_rule: LabelRule,
    pub oracle: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self { label_rule: LabelRule::ParameterMatch, oracle: true }
    }
}

/// generate → path → MAP → relabel → score, plus the true-parameter and oracle comparators.
pub fn run_replication(
    design: &SimulationDesign,
    replication: u64,
    em_config: &EmConfig,
    path_config: &PathConfig,
    grid: &QuadratureGrid,
    options: &StudyOptions,
) -> Result<ReplicationReport> {
    let bundle = generate(design, replication)?;
    let k = design.n_extra_classes();
    let report = run_path(&bundle.data, k, path_config, em_config, grid)?;
    let est = report.selected_params();
    let classification = classify_map(&bundle.data, est, grid)?;
    let relabeling = resolve_labels(est, &bundle.true_params, options.label_rule)?;
    let metrics = score(&bundle, est, &classification, &relabeling)?;

    let true_class = classify_map(&bundle.data, &bundle.true_params, grid)?;
    let oracle = if options.oracle {
        let oracle_report = fit_oracle(&bundle, grid, em_config, path_config)?;
        Some(detection_rates(&SparsityPattern::from_params(oracle_report.selected_params()), &bundle.true_params)?)
    } else {
        None
    };
    let estimate = relabeling.apply_params(est)?;
    Ok(ReplicationReport {
        replication,
        selected_lambda: report.selected_lambda,
        flagged_items: SparsityPattern::from_params(&estimate).flagged_items(),
        relabeling,
        estimate,
        truth: bundle.true_params.clone(),
        metrics,
        classification_error_true: classification_error(&true_class.map_labels, &bundle.true_labels),
        auc_true: class_aucs(&true_class, &bundle.true_labels),
        oracle,
    })
}

/// Averages over successful replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub classification_error: f64,
    pub classification_error_true: f64,
    pub auc: Vec<f64>,
    pub auc_true: Vec<f64>,
    pub tpr: f64,
    pub fpr: f64,
    pub tpr_by_class: Vec<f64>,
    pub fpr_by_class: Vec<f64>,
    pub tpr_oracle: Option<f64>,
    pub fpr_oracle: Option<f64>,
    pub recovery: Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub design: SimulationDesign,
    pub n_succeeded: usize,
    pub n_failed: usize,
    pub failures: Vec<ReplicationFailure>,
    /// `None` when every replication failed.
    pub summary: Option<StudySummary>,
    pub replications: Vec<ReplicationReport>,
}

impl StudyReport {
    pub fn success_rate(&self) -> f64 {
        self.n_succeeded as f64 / (self.n_succeeded + self.n_failed).max(1) as f64
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        crate::math::pairwise_sum(&v) / v.len() as f64
    }
}

fn mean_columns(rows: &[&[f64]]) -> Vec<f64> {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    (0..width).map(|c| mean(rows.iter().filter_map(|r| r.get(c).copied()).filter(|v| !v.is_nan()))).collect()
}

/// Summary of a set of replications in replication order.
pub fn summarize(reps: &[ReplicationReport]) -> Option<StudySummary> {
    if reps.is_empty() {
        return None;
    }
    let oracle: Vec<&DetectionRates> = reps.iter().filter_map(|r| r.oracle.as_ref()).collect();
    let errors: Vec<&ParamErrors> = reps.iter().map(|r| &r.metrics.errors).collect();
    Some(StudySummary {
        classification_error: mean(reps.iter().map(|r| r.metrics.classification_error)),
        classification_error_true: mean(reps.iter().map(|r| r.classification_error_true)),
        auc: mean_columns(&reps.iter().map(|r| r.metrics.auc.as_slice()).collect::<Vec<_>>()),
        auc_true: mean_columns(&reps.iter().map(|r| r.auc_true.as_slice()).collect::<Vec<_>>()),
        tpr: mean(reps.iter().map(|r| r.metrics.detection.tpr).filter(|v| !v.is_nan())),
        fpr: mean(reps.iter().map(|r| r.metrics.detection.fpr)),
        tpr_by_class: mean_columns(
            &reps.iter().map(|r| r.metrics.detection.tpr_by_class.as_slice()).collect::<Vec<_>>(),
        ),
        fpr_by_class: mean_columns(
            &reps.iter().map(|r| r.metrics.detection.fpr_by_class.as_slice()).collect::<Vec<_>>(),
        ),
        tpr_oracle: (!oracle.is_empty()).then(|| mean(oracle.iter().map(|o| o.tpr).filter(|v| !v.is_nan()))),
        fpr_oracle: (!oracle.is_empty()).then(|| mean(oracle.iter().map(|o| o.fpr))),
        recovery: Recovery::aggregate(&errors),
    })
}

/// Runs `design.n_replications` replications in parallel. Failed replications
/// are counted and listed, never dropped silently.
pub fn run_study(
    design: &SimulationDesign,
    em_config: &EmConfig,
    path_config: &PathConfig,
    grid: &QuadratureGrid,
    options: &StudyOptions,
) -> Result<StudyReport> {
    design.validate()?;
    em_config.validate()?;
    path_config.validate()?;
    let results: Vec<(u64, Result<ReplicationReport>)> = (0..design.n_replications as u64)
        .into_par_iter()
        .map(|b| (b, run_replication(design, b, em_config, path_config, grid, options)))
        .collect();
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    for (b, r) in results {
        match r {
            Ok(rep) => replications.push(rep),
            Err(e) => failures.push(ReplicationFailure { replication: b, error: e.to_string() }),
        }
    }
    Ok(StudyReport {
        design: design.clone(),
        n_succeeded: replications.len(),
        n_failed: failures.len(),
        failures,
        summary: summarize(&replications),
        replications,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_counted_rates() {
        let mut truth = ModelParams::neutral(5, 1);
        for item in 0..3 {
            truth.dif_effects[[item, 1]] = 1.0;
        }
        let mut est = SparsityPattern::none_free(5, 1);
        for item in 1..4 {
            est.set(item, 1, true);
        }
        let r = detection_rates(&est, &truth).unwrap();
        assert_abs_diff_eq!(r.tpr, 2.0 / 3.0);
        assert_abs_diff_eq!(r.fpr, 0.5);

        let none = detection_rates(&SparsityPattern::none_free(5, 1), &truth).unwrap();
        assert_eq!((none.tpr, none.fpr), (0.0, 0.0));
        let exact = detection_rates(&SparsityPattern::from_params(&truth), &truth).unwrap();
        assert_eq!((exact.tpr, exact.fpr), (1.0, 0.0));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]), 0.5);
        assert_abs_diff_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), 0.75);
        assert!(auc(&[0.1], &[true]).is_nan());
    }

    #[test]
    fn nu_rule_swaps() {
        let mut est = ModelParams::neutral(2, 1);
        est.class_proportions = vec![0.3, 0.7];
        let mut truth = ModelParams::neutral(2, 1);
        truth.class_proportions = vec![0.7, 0.3];
        assert_eq!(resolve_labels(&est, &truth, LabelRule::NuOrdering).unwrap().order, vec![1, 0]);
        assert!(resolve_labels(&truth, &truth, LabelRule::NuOrdering).unwrap().is_identity());
    }

    #[test]
    fn relabeling_round_trips_labels() {
        let r = Relabeling { order: vec![2, 0, 1] };
        assert_eq!(r.apply_labels(&[0, 1, 2]), vec![1, 2, 0]);
    }

    #[test]
    fn generated_design_matches_truth_layout() {
        let mut design = SimulationDesign::two_group(25, 200, 0.5);
        design.seed = 3;
        let b = generate(&design, 0).unwrap();
        assert_eq!(b.data.n_respondents(), 200);
        assert_eq!(b.true_params.n_classes(), 2);
        assert!(b.true_params.is_valid());
        for item in 0..25 {
            let nz = b.true_params.dif(item, 1) != 0.0;
            assert_eq!(nz, item < 10);
        }
        assert_eq!(generate(&design, 0).unwrap(), b);
        assert_ne!(generate(&design, 1).unwrap().data, b.data);
    }

    #[test]
    fn design_validation() {
        let mut d = SimulationDesign::three_group(25, 100);
        assert!(d.validate().is_ok());
        d.dif_item_positions.push(25);
        assert!(d.validate().is_err());
        let mut d = SimulationDesign::two_group(25, 100, 0.5);
        d.trait_laws[0] = TraitLaw::new(0.1, 1.0);
        assert!(d.validate().is_err());
        let mut d = SimulationDesign::two_group(25, 100, 0.5);
        d.dif_effect_ranges[0] = Range::new(1.0, 0.5);
        assert!(d.validate().is_err());
    }

    #[test]
    fn aggregate_bias_and_rmse() {
        let e1 = ParamErrors { d: vec![1.0, -1.0], ..Default::default() };
        let e2 = ParamErrors { d: vec![1.0, 1.0], ..Default::default() };
        let r = Recovery::aggregate(&[&e1, &e2]);
        assert_abs_diff_eq!(r.d.abs_bias, 0.5);
        assert_abs_diff_eq!(r.d.rmse, 1.0);
        assert!(r.mu.rmse.is_nan());
    }
}
