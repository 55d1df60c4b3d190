//! Parameter space of the mixture two-parameter logistic model.
//!
//! Respondent `i` belongs to one of `K + 1` latent classes. Class 0 is the
//! reference class: its trait law is fixed to `N(0, 1)` and it carries no DIF
//! effects. Given class `k` and trait `θ`, the probability of a correct answer
//! to item `j` is `logistic(a_j θ + d_j + δ_jk)`.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{dimension, usage, Result};
use crate::math::sigmoid;

/// Binary item responses, one row per respondent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseMatrix {
    n_respondents: usize,
    n_items: usize,
    entries: Vec<u8>,
}

impl ResponseMatrix {
    /// Builds a matrix from row-major entries, rejecting anything other than 0/1.
    pub fn new(n_respondents: usize, n_items: usize, entries: Vec<u8>) -> Result<Self> {
        if n_respondents == 0 || n_items == 0 {
            return Err(usage("response matrix needs at least one respondent and one item"));
        }
        if entries.len() != n_respondents * n_items {
            return Err(dimension(format!(
                "expected {} entries for {}x{}, got {}",
                n_respondents * n_items,
                n_respondents,
                n_items,
                entries.len()
            )));
        }
        if let Some(pos) = entries.iter().position(|&v| v > 1) {
            return Err(usage(format!(
                "non-binary response {} at respondent {}, item {}",
                entries[pos],
                pos / n_items,
                pos % n_items
            )));
        }
        Ok(Self { n_respondents, n_items, entries })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_items = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != n_items) {
            return Err(dimension(format!("row {bad} has {} items, expected {n_items}", rows[bad].len())));
        }
        Self::new(rows.len(), n_items, rows.concat())
    }

    pub fn n_respondents(&self) -> usize {
        self.n_respondents
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    #[inline]
    pub fn get(&self, respondent: usize, item: usize) -> u8 {
        self.entries[respondent * self.n_items + item]
    }

    #[inline]
    pub fn row(&self, respondent: usize) -> &[u8] {
        let start = respondent * self.n_items;
        &self.entries[start..start + self.n_items]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.entries.chunks_exact(self.n_items)
    }

    /// Fraction of correct answers per item.
    pub fn item_means(&self) -> Vec<f64> {
        let mut sums = vec![0usize; self.n_items];
        for row in self.rows() {
            for (s, &y) in sums.iter_mut().zip(row) {
                *s += y as usize;
            }
        }
        sums.into_iter().map(|s| s as f64 / self.n_respondents as f64).collect()
    }

    /// Keeps only the listed respondents, in the given order.
    pub fn select_rows(&self, respondents: &[usize]) -> Result<Self> {
        let mut entries = Vec::with_capacity(respondents.len() * self.n_items);
        for &i in respondents {
            if i >= self.n_respondents {
                return Err(usage(format!("respondent {i} out of range")));
            }
            entries.extend_from_slice(self.row(i));
        }
        Self::new(respondents.len(), self.n_items, entries)
    }
}

/// All free and fixed parameters of the mixture model.
///
/// `dif_effects` has `K + 1` columns; column 0 belongs to the reference class
/// and is identically zero. `class_sds` holds standard deviations, so the trait
/// law of class `k` is `N(class_means[k], class_sds[k]^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub discriminations: Vec<f64>,
    pub easiness: Vec<f64>,
    pub dif_effects: Array2<f64>,
    pub class_proportions: Vec<f64>,
    pub class_means: Vec<f64>,
    pub class_sds: Vec<f64>,
}

/// A single violated invariant reported by [`ModelParams::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    ReferenceDif { item: usize, value: f64 },
    ReferenceMean(f64),
    ReferenceSd(f64),
    NegativeProportion { class: usize, value: f64 },
    Simplex(f64),
    NonPositiveSd { class: usize, value: f64 },
    NonFinite(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "shape: {msg}"),
            Violation::ReferenceDif { item, value } => write!(f, "δ_j0 ≠ 0 (item {item}: {value})"),
            Violation::ReferenceMean(v) => write!(f, "μ_0 ≠ 0 ({v})"),
            Violation::ReferenceSd(v) => write!(f, "σ_0 ≠ 1 ({v})"),
            Violation::NegativeProportion { class, value } => write!(f, "ν_{class} < 0 ({value})"),
            Violation::Simplex(sum) => write!(f, "simplex: proportions sum to {sum}"),
            Violation::NonPositiveSd { class, value } => write!(f, "σ_{class} ≤ 0 ({value})"),
            Violation::NonFinite(what) => write!(f, "non-finite {what}"),
        }
    }
}

impl ModelParams {
    /// Parameters for `n_items` items and `n_extra_classes` non-reference classes:
    /// unit discriminations, zero easiness and DIF, uniform proportions, standard normal traits.
    pub fn neutral(n_items: usize, n_extra_classes: usize) -> Self {
        let c = n_extra_classes + 1;
        Self {
            discriminations: vec![1.0; n_items],
            easiness: vec![0.0; n_items],
            dif_effects: Array2::zeros((n_items, c)),
            class_proportions: vec![1.0 / c as f64; c],
            class_means: vec![0.0; c],
            class_sds: vec![1.0; c],
        }
    }

    pub fn n_items(&self) -> usize {
        self.discriminations.len()
    }

    /// Number of non-reference classes, `K`.
    pub fn n_extra_classes(&self) -> usize {
        self.class_proportions.len().saturating_sub(1)
    }

    pub fn n_classes(&self) -> usize {
        self.class_proportions.len()
    }

    #[inline]
    pub fn dif(&self, item: usize, class: usize) -> f64 {
        self.dif_effects[[item, class]]
    }

    /// Linear predictor `a_j θ + d_j + δ_jk` without bounds checks.
    #[inline]
    pub fn logit(&self, theta: f64, item: usize, class: usize) -> f64 {
        self.discriminations[item] * theta + self.easiness[item] + self.dif_effects[[item, class]]
    }

    fn check_indices(&self, item: usize, class: usize) -> Result<()> {
        if item >= self.n_items() {
            return Err(usage(format!("item {item} out of range (J = {})", self.n_items())));
        }
        if class >= self.n_classes() {
            return Err(usage(format!("class {class} out of range (K = {})", self.n_extra_classes())));
        }
        Ok(())
    }

    /// Probability of a correct response to `item` for a member of `class` with trait `theta`.
    pub fn item_response_prob(&self, theta: f64, item: usize, class: usize) -> Result<f64> {
        self.check_indices(item, class)?;
        Ok(sigmoid(self.logit(theta, item, class)))
    }

    /// Log-odds of a correct answer in `class` minus that of the reference class at the same `theta`.
    pub fn dif_log_odds_ratio(&self, item: usize, class: usize, theta: f64) -> Result<f64> {
        self.check_indices(item, class)?;
        if class == 0 {
            return Err(usage("the reference class has no DIF effect"));
        }
        if !theta.is_finite() {
            return Err(usage("theta must be finite"));
        }
        // The shared term a_j θ + d_j cancels; subtract symbolically so the result is exact.
        Ok(self.dif_effects[[item, class]] - self.dif_effects[[item, 0]])
    }

    /// Sum of `|δ_jk|` over the non-reference classes.
    pub fn l1_dif_norm(&self) -> f64 {
        let mut total = 0.0;
        for row in self.dif_effects.rows() {
            total += row.iter().skip(1).map(|v| v.abs()).sum::<f64>();
        }
        total
    }

    /// Every violated invariant; empty when the parameters are valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let j = self.n_items();
        let c = self.n_classes();
        if j == 0 {
            out.push(Violation::Shape("no items".into()));
        }
        if c == 0 {
            out.push(Violation::Shape("no classes".into()));
            return out;
        }
        if self.easiness.len() != j {
            out.push(Violation::Shape(format!("easiness has {} entries, expected {j}", self.easiness.len())));
        }
        if self.dif_effects.dim() != (j, c) {
            out.push(Violation::Shape(format!("dif_effects is {:?}, expected ({j}, {c})", self.dif_effects.dim())));
        }
        if self.class_means.len() != c || self.class_sds.len() != c {
            out.push(Violation::Shape("class means/sds do not match the number of classes".into()));
        }
        if !out.is_empty() {
            return out;
        }

        let all = self
            .discriminations
            .iter()
            .chain(&self.easiness)
            .chain(self.dif_effects.iter())
            .chain(&self.class_proportions)
            .chain(&self.class_means)
            .chain(&self.class_sds);
        if all.clone().any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite("parameter".into()));
        }
        for item in 0..j {
            let v = self.dif_effects[[item, 0]];
            if v != 0.0 {
                out.push(Violation::ReferenceDif { item, value: v });
            }
        }
        if self.class_means[0] != 0.0 {
            out.push(Violation::ReferenceMean(self.class_means[0]));
        }
        if self.class_sds[0] != 1.0 {
            out.push(Violation::ReferenceSd(self.class_sds[0]));
        }
        for (class, &p) in self.class_proportions.iter().enumerate() {
            if p < 0.0 {
                out.push(Violation::NegativeProportion { class, value: p });
            }
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            out.push(Violation::Simplex(sum));
        }
        for (class, &s) in self.class_sds.iter().enumerate() {
            if s <= 0.0 {
                out.push(Violation::NonPositiveSd { class, value: s });
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    pub(crate) fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            return Ok(());
        }
        let msg = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        Err(usage(format!("invalid parameters: {msg}")))
    }

    /// Zeroes every non-reference DIF entry the pattern marks as fixed.
    pub fn apply_pattern(&mut self, pattern: &SparsityPattern) {
        for item in 0..self.n_items() {
            for k in 1..self.n_classes() {
                if !pattern.is_free(item, k) {
                    self.dif_effects[[item, k]] = 0.0;
                }
            }
        }
    }

    /// Re-expresses the model with `new_reference` as the reference class.
    ///
    /// The trait is rescaled so the new reference has law `N(0, 1)`; item
    /// parameters and DIF effects are transformed so that the marginal
    /// likelihood of any data set is unchanged. Classes are reordered as
    /// `[new_reference, remaining classes in their original order]`.
    pub fn with_reference(&self, new_reference: usize) -> Result<Self> {
        let c = self.n_classes();
        if new_reference >= c {
            return Err(usage(format!("class {new_reference} out of range")));
        }
        let order: Vec<usize> = std::iter::once(new_reference).chain((0..c).filter(|&k| k != new_reference)).collect();
        let shift = self.class_means[new_reference];
        let scale = self.class_sds[new_reference];
        let j = self.n_items();
        let mut out = ModelParams::neutral(j, c - 1);
        for item in 0..j {
            let a = self.discriminations[item];
            let base_dif = self.dif_effects[[item, new_reference]];
            out.discriminations[item] = a * scale;
            out.easiness[item] = self.easiness[item] + a * shift + base_dif;
            for (new_k, &old_k) in order.iter().enumerate() {
                out.dif_effects[[item, new_k]] =
                    if new_k == 0 { 0.0 } else { self.dif_effects[[item, old_k]] - base_dif };
            }
        }
        for (new_k, &old_k) in order.iter().enumerate() {
            out.class_proportions[new_k] = self.class_proportions[old_k];
            if new_k > 0 {
                out.class_means[new_k] = (self.class_means[old_k] - shift) / scale;
                out.class_sds[new_k] = self.class_sds[old_k] / scale;
            }
        }
        Ok(out)
    }

    /// Reorders the non-reference classes: new class `k` takes old class `order[k - 1]`.
    pub fn permute_extra_classes(&self, order: &[usize]) -> Result<Self> {
        let k = self.n_extra_classes();
        let mut seen = vec![false; k + 1];
        if order.len() != k || order.iter().any(|&o| o == 0 || o > k || std::mem::replace(&mut seen[o], true)) {
            return Err(usage("order must be a permutation of 1..=K"));
        }
        let mut out = self.clone();
        for (slot, &old) in order.iter().enumerate() {
            let new = slot + 1;
            out.class_proportions[new] = self.class_proportions[old];
            out.class_means[new] = self.class_means[old];
            out.class_sds[new] = self.class_sds[old];
            for item in 0..self.n_items() {
                out.dif_effects[[item, new]] = self.dif_effects[[item, old]];
            }
        }
        Ok(out)
    }
}

/// Which non-reference DIF entries are free (`true`) versus fixed at zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SparsityPattern {
    n_items: usize,
    n_extra_classes: usize,
    mask: Vec<bool>,
}

impl SparsityPattern {
    pub fn new(n_items: usize, n_extra_classes: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != n_items * n_extra_classes {
            return Err(dimension(format!(
                "mask has {} entries, expected {}x{}",
                mask.len(),
                n_items,
                n_extra_classes
            )));
        }
        Ok(Self { n_items, n_extra_classes, mask })
    }

    pub fn all_free(n_items: usize, n_extra_classes: usize) -> Self {
        Self { n_items, n_extra_classes, mask: vec![true; n_items * n_extra_classes] }
    }

    pub fn none_free(n_items: usize, n_extra_classes: usize) -> Self {
        Self { n_items, n_extra_classes, mask: vec![false; n_items * n_extra_classes] }
    }

    /// Nonzero pattern of the non-reference DIF effects (exact comparison with zero).
    pub fn from_params(params: &ModelParams) -> Self {
        let j = params.n_items();
        let k = params.n_extra_classes();
        let mut mask = Vec::with_capacity(j * k);
        for item in 0..j {
            for class in 1..=k {
                mask.push(params.dif(item, class) != 0.0);
            }
        }
        Self { n_items: j, n_extra_classes: k, mask }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_extra_classes(&self) -> usize {
        self.n_extra_classes
    }

    /// `class` counts from 1 (the first non-reference class).
    #[inline]
    pub fn is_free(&self, item: usize, class: usize) -> bool {
        debug_assert!(class >= 1);
        self.mask[item * self.n_extra_classes + class - 1]
    }

    pub fn set(&mut self, item: usize, class: usize, free: bool) {
        self.mask[item * self.n_extra_classes + class - 1] = free;
    }

    pub fn nnz(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Items with at least one free DIF entry.
    pub fn flagged_items(&self) -> Vec<usize> {
        (0..self.n_items).filter(|&j| (1..=self.n_extra_classes).any(|k| self.is_free(j, k))).collect()
    }

    fn matches(&self, params: &ModelParams) -> Result<()> {
        if self.n_items != params.n_items() || self.n_extra_classes != params.n_extra_classes() {
            return Err(dimension(format!(
                "pattern is {}x{}, parameters have J = {}, K = {}",
                self.n_items,
                self.n_extra_classes,
                params.n_items(),
                params.n_extra_classes()
            )));
        }
        Ok(())
    }
}

/// Free parameters of a model whose DIF entries follow `pattern`:
/// `a_j` and `d_j` per item, the free DIF entries, and `μ_k`, `σ_k`, `ν_k` for `k = 1..K`.
pub fn count_free_params(params: &ModelParams, pattern: &SparsityPattern) -> Result<usize> {
    pattern.matches(params)?;
    Ok(2 * params.n_items() + pattern.nnz() + 3 * params.n_extra_classes())
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    a: Vec<f64>,
    d: Vec<f64>,
    delta: Vec<Vec<f64>>,
    nu: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    #[serde(rename = "K")]
    k: usize,
}

impl Serialize for ModelParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsRepr {
            a: self.discriminations.clone(),
            d: self.easiness.clone(),
            delta: self.dif_effects.rows().into_iter().map(|r| r.to_vec()).collect(),
            nu: self.class_proportions.clone(),
            mu: self.class_means.clone(),
            sigma: self.class_sds.clone(),
            k: self.n_extra_classes(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ModelParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = ParamsRepr::deserialize(deserializer)?;
        let j = r.a.len();
        let c = r.k + 1;
        if r.d.len() != j || r.delta.len() != j || r.nu.len() != c || r.mu.len() != c || r.sigma.len() != c {
            return Err(D::Error::custom("inconsistent parameter dimensions"));
        }
        if r.delta.iter().any(|row| row.len() != c) {
            return Err(D::Error::custom("delta rows must have K + 1 columns"));
        }
        let dif = Array2::from_shape_vec((j, c), r.delta.concat()).map_err(D::Error::custom)?;
        Ok(ModelParams {
            discriminations: r.a,
            easiness: r.d,
            dif_effects: dif,
            class_proportions: r.nu,
            class_means: r.mu,
            class_sds: r.sigma,
        })
    }
}
