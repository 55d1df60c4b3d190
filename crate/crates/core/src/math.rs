//! Small numerically careful scalar helpers shared by the likelihood code.

/// Logistic function `1 / (1 + exp(-x))`, evaluated without overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`, stable for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `log(sum(exp(v)))`. Returns `-inf` for an empty slice or when every entry is `-inf`.
#[inline]
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Natural log of the standard normal density.
#[inline]
pub fn log_std_normal_pdf(x: f64) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
    -0.5 * x * x - HALF_LN_2PI
}

/// Pairwise (tree) summation. The result depends only on the order of `values`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_naive_in_safe_range() {
        for &x in &[-20.0f64, -3.5, -1.0, 0.0, 0.25, 2.0, 15.0] {
            let naive = 1.0 / (1.0 + (-x).exp());
            assert!((sigmoid(x) - naive).abs() < 1e-15);
            assert!((log_sigmoid(x) - naive.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sigmoid_extremes() {
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!(log_sigmoid(800.0) <= 0.0);
    }

    #[test]
    fn log_sum_exp_handles_large_and_empty() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let v = [-1000.0, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sum_agrees_with_naive() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = v.iter().sum();
        assert!((pairwise_sum(&v) - naive).abs() < 1e-10);
    }
}
