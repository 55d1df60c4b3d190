mod common;

use latentdif::{e_step, fit_penalized, make_grid, soft_threshold, update_class_proportions, EmConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn penalized_objective_never_increases_over_200_runs() {
    let grid = make_grid(15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut violations = Vec::new();
    for run in 0..200 {
        let j = rng.random_range(3..=6);
        let k = rng.random_range(0..=2);
        let n = rng.random_range(20..=60);
        let truth = common::random_params(&mut rng, j, k);
        let data = common::model_data(&mut rng, &truth, n);
        let lambda = rng.random_range(0.0..15.0);
        let config = EmConfig { max_iterations: 60, n_random_starts: 1, seed: run, ..EmConfig::default() };
        let fit = fit_penalized(&data, k, lambda, &grid, &config, None).unwrap();
        for (step, pair) in fit.objective_trace.windows(2).enumerate() {
            if pair[1] > pair[0] + 1e-10 {
                violations.push((run, step, pair[1] - pair[0]));
            }
        }
    }
    assert!(violations.is_empty(), "{} increases, first {:?}", violations.len(), violations.first());
}

#[test]
fn proportion_update_matches_simplex_grid_search() {
    let grid = make_grid(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..20 {
        let k = rng.random_range(1..=2);
        let n = rng.random_range(5..=40);
        let params = common::random_params(&mut rng, 3, k);
        let data = common::random_data(&mut rng, n, 3);
        let mut resp = e_step(&data, &params, &grid).unwrap();
        for mut row in resp.class_post.rows_mut() {
            row.iter_mut().for_each(|v| *v = rng.random_range(0.01..1.0));
            let s = row.sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let closed = update_class_proportions(&resp);
        let brute = common::brute_force_proportions(&resp.class_post);
        for (c, b) in closed.iter().zip(&brute) {
            assert!((c - b).abs() <= 2e-3, "{closed:?} vs {brute:?}");
        }
        assert!((closed.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn soft_threshold_is_bit_exact(x in -1e3f64..1e3, t in 0.0f64..50.0) {
        let got = soft_threshold(&[x], t).unwrap()[0];
        let want = x.signum() * (x.abs() - t).max(0.0);
        // 0.0 and -0.0 compare equal; both are exact zeros.
        prop_assert!(got == want, "x={x} t={t}: {got} vs {want}");
        if x.abs() <= t {
            prop_assert!(got == 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_threshold_shrinks_toward_zero(xs in prop::collection::vec(-10.0f64..10.0, 1..20), t in 0.0f64..5.0) {
        let out = soft_threshold(&xs, t).unwrap();
        for (x, y) in xs.iter().zip(&out) {
            prop_assert!(y.abs() <= x.abs());
            prop_assert!(*y == 0.0 || y.signum() == x.signum());
            prop_assert!((x - y).abs() <= t + 1e-12);
        }
    }
}
