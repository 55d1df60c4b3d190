#![allow(dead_code)]

use latentdif::likelihood::SmoothGradient;
use latentdif::{ModelParams, ResponseMatrix};
use ndarray::Array2;
use rand::Rng;

pub fn random_params<R: Rng>(rng: &mut R, n_items: usize, n_extra: usize) -> ModelParams {
    let c = n_extra + 1;
    let mut dif = Array2::zeros((n_items, c));
    for j in 0..n_items {
        for k in 1..c {
            if rng.random_bool(0.6) {
                dif[[j, k]] = rng.random_range(-1.5..1.5);
            }
        }
    }
    let mut nu: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = nu.iter().sum();
    nu.iter_mut().for_each(|v| *v /= total);
    let mut means = vec![0.0; c];
    let mut sds = vec![1.0; c];
    for k in 1..c {
        means[k] = rng.random_range(-1.0..1.0);
        sds[k] = rng.random_range(0.6..1.5);
    }
    ModelParams {
        discriminations: (0..n_items).map(|_| rng.random_range(0.4..1.8)).collect(),
        easiness: (0..n_items).map(|_| rng.random_range(-1.5..1.5)).collect(),
        dif_effects: dif,
        class_proportions: nu,
        class_means: means,
        class_sds: sds,
    }
}

pub fn random_data<R: Rng>(rng: &mut R, n: usize, j: usize) -> ResponseMatrix {
    let entries = (0..n * j).map(|_| rng.random_range(0..2u8)).collect();
    ResponseMatrix::new(n, j, entries).unwrap()
}

/// Responses drawn from the model itself, so fits see real class structure.
pub fn model_data<R: Rng>(rng: &mut R, params: &ModelParams, n: usize) -> ResponseMatrix {
    use rand_distr::{Distribution, StandardNormal};
    let j = params.n_items();
    let mut entries = Vec::with_capacity(n * j);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut k = 0;
        let mut acc = params.class_proportions[0];
        while u > acc && k + 1 < params.n_classes() {
            k += 1;
            acc += params.class_proportions[k];
        }
        let z: f64 = StandardNormal.sample(rng);
        let theta = params.class_means[k] + params.class_sds[k] * z;
        for item in 0..j {
            let p = 1.0 / (1.0 + (-params.logit(theta, item, k)).exp());
            entries.push(u8::from(rng.random::<f64>() < p));
        }
    }
    ResponseMatrix::new(n, j, entries).unwrap()
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `∫ N(θ; μ_k, σ_k²) Π_j P(y_j | θ, k) dθ` by the trapezoid rule on 10,001 points.
pub fn class_integral(params: &ModelParams, row: &[u8], class: usize) -> f64 {
    const POINTS: usize = 10_001;
    let mu = params.class_means[class];
    let sd = params.class_sds[class];
    let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
    let h = (hi - lo) / (POINTS - 1) as f64;
    let mut total = 0.0;
    for i in 0..POINTS {
        let theta = lo + h * i as f64;
        let z = (theta - mu) / sd;
        let mut log_f = -0.5 * z * z - (sd * (2.0 * std::f64::consts::PI).sqrt()).ln();
        for (item, &y) in row.iter().enumerate() {
            let eta = params.logit(theta, item, class);
            log_f += if y == 1 { log_sigmoid(eta) } else { log_sigmoid(-eta) };
        }
        let w = if i == 0 || i == POINTS - 1 { 0.5 } else { 1.0 };
        total += w * log_f.exp();
    }
    total * h
}

pub fn dense_loglik(params: &ModelParams, data: &ResponseMatrix) -> f64 {
    data.rows()
        .map(|row| {
            (0..params.n_classes())
                .map(|k| params.class_proportions[k] * class_integral(params, row, k))
                .sum::<f64>()
                .ln()
        })
        .sum()
}

#[derive(Debug, Clone, Copy)]
pub enum Coord {
    A(usize),
    D(usize),
    Delta(usize, usize),
    Mu(usize),
    Sigma(usize),
}

impl Coord {
    pub fn slot(self, p: &mut ModelParams) -> &mut f64 {
        match self {
            Coord::A(j) => &mut p.discriminations[j],
            Coord::D(j) => &mut p.easiness[j],
            Coord::Delta(j, k) => &mut p.dif_effects[[j, k]],
            Coord::Mu(k) => &mut p.class_means[k],
            Coord::Sigma(k) => &mut p.class_sds[k],
        }
    }

    pub fn read(self, g: &SmoothGradient) -> f64 {
        match self {
            Coord::A(j) => g.discriminations[j],
            Coord::D(j) => g.easiness[j],
            Coord::Delta(j, k) => g.dif_effects[[j, k - 1]],
            Coord::Mu(k) => g.class_means[k - 1],
            Coord::Sigma(k) => g.class_sds[k - 1],
        }
    }
}

pub fn coordinates(params: &ModelParams) -> Vec<Coord> {
    let mut out = Vec::new();
    for j in 0..params.n_items() {
        out.push(Coord::A(j));
        out.push(Coord::D(j));
        out.extend((1..params.n_classes()).map(|k| Coord::Delta(j, k)));
    }
    for k in 1..params.n_classes() {
        out.push(Coord::Mu(k));
        out.push(Coord::Sigma(k));
    }
    out
}

pub fn brute_force_proportions(post: &Array2<f64>) -> Vec<f64> {
    let totals: Vec<f64> = post.columns().into_iter().map(|c| c.sum()).collect();
    let objective = |nu: &[f64]| -> f64 { -totals.iter().zip(nu).map(|(t, v)| t * v.ln()).sum::<f64>() };
    let steps = 1000;
    let mut best = (f64::INFINITY, Vec::new());
    match totals.len() {
        2 => {
            for a in 1..steps {
                let nu = [a as f64 / steps as f64, 1.0 - a as f64 / steps as f64];
                let v = objective(&nu);
                if v < best.0 {
                    best = (v, nu.to_vec());
                }
            }
        }
        3 => {
            for a in 1..steps {
                for b in 1..steps - a {
                    let nu = [a as f64 / steps as f64, b as f64 / steps as f64, (steps - a - b) as f64 / steps as f64];
                    let v = objective(&nu);
                    if v < best.0 {
                        best = (v, nu.to_vec());
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    best.1
}
