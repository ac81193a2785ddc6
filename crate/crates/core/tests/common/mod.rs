//! Fixtures shared by the selection tests and the acceptance suite.
#![allow(dead_code)]

use coarsebind::epinet::EpinetPosterior;
use coarsebind::rng;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i:02}")).collect()
}

/// Correlated Gaussian columns: a few shared factors plus idiosyncratic noise.
pub fn random_posterior(seed: u64, k: usize, n: usize) -> EpinetPosterior {
    let mut r = rng::seeded(seed);
    let factors = 3;
    let loads = Array2::from_shape_fn((factors, n), |_| rng::normal(&mut r));
    let means: Vec<f64> = (0..n).map(|_| 0.5 * rng::normal(&mut r)).collect();
    let scale: Vec<f64> = (0..n).map(|_| 0.2 + r.random::<f64>()).collect();
    let mut samples = Array2::zeros((k, n));
    for row in 0..k {
        let f: Vec<f64> = (0..factors).map(|_| rng::normal(&mut r)).collect();
        for c in 0..n {
            let shared: f64 = (0..factors).map(|j| loads[[j, c]] * f[j]).sum();
            samples[[row, c]] = means[c] + scale[c] * (0.6 * shared + rng::normal(&mut r));
        }
    }
    EpinetPosterior {
        ids: ids(n),
        base_predictions: means,
        samples,
    }
}

pub fn subsets(n: usize, b: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, b: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == b {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, b, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, b, &mut Vec::new(), &mut out);
    out
}

/// Best EMAX over all subsets of size `b`, computed directly from the samples.
pub fn exhaustive_best(p: &EpinetPosterior, b: usize) -> f64 {
    subsets(p.n_items(), b)
        .into_iter()
        .map(|s| {
            p.samples.rows().into_iter().map(|row| s.iter().map(|&c| row[c]).fold(f64::MIN, f64::max)).sum::<f64>()
                / p.n_paths() as f64
        })
        .fold(f64::MIN, f64::max)
}

/// Three correlated Gaussian variables, with samples drawn through the Cholesky factor.
pub struct GaussianFixture {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub posterior: EpinetPosterior,
}

pub fn gaussian_fixture(k: usize, seed: u64) -> GaussianFixture {
    let mean = DVector::from_vec(vec![1.0, -0.5, 2.0]);
    let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.6, 0.3, 0.6, 1.5, -0.4, 0.3, -0.4, 0.8]);
    let l = cov.clone().cholesky().expect("positive definite").l();
    let mut r = rng::seeded(seed);
    let mut samples = Array2::zeros((k, 3));
    for row in 0..k {
        let x = &mean + &l * DVector::from_fn(3, |_, _| rng::normal(&mut r));
        for c in 0..3 {
            samples[[row, c]] = x[c];
        }
    }
    let posterior = EpinetPosterior {
        ids: ids(3),
        base_predictions: mean.iter().copied().collect(),
        samples,
    };
    GaussianFixture { mean, cov, posterior }
}

/// Closed-form mean and covariance after observing `y = x[c] + e`, `e ~ N(0, σ²)`.
pub fn gaussian_condition(mean: &DVector<f64>, cov: &DMatrix<f64>, c: usize, y: f64, sigma: f64) -> (DVector<f64>, DMatrix<f64>) {
    let s = cov[(c, c)] + sigma * sigma;
    let kx = cov.column(c).into_owned();
    (mean + &kx * ((y - mean[c]) / s), cov - &kx * kx.transpose() / s)
}
