//! Batch selection against exhaustive enumeration, pathwise conditioning
//! against closed-form Gaussian conditioning, and DMTA loop properties.

mod common;

use coarsebind::epinet::{Epinet, EpinetConfig, EpinetPosterior};
use coarsebind::rng;
use coarsebind::select::{
    decode_pool, dmta_csv, dmta_simulate, emax, emax_select, encode_pool, generate_cliff_pool, pathwise_update,
    CliffPoolConfig, DmtaConfig, ObservationNoise, Strategy,
};
use common::{exhaustive_best, gaussian_condition, gaussian_fixture, random_posterior};
use ndarray::Array2;
use rand::Rng;

#[test]
fn emax_select_matches_exhaustive_search() {
    let mut r = rng::seeded(42);
    let mut misses = Vec::new();
    for case in 0..100u64 {
        let n = r.random_range(2..=12);
        let b = r.random_range(1..=4usize.min(n));
        let p = random_posterior(1000 + case, 200, n);
        let sel = emax_select(&p, b).unwrap();
        assert_eq!(sel.indices.len(), b);
        let got = emax(p.samples.view(), &sel.indices).unwrap();
        let best = exhaustive_best(&p, b);
        if (got - best).abs() > 1e-12 * best.abs().max(1.0) {
            misses.push((case, n, b, best - got));
        }
    }
    assert!(misses.is_empty(), "suboptimal batches: {misses:?}");
}

#[test]
fn emax_grows_with_the_subset_and_ignores_order() {
    let p = random_posterior(7, 300, 6);
    let s = p.samples.view();
    let full = emax(s, &[0, 2, 3, 5]).unwrap();
    for c in [0, 2, 3, 5] {
        assert!(full >= emax(s, &[c]).unwrap());
    }
    assert_eq!(full, emax(s, &[5, 3, 0, 2]).unwrap());
    let mut reversed = p.samples.clone();
    reversed.invert_axis(ndarray::Axis(0));
    assert!((full - emax(reversed.view(), &[0, 2, 3, 5]).unwrap()).abs() < 1e-12);
    let all = emax_select(&p, 6).unwrap();
    let mut got = all.indices.clone();
    got.sort();
    assert_eq!(got, (0..6).collect::<Vec<_>>());
}

#[test]
fn independent_normal_pair_emax_is_one_over_root_pi() {
    let k = 1_000_000;
    let mut r = rng::seeded(5);
    let samples = Array2::from_shape_fn((k, 2), |_| rng::normal(&mut r));
    let v = emax(samples.view(), &[0, 1]).unwrap();
    // Var(max) = 1 − 1/π for two independent standard normals.
    let se = ((1.0 - 1.0 / std::f64::consts::PI) / k as f64).sqrt();
    let target = 1.0 / std::f64::consts::PI.sqrt();
    assert!((v - target).abs() < 3.0 * se, "{v} vs {target}");
}

#[test]
fn pathwise_update_matches_gaussian_conditioning() {
    let k = 10_000;
    let f = gaussian_fixture(k, 11);
    let (mean, p) = (f.mean.clone(), f.posterior);
    let (sigma, y_obs) = (0.5, 0.2);
    let q = pathwise_update(&p, &[(0, y_obs)], sigma, ObservationNoise::Sampled(3)).unwrap();

    let (post_mean, post_cov) = gaussian_condition(&f.mean, &f.cov, 0, y_obs, sigma);

    let m = q.samples.mean_axis(ndarray::Axis(0)).unwrap();
    for c in 0..3 {
        let se = (post_cov[(c, c)] / k as f64).sqrt();
        assert!((m[c] - post_mean[c]).abs() < 5.0 * se + 0.02, "mean {c}: {} vs {}", m[c], post_mean[c]);
    }
    for a in 0..3 {
        for b in 0..3 {
            let emp = q.samples.column(a).iter().zip(q.samples.column(b)).map(|(x, y)| (x - m[a]) * (y - m[b])).sum::<f64>()
                / (k - 1) as f64;
            assert!((emp - post_cov[(a, b)]).abs() < 0.05, "cov ({a},{b}): {emp} vs {}", post_cov[(a, b)]);
        }
    }
    // The observed column moves toward its readout.
    assert!((m[0] - y_obs).abs() < (mean[0] - y_obs).abs());
}

#[test]
fn noiseless_update_interpolates_observed_columns() {
    let p = random_posterior(9, 100, 8);
    let obs = [(2, 1.25), (5, -0.75), (7, 0.5)];
    let q = pathwise_update(&p, &obs, 0.0, ObservationNoise::Zero).unwrap();
    for row in q.samples.rows() {
        for &(c, y) in &obs {
            assert!((row[c] - y).abs() < 1e-8);
        }
    }
}

fn small_world(seed: u64) -> (coarsebind::select::SelectionPool, EpinetPosterior) {
    let model = Epinet::new(EpinetConfig {
        latent_dim: 8,
        index_dim: 64,
        seed,
        ..Default::default()
    })
    .unwrap();
    let cfg = CliffPoolConfig {
        n_series: 10,
        per_series: 10,
        seed,
        ..Default::default()
    };
    let pool = generate_cliff_pool(&cfg, &model).unwrap();
    let p = pool.posterior(&model, 200, seed).unwrap();
    (pool, p)
}

#[test]
fn dmta_runs_are_deterministic_and_monotone() {
    let (pool, p) = small_world(1);
    let cfg = DmtaConfig {
        cycles: 8,
        seed: 2,
        ..Default::default()
    };
    let strategies = [
        Strategy::Greedy,
        Strategy::ContinualGreedy,
        Strategy::ContinualEmax,
        Strategy::StaticExternal(pool.items().iter().map(|i| -i.y_base).collect()),
    ];
    for s in &strategies {
        let a = dmta_simulate(&pool, &p, s, &cfg).unwrap();
        assert_eq!(a, dmta_simulate(&pool, &p, s, &cfg).unwrap());
        assert_eq!(a.max_gap.len(), 8);
        assert!(a.max_gap.windows(2).all(|w| w[1] <= w[0]), "{}", a.strategy);
        assert!(a.max_gap.iter().all(|g| *g >= 0.0));
        let mut seen: Vec<&String> = a.selected.iter().flatten().collect();
        let n = seen.len();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), n, "an item was selected twice");
    }
    let oracle = dmta_simulate(&pool, &p, &Strategy::Oracle, &cfg).unwrap();
    assert_eq!(oracle.max_gap[0], 0.0);
}

#[test]
fn dmta_stops_when_the_pool_runs_out() {
    let (pool, p) = small_world(2);
    let cfg = DmtaConfig {
        cycles: 30,
        batch_size: 7,
        ..Default::default()
    };
    let s = dmta_simulate(&pool, &p, &Strategy::Greedy, &cfg).unwrap();
    assert!(s.exhausted);
    assert_eq!(s.selected.iter().map(Vec::len).sum::<usize>(), 100);
    assert_eq!(*s.max_gap.last().unwrap(), 0.0);
}

#[test]
fn dmta_csv_and_pool_file() {
    let (pool, p) = small_world(3);
    let cfg = DmtaConfig {
        cycles: 2,
        ..Default::default()
    };
    let run = dmta_simulate(&pool, &p, &Strategy::Greedy, &cfg).unwrap();
    let text = String::from_utf8(dmta_csv(&[run.clone()]).unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "cycle,strategy,selected_ids,max_gap");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with(&format!("1,greedy,{}", run.selected[0].join(";"))));
    let bytes = encode_pool(&pool).unwrap();
    let back = decode_pool(&bytes).unwrap();
    assert_eq!(encode_pool(&back).unwrap(), bytes);
}
