//! Simulated design-make-test-analyze campaigns on synthetic activity-cliff
//! pools, comparing static greedy picks with continual greedy and continual
//! EMAX selection. Prints the median max-gap per cycle over seeds.
//!
//! Usage: `cargo run --release --example dmta_campaign [n_seeds] [samples] [out.csv] [n_series] [per_series] [first_seed]`

use coarsebind::epinet::{Epinet, EpinetConfig};
use coarsebind::select::{dmta_csv, dmta_simulate, generate_cliff_pool, CliffPoolConfig, DmtaConfig, Strategy};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn main() -> coarsebind::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let k: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let out = args.get(3).filter(|s| !s.is_empty());
    let n_series: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(CliffPoolConfig::default().n_series);
    let first_seed: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0);
    let per_series: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(CliffPoolConfig::default().per_series);

    let strategies = [Strategy::Greedy, Strategy::ContinualGreedy, Strategy::ContinualEmax];
    let cfg = DmtaConfig::default();
    let mut gaps: Vec<Vec<Vec<f64>>> = vec![Vec::new(); strategies.len()];
    let mut runs = Vec::new();
    let t0 = std::time::Instant::now();
    for seed in first_seed..first_seed + n_seeds {
        let model = Epinet::new(EpinetConfig {
            latent_dim: 8,
            seed,
            ..Default::default()
        })?;
        let pool = generate_cliff_pool(
            &CliffPoolConfig {
                n_series,
                per_series,
                seed,
                ..Default::default()
            },
            &model,
        )?;
        let prior = pool.posterior(&model, k, seed)?;
        for (s, strategy) in strategies.iter().enumerate() {
            let run = dmta_simulate(&pool, &prior, strategy, &DmtaConfig { seed, ..cfg })?;
            gaps[s].push(run.max_gap.clone());
            if seed == first_seed {
                runs.push(run);
            }
        }
    }
    println!("{n_seeds} seeds, {k} paths, {:.1}s", t0.elapsed().as_secs_f64());
    print!("cycle");
    for s in &strategies {
        print!(" {:>17}", s.name());
    }
    println!();
    for c in 0..cfg.cycles {
        print!("{:5}", c + 1);
        for g in &gaps {
            print!(" {:17.3}", median(g.iter().map(|run| run[c]).collect()));
        }
        println!();
    }
    let last = |s: usize| -> Vec<f64> { gaps[s].iter().map(|run| *run.last().unwrap()).collect() };
    for a in 0..strategies.len() {
        for b in a + 1..strategies.len() {
            let (la, lb) = (last(a), last(b));
            let wins = la.iter().zip(&lb).filter(|(x, y)| x < y).count();
            let losses = la.iter().zip(&lb).filter(|(x, y)| x > y).count();
            println!("final gap {} vs {}: lower in {wins}, higher in {losses}", strategies[a].name(), strategies[b].name());
        }
    }
    if let Some(path) = out {
        std::fs::write(path, dmta_csv(&runs)?)?;
    }
    Ok(())
}
