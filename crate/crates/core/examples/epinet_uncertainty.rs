//! Trains an epinet on toy latents, compares posterior spread at training
//! points with far-away latents, and bins held-out success by IQR.
//!
//! Usage: `cargo run --release --example epinet_uncertainty [steps] [seed] [index_dim] [head|body] [lr]`

use coarsebind::epinet::{
    iqr_calibration, marginal_stats, quantile_edges, sample_posterior, toy_base, toy_examples, toy_truth, train_epinet, Epinet,
    EpinetConfig, EpinetTrainConfig,
};
use coarsebind::rng;
use ndarray::Array2;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> coarsebind::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let index_dim: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(256);
    let index_in_body = args.get(4).is_some_and(|s| s == "body");
    let learning_rate: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let d = 4;

    let train = toy_examples(200, d, 8, seed);
    let model = Epinet::new(EpinetConfig {
        latent_dim: d,
        index_dim,
        index_in_body,
        seed,
        ..Default::default()
    })?;
    let prior_before = model.prior.clone();
    let t0 = std::time::Instant::now();
    let (model, losses) = train_epinet(
        model,
        &train,
        &EpinetTrainConfig {
            steps,
            learning_rate,
            seed,
        },
    )?;
    let head = losses[..50].iter().sum::<f64>() / 50.0;
    let tail = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
    println!(
        "trained {steps} steps in {:.1}s; loss {head:.4} -> {tail:.4}; prior unchanged: {}",
        t0.elapsed().as_secs_f64(),
        model.prior == prior_before
    );

    let mut r = rng::seeded(rng::substream(seed, "example-far"));
    let near: Vec<Vec<f64>> = train.iter().take(100).map(|e| e.g.clone()).collect();
    let far: Vec<Vec<f64>> = (0..100).map(|_| coarsebind::epinet::toy_far_latent(d, &mut r)).collect();
    let spread = |gs: &[Vec<f64>]| -> coarsebind::Result<Vec<f64>> {
        let g = Array2::from_shape_fn((gs.len(), d), |(i, k)| gs[i][k]);
        let ids: Vec<String> = (0..gs.len()).map(|i| i.to_string()).collect();
        let base: Vec<f64> = gs.iter().map(|x| toy_base(x)).collect();
        let p = sample_posterior(&model, &ids, g.view(), &base, 500, seed)?;
        (0..gs.len()).map(|c| Ok(marginal_stats(&p, c)?.std)).collect()
    };
    println!("median std at training latents: {:.4}", median(spread(&near)?));
    println!("median std at far latents:      {:.4}", median(spread(&far)?));

    // Held-out latents at mixed distances from the training cloud.
    let test: Vec<Vec<f64>> = (0..300)
        .map(|i| {
            let scale = 0.5 + 2.0 * (i as f64 / 300.0);
            (0..d).map(|_| scale * rng::normal(&mut r)).collect()
        })
        .collect();
    let g = Array2::from_shape_fn((test.len(), d), |(i, k)| test[i][k]);
    let ids: Vec<String> = (0..test.len()).map(|i| i.to_string()).collect();
    let base: Vec<f64> = test.iter().map(|x| toy_base(x)).collect();
    let p = sample_posterior(&model, &ids, g.view(), &base, 500, seed)?;
    let stats: Vec<_> = (0..test.len()).map(|c| marginal_stats(&p, c)).collect::<coarsebind::Result<_>>()?;
    let preds: Vec<f64> = stats.iter().map(|s| s.mean).collect();
    let iqrs: Vec<f64> = stats.iter().map(|s| s.iqr.unwrap_or(0.0)).collect();
    let truths: Vec<f64> = test.iter().map(|x| toy_truth(x)).collect();
    let rep = iqr_calibration(&preds, &truths, &iqrs, &quantile_edges(&iqrs, 4)?)?;
    for b in 0..rep.counts.len() {
        println!(
            "IQR [{:.3}, {:.3}): n={:3} success={}",
            rep.bin_edges[b],
            rep.bin_edges[b + 1],
            rep.counts[b],
            rep.success_rate[b].map_or("-".into(), |v| format!("{v:.2}"))
        );
    }
    Ok(())
}
