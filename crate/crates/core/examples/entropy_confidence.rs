//! Does distogram entropy predict pose quality? Trains a small trunk, predicts
//! poses for fresh complexes and tabulates success (RMSD < 2 Å) by H_LP bin.
//!
//!     cargo run --release --example entropy_confidence -- [steps=600] [n_complexes=200] [seed=0]

use coarsebind::metrics::{entropy_calibration, ENTROPY_EDGES};
use coarsebind::pairformer::{Pairformer, PairformerConfig};
use coarsebind::pipeline::{evaluate_pose, infer, predict_pose};
use coarsebind::posegen::OptConfig;
use coarsebind::rng;
use coarsebind::training::{desk_curriculum, train, ComplexFamily, DataSource, TrainConfig};
use rayon::prelude::*;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = arg(1, 600);
    let n: usize = arg(2, 200);
    let seed: u64 = arg(3, 0);

    let family = ComplexFamily {
        n_ligand: (4, 8),
        n_protein: (16, 30),
        ..Default::default()
    };
    let model = Pairformer::new(PairformerConfig {
        embedding_dim: family.embedding_dim,
        channels: 16,
        n_layers: 2,
        seed,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        stages: desk_curriculum(steps, 24, 3e-3),
        family: family.clone(),
        seed,
        heldout: 16,
        heldout_crop: 24,
    };
    let (trunk, _) = train(model, &cfg)?;

    let eval_seed = rng::substream(seed, "entropy-eval");
    let scored: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| -> coarsebind::Result<Option<(f64, f64)>> {
            let c = family.sample(DataSource::Pdb, rng::indexed(eval_seed, i as u64));
            let inf = infer(&c, &trunk, None)?;
            let pose = predict_pose(
                &inf.distogram,
                &OptConfig {
                    seed: rng::indexed(eval_seed, i as u64),
                    ..Default::default()
                },
            )?;
            let e = evaluate_pose(&c, &inf.tokens, &inf.distogram, &pose)?;
            Ok(e.h_lp.map(|h| (h, e.rmsd_symcorr)))
        })
        .collect::<coarsebind::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let h: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let ok: Vec<bool> = scored.iter().map(|s| s.1 < 2.0).collect();
    let report = entropy_calibration(&h, &ok, &ENTROPY_EDGES)?;
    println!("{} complexes scored, {} with a pocket", n, scored.len());
    println!("{:>12} {:>6} {:>8}", "H_LP bin", "count", "success");
    for (k, count) in report.counts.iter().enumerate() {
        let rate = report.success_rate[k].map_or("-".to_string(), |r| format!("{r:.3}"));
        println!("[{:.2}, {:.2}) {count:>6} {rate:>8}", report.bin_edges[k], report.bin_edges[k + 1]);
    }
    println!("nonincreasing over occupied bins: {}", report.nonincreasing);
    Ok(())
}
