//! Trains a small distogram model with a three-stage curriculum and reports
//! the loss curve and held-out ligand-pocket entropy after each stage.
//!
//! cargo run --release --example train_curriculum -- [total_steps] [seed]

use std::time::Instant;

use coarsebind::pairformer::{Pairformer, PairformerConfig};
use coarsebind::training::{desk_curriculum, train_with_progress, ComplexFamily, TrainConfig};

fn main() -> coarsebind::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let total: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let channels: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let layers: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let crop: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(24);

    let family = ComplexFamily {
        n_ligand: (4, 8),
        n_protein: (16, 30),
        embedding_dim: 32,
        ..Default::default()
    };
    let model = Pairformer::new(PairformerConfig {
        embedding_dim: family.embedding_dim,
        channels,
        n_layers: layers,
        n_heads: 4,
        transition_factor: 4,
        seed,
    })?;
    let cfg = TrainConfig {
        stages: desk_curriculum(total, crop, 3e-3),
        family,
        seed,
        heldout: 16,
        heldout_crop: crop,
    };
    let start = Instant::now();
    let (_model, log) = train_with_progress(model, &cfg, |stage, step, loss| {
        if step % 20 == 0 {
            println!("stage {stage} step {step:4} loss {loss:.4} ({:.1}s)", start.elapsed().as_secs_f64());
        }
    })?;
    let n = log.losses.len();
    let head: f64 = log.losses[..10.min(n)].iter().sum::<f64>() / 10f64.min(n as f64);
    let tail: f64 = log.losses[n.saturating_sub(20)..].iter().sum::<f64>() / 20f64.min(n as f64);
    println!("first-10 mean loss {head:.4}, last-20 mean loss {tail:.4}");
    for (i, h) in log.heldout_h_lp.iter().enumerate() {
        let label = if i == 0 { "before training".to_string() } else { format!("after stage {i}") };
        println!("held-out mean H_LP {label}: {}", h.map_or("absent".into(), |v| format!("{v:.4}")));
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
