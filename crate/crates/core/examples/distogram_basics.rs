//! Bins, expected distances, entropies and the structure loss on a toy distogram.
//!
//!     cargo run --release --example distogram_basics

use coarsebind::complex::{generate_synthetic_complex, SyntheticGenConfig};
use coarsebind::distogram::{
    aggregate_entropy, expected_distance, off_diagonal_mask, pairwise_entropy, structure_loss, target_distogram, BinConfig, Distogram,
    PairTypeWeights, N_BINS,
};
use coarsebind::pocket::{pocket_residues, POCKET_CUTOFF};
use ndarray::{Array1, Array3};

fn main() -> coarsebind::Result<()> {
    let bins = BinConfig::default();
    println!("{N_BINS} bins, interior width {:.4} Å", bins.width());
    for d in [0.5, 2.0, 7.3, 21.99, 30.0] {
        let b = bins.bin_index(d)?;
        println!("  {d:>6.2} Å -> bin {b:>2} (center {:.3} Å)", bins.bin_center(b)?);
    }

    let uniform = Array1::from_elem(N_BINS, 1.0 / N_BINS as f64);
    let mut peaked = Array1::zeros(N_BINS);
    peaked[20] = 0.5;
    peaked[21] = 0.5;
    println!(
        "uniform: expected {:.5} Å, entropy {:.3}; two-bin: expected {:.3} Å, entropy {:.4}",
        expected_distance(uniform.view(), &bins)?,
        pairwise_entropy(uniform.view())?,
        expected_distance(peaked.view(), &bins)?,
        pairwise_entropy(peaked.view())?
    );

    // A sharp distogram from true distances, then a blurred copy.
    let c = generate_synthetic_complex(&SyntheticGenConfig {
        n_ligand: 6,
        n_protein: 20,
        embedding_dim: 4,
        ..Default::default()
    });
    let d = c.true_distances()?;
    let sharp = Distogram::from_distances(&d, c.kinds(), bins)?;
    let n = c.len();
    let blurred = Array3::from_shape_fn((n, n, N_BINS), |(i, j, b)| {
        let t = bins.bin_index(d[[i, j]]).unwrap_or(0) as f64;
        -((b as f64 - t) / 3.0).powi(2)
    });
    let blurred = Distogram::from_logits(&blurred, c.kinds(), bins)?;

    let pocket = pocket_residues(&d, &c.kinds(), POCKET_CUTOFF)?;
    for (name, dg) in [("sharp", &sharp), ("blurred", &blurred)] {
        let e = aggregate_entropy(dg, &pocket)?;
        let fmt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{:.3}", v + 0.0));
        println!("{name:>8}: H_LL {} H_LP {} H_PP {}", fmt(e.h_ll), fmt(e.h_lp), fmt(e.h_pp));
    }

    let targets = target_distogram(&d, &bins)?;
    let logits = blurred.probs.mapv(f64::ln);
    for (label, w) in [("equal", PairTypeWeights::equal()), ("2:5:1", PairTypeWeights::new(2.0, 5.0, 1.0)?)] {
        println!("structure loss ({label} weights): {:.4}", structure_loss(&logits, &targets, &c.kinds(), &w, &off_diagonal_mask(n))?);
    }
    Ok(())
}
