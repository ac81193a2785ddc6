//! Pocket context statistics and budgeted cropping.
//!
//!     cargo run --release --example pocket_crop -- [n_complexes=500] [budget=196] [seed=0]
//!
//! Prints a histogram of ligand+pocket token counts at the 15 Å cutoff, then
//! crops a large complex to the budget and reports where the kept tokens came from.

use coarsebind::complex::{generate_synthetic_complex, Geometry, SyntheticGenConfig};
use coarsebind::pocket::{context_size, crop, pocket_residues, Provenance, INITIAL_POCKET_CUTOFF, POCKET_CUTOFF};
use coarsebind::rng;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = arg(1, 500);
    let budget: usize = arg(2, 196);
    let seed: u64 = arg(3, 0);

    let mut sizes = Vec::with_capacity(n);
    let mut r = rng::seeded(seed);
    for i in 0..n {
        use rand::Rng;
        let c = generate_synthetic_complex(&SyntheticGenConfig {
            n_ligand: r.random_range(8..40),
            n_protein: r.random_range(100..400),
            embedding_dim: 4,
            seed: rng::indexed(seed, i as u64),
            ..Default::default()
        });
        sizes.push(context_size(&c.true_distances()?, &c.kinds(), POCKET_CUTOFF)?);
    }
    let width = 25;
    let top = sizes.iter().max().copied().unwrap_or(0);
    println!("ligand + 15 Å pocket tokens over {n} complexes");
    for lo in (0..=top).step_by(width) {
        let count = sizes.iter().filter(|&&s| s >= lo && s < lo + width).count();
        println!("{lo:>4}-{:<4} {count:>5} {}", lo + width - 1, "#".repeat((count * 60).div_ceil(n.max(1))));
    }
    let over = sizes.iter().filter(|&&s| s > 200).count();
    println!("above 200 tokens: {over}/{n}");

    let c = generate_synthetic_complex(&SyntheticGenConfig {
        n_ligand: 30,
        n_protein: 600,
        embedding_dim: 4,
        geometry: Geometry::FoldedBlob,
        seed,
        ..Default::default()
    });
    let d = c.true_distances()?;
    let pocket = pocket_residues(&d, &c.kinds(), INITIAL_POCKET_CUTOFF)?;
    let out = crop(&c, budget, &pocket, &d)?;
    let count = |p: Provenance| out.provenance.iter().filter(|&&q| q == p).count();
    println!(
        "\n{} tokens, {} in the 22 Å pocket; crop to {budget} keeps {} (ligand {}, pocket {}, expansion {})",
        c.len(),
        pocket.len(),
        out.len(),
        count(Provenance::Ligand),
        count(Provenance::Pocket),
        count(Provenance::Expansion)
    );
    let cropped = out.apply(&c);
    println!("cropped complex: {} tokens, {} bonds", cropped.len(), cropped.bonds.len());
    Ok(())
}
