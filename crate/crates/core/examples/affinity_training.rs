//! Trains the affinity head on synthetic assays with per-assay offsets and
//! cross-paired decoys, then reports intra-assay correlation and decoy AUROC
//! on held-out compounds.
//!
//! Usage: `cargo run --release --example affinity_training [steps] [seed] [quant|binary]`

use std::collections::BTreeMap;
use std::time::Instant;

use coarsebind::affinity::{
    auroc, generate_assays, pearson, train_affinity, AffinityConfig, AffinityInputs, AffinityModel,
    AffinityTrainConfig, AssayGenConfig, AssayRecord, LabelKind,
};
use coarsebind::pairformer::{Pairformer, PairformerConfig};
use coarsebind::pocket::{pocket_residues, POCKET_CUTOFF};

fn main() -> coarsebind::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let only: Option<LabelKind> = match args.get(3).map(String::as_str) {
        Some("quant") => Some(LabelKind::Continuous),
        Some("binary") => Some(LabelKind::Binary),
        _ => None,
    };

    let gen = AssayGenConfig {
        binary: true,
        compounds_per_assay: 64,
        seed,
        ..Default::default()
    };
    let data = generate_assays(&gen)?;
    let trunk = Pairformer::new(PairformerConfig {
        embedding_dim: gen.embedding_dim,
        channels: 8,
        n_layers: 1,
        n_heads: 2,
        transition_factor: 2,
        seed,
    })?;
    let t0 = Instant::now();
    let mut inputs = BTreeMap::new();
    for c in &data.complexes {
        let pocket = pocket_residues(&c.true_distances()?, &c.kinds(), POCKET_CUTOFF)?;
        inputs.insert(c.id.clone(), AffinityInputs::with_pocket(c, &trunk, Some(&pocket))?);
    }
    println!("featurized {} complexes in {:.1}s", inputs.len(), t0.elapsed().as_secs_f64());

    // Every fourth complex is held out.
    let held: std::collections::BTreeSet<&str> =
        data.complexes.iter().skip(3).step_by(4).map(|c| c.id.as_str()).collect();
    let (test, train): (Vec<AssayRecord>, Vec<AssayRecord>) =
        data.records
            .iter()
            .filter(|r| only.is_none_or(|k| r.label_kind == k))
            .cloned()
            .partition(|r| held.contains(r.complex_id.as_str()));

    let continuous: Vec<f64> =
        train.iter().filter(|r| r.label_kind == LabelKind::Continuous).map(|r| r.value).collect();
    let center = if continuous.is_empty() { 0.0 } else { continuous.iter().sum::<f64>() / continuous.len() as f64 };
    let model = AffinityModel::new(AffinityConfig {
        latent_dim: 8,
        embedding_dim: gen.embedding_dim,
        channels: 8,
        n_heads: 2,
        hidden: 16,
        target_center: center,
        seed,
        ..Default::default()
    })?;
    let t0 = Instant::now();
    let (model, log) = train_affinity(
        model,
        &train,
        &inputs,
        &AffinityTrainConfig {
            steps,
            learning_rate: 3e-3,
            seed,
            ..Default::default()
        },
    )?;
    println!("trained {steps} steps in {:.1}s", t0.elapsed().as_secs_f64());
    let tail: Vec<f64> = log.losses.iter().rev().take(50).copied().filter(|v| v.is_finite()).collect();
    println!("mean loss over last 50 steps: {:.4}", tail.iter().sum::<f64>() / tail.len().max(1) as f64);

    let mut by_assay: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in &test {
        let out = model.forward(&inputs[&r.complex_id])?;
        match r.label_kind {
            LabelKind::Continuous => {
                let e = by_assay.entry(&r.assay_id).or_default();
                e.0.push(r.value);
                e.1.push(out.y_hat);
            }
            LabelKind::Binary => {
                scores.push(out.p_bind);
                labels.push(r.is_positive());
            }
        }
    }
    for (assay, (y, yh)) in &by_assay {
        println!("{assay}: held-out Pearson r = {:.3}", pearson(y, yh).unwrap_or(f64::NAN));
    }
    println!("held-out AUROC (binders vs decoys) = {:.3}", auroc(&scores, &labels).unwrap_or(f64::NAN));
    Ok(())
}
