//! Staged distogram training on synthetic complexes.
//!
//! Each stage fixes a step count, crop size, data mix, pair-type loss weights
//! and learning rate. Training examples are generated per step from a seeded
//! stream and cropped around the ligand with ground-truth distances.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex::{generate_synthetic_complex, Geometry, SyntheticGenConfig, TokenizedComplex};
use crate::distogram::{
    aggregate_entropy, off_diagonal_mask, structure_loss_with_grad, target_distogram, BinConfig, PairTypeWeights,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, DivergenceGuard, Params};
use crate::pairformer::{PairInput, Pairformer};
use crate::pocket::{crop_by_truth, pocket_residues, POCKET_CUTOFF};
use crate::rng;

/// Stand-ins for the structure sources of a real curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Experimental-like: folded proteins at the family's encoder quality.
    Pdb,
    /// Predicted-structure-like: helical proteins.
    Afdb,
    /// Binding-data-like: folded proteins with noisier features.
    Bindingdb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub crop_tokens: usize,
    pub data_mix: BTreeMap<DataSource, f64>,
    pub loss_weights: PairTypeWeights,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    4
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.crop_tokens < 2 || self.batch_size == 0 {
            return Err(Error::Config("stage needs steps >= 1, crop_tokens >= 2, batch_size >= 1".into()));
        }
        let total: f64 = self.data_mix.values().sum();
        if self.data_mix.values().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data_mix must be a distribution, sums to {total}")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.loss_weights.validate()
    }

    fn draw_source(&self, rng: &mut impl Rng) -> DataSource {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = DataSource::Pdb;
        for (&s, &p) in &self.data_mix {
            if p == 0.0 {
                continue;
            }
            acc += p;
            last = s;
            if u < acc {
                return s;
            }
        }
        last
    }
}

/// Size and quality ranges from which training complexes are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexFamily {
    pub n_ligand: (usize, usize),
    pub n_protein: (usize, usize),
    pub embedding_dim: usize,
    pub pocket_fraction: (f64, f64),
    pub quality: (f64, f64),
}

impl Default for ComplexFamily {
    fn default() -> Self {
        Self {
            n_ligand: (6, 12),
            n_protein: (20, 40),
            embedding_dim: 32,
            pocket_fraction: (0.4, 0.8),
            quality: (0.3, 1.0),
        }
    }
}

impl ComplexFamily {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_ligand.0 >= 1
            && self.n_ligand.0 <= self.n_ligand.1
            && self.n_protein.0 >= 1
            && self.n_protein.0 <= self.n_protein.1
            && self.pocket_fraction.0 > 0.0
            && self.pocket_fraction.0 <= self.pocket_fraction.1
            && self.pocket_fraction.1 <= 1.0
            && (0.0..=1.0).contains(&self.quality.0)
            && self.quality.0 <= self.quality.1
            && self.quality.1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid complex family {self:?}")))
        }
    }

    /// One complex from `source`, fully determined by `seed`.
    pub fn sample(&self, source: DataSource, seed: u64) -> TokenizedComplex {
        let mut r = rng::seeded(rng::substream(seed, "family"));
        let (q0, q1) = self.quality;
        let (geometry, quality) = match source {
            DataSource::Pdb => (Geometry::FoldedBlob, (q0, q1)),
            DataSource::Afdb => (Geometry::Helix, (q0, q1)),
            DataSource::Bindingdb => (Geometry::FoldedBlob, (0.7 * q0, 0.7 * q1)),
        };
        let cfg = SyntheticGenConfig {
            n_ligand: r.random_range(self.n_ligand.0..=self.n_ligand.1),
            n_protein: r.random_range(self.n_protein.0..=self.n_protein.1),
            embedding_dim: self.embedding_dim,
            geometry,
            seed,
            pocket_fraction: r.random_range(self.pocket_fraction.0..=self.pocket_fraction.1),
            quality,
        };
        generate_synthetic_complex(&cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: Vec<StageConfig>,
    pub family: ComplexFamily,
    pub seed: u64,
    /// Held-out complexes scored for mean H_LP before training and after each stage.
    pub heldout: usize,
    /// Crop size for held-out complexes.
    pub heldout_crop: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("training needs at least one stage".into()));
        }
        for s in &self.stages {
            s.validate()?;
        }
        self.family.validate()
    }
}

/// Stage proportions of a three-stage curriculum (broad pretraining,
/// interface-weighted ligand-centered training, equal-weight fine-tuning on
/// experimental-like data), scaled to `total_steps`.
pub fn desk_curriculum(total_steps: usize, crop_tokens: usize, learning_rate: f64) -> Vec<StageConfig> {
    let split = |f: f64| ((total_steps as f64 * f).round() as usize).max(1);
    let mix = |p: f64, a: f64, b: f64| {
        BTreeMap::from([(DataSource::Pdb, p), (DataSource::Afdb, a), (DataSource::Bindingdb, b)])
    };
    let wide = crop_tokens * 3 / 2;
    vec![
        StageConfig {
            steps: split(70.0 / 105.0),
            crop_tokens: wide,
            data_mix: mix(0.45, 0.25, 0.30),
            loss_weights: PairTypeWeights::equal(),
            learning_rate,
            batch_size: default_batch(),
        },
        StageConfig {
            steps: split(20.0 / 105.0),
            crop_tokens,
            data_mix: mix(0.5, 0.0, 0.5),
            loss_weights: PairTypeWeights { ll: 2.0, lp: 5.0, pp: 1.0 },
            learning_rate,
            batch_size: default_batch(),
        },
        StageConfig {
            steps: split(15.0 / 105.0),
            crop_tokens,
            data_mix: mix(1.0, 0.0, 0.0),
            loss_weights: PairTypeWeights::equal(),
            learning_rate,
            batch_size: default_batch(),
        },
    ]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Batch-mean loss at every step, all stages concatenated.
    pub losses: Vec<f64>,
    /// Stage index of every step.
    pub stage_of_step: Vec<usize>,
    /// Held-out mean H_LP before training (index 0) and after each stage.
    pub heldout_h_lp: Vec<Option<f64>>,
}

impl TrainLog {
    pub fn stage_losses(&self, stage: usize) -> Vec<f64> {
        self.losses
            .iter()
            .zip(&self.stage_of_step)
            .filter(|(_, &s)| s == stage)
            .map(|(&l, _)| l)
            .collect()
    }
}

/// Cropped held-out set drawn from the experimental-like source.
pub fn heldout_set(cfg: &TrainConfig) -> Result<Vec<TokenizedComplex>> {
    let base = rng::substream(cfg.seed, "heldout");
    (0..cfg.heldout)
        .map(|k| {
            let c = cfg.family.sample(DataSource::Pdb, rng::indexed(base, k as u64));
            crop_to(&c, cfg.heldout_crop)
        })
        .collect()
}

fn crop_to(c: &TokenizedComplex, budget: usize) -> Result<TokenizedComplex> {
    if c.len() <= budget {
        Ok(c.clone())
    } else {
        Ok(crop_by_truth(c, budget)?.apply(c))
    }
}

/// Mean H_LP over complexes whose predicted 15 Å pocket is non-empty.
pub fn mean_h_lp(model: &Pairformer, set: &[TokenizedComplex]) -> Result<Option<f64>> {
    let values: Vec<Option<f64>> = set
        .par_iter()
        .map(|c| {
            let d = model.predict(c)?;
            let pocket = pocket_residues(&d.expected_distances(), &d.token_kinds, POCKET_CUTOFF)?;
            Ok(aggregate_entropy(&d, &pocket)?.h_lp)
        })
        .collect::<Result<_>>()?;
    let present: Vec<f64> = values.into_iter().flatten().collect();
    Ok((!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64))
}

/// Loss and gradient of one complex under `weights`.
pub fn example_gradient(
    model: &Pairformer,
    c: &TokenizedComplex,
    weights: &PairTypeWeights,
) -> Result<(f64, Pairformer)> {
    let input = PairInput::from_complex(c)?;
    let targets = target_distogram(&c.true_distances()?, &BinConfig::default())?;
    let (logits, cache) = model.forward_cached(&input)?;
    let mask = off_diagonal_mask(c.len());
    let (loss, dlogits) = structure_loss_with_grad(&logits, &targets, &input.kinds, weights, &mask)?;
    Ok((loss, model.backward(&input, &cache, &dlogits)))
}

/// One optimizer step on a batch; per-example work runs in parallel and
/// gradients are reduced in batch order.
pub fn train_step(
    model: &mut Pairformer,
    opt: &mut Adam,
    batch: &[TokenizedComplex],
    weights: &PairTypeWeights,
) -> Result<f64> {
    let results: Vec<(f64, Pairformer)> = batch
        .par_iter()
        .map(|c| example_gradient(model, c, weights))
        .collect::<Result<_>>()?;
    let mut grad = model.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        grad.add_assign(g);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.scale(scale);
    opt.step(model, &grad);
    if !model.all_finite() {
        return Err(Error::Numeric {
            layer: usize::MAX,
            message: "parameters became non-finite after an update".into(),
        });
    }
    Ok(loss * scale)
}

/// Runs every stage in order. Deterministic in `cfg.seed` and the initial model.
pub fn train(model: Pairformer, cfg: &TrainConfig) -> Result<(Pairformer, TrainLog)> {
    train_with_progress(model, cfg, |_, _, _| {})
}

/// [`train`] with a callback receiving `(stage, step, loss)` after every step.
pub fn train_with_progress(
    mut model: Pairformer,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, usize, f64),
) -> Result<(Pairformer, TrainLog)> {
    cfg.validate()?;
    if cfg.family.embedding_dim != model.config.embedding_dim {
        return Err(Error::Config(format!(
            "family embedding_dim {} differs from model embedding_dim {}",
            cfg.family.embedding_dim, model.config.embedding_dim
        )));
    }
    let heldout = heldout_set(cfg)?;
    let mut log = TrainLog {
        heldout_h_lp: vec![mean_h_lp(&model, &heldout)?],
        ..Default::default()
    };
    let stream = rng::substream(cfg.seed, "train");
    let mut opt = Adam::new(cfg.stages[0].learning_rate);
    let mut guard = DivergenceGuard::default();
    let mut global = 0u64;
    for (si, stage) in cfg.stages.iter().enumerate() {
        opt.lr = stage.learning_rate;
        for step in 0..stage.steps {
            let mut pick = rng::seeded(rng::indexed(stream, global));
            let batch: Vec<TokenizedComplex> = (0..stage.batch_size)
                .map(|b| {
                    let source = stage.draw_source(&mut pick);
                    let seed = rng::indexed(rng::indexed(stream, global), b as u64 + 1);
                    crop_to(&cfg.family.sample(source, seed), stage.crop_tokens)
                })
                .collect::<Result<_>>()?;
            let loss = train_step(&mut model, &mut opt, &batch, &stage.loss_weights)?;
            guard.observe(log.losses.len(), loss)?;
            log.losses.push(loss);
            log.stage_of_step.push(si);
            progress(si, step, loss);
            global += 1;
        }
        log.heldout_h_lp.push(mean_h_lp(&model, &heldout)?);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_proportions() {
        let s = desk_curriculum(105, 32, 1e-3);
        assert_eq!(s.iter().map(|s| s.steps).collect::<Vec<_>>(), vec![70, 20, 15]);
        assert_eq!(s[1].loss_weights, PairTypeWeights { ll: 2.0, lp: 5.0, pp: 1.0 });
        assert_eq!(s[0].crop_tokens, 48);
        for st in &s {
            st.validate().unwrap();
        }
    }

    #[test]
    fn bad_mix_is_rejected() {
        let mut s = desk_curriculum(10, 32, 1e-3).remove(0);
        s.data_mix.insert(DataSource::Pdb, 0.9);
        assert!(s.validate().is_err());
    }

    #[test]
    fn source_draw_follows_mix() {
        let s = desk_curriculum(10, 32, 1e-3).remove(2);
        let mut r = rng::seeded(1);
        assert!((0..100).all(|_| s.draw_source(&mut r) == DataSource::Pdb));
    }
}
