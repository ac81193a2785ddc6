//! Affinity prediction on frozen structural features.
//!
//! Trunk pair latents and bin probabilities, together with token embeddings
//! and an aggregated ligand embedding, are projected to a pair
//! representation, refined by a pair stack in which protein-protein pairs are
//! masked, mean-pooled over the unmasked pairs into a complex latent `g`, and
//! read out by a binding-likelihood head and a regression head.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex::{generate_synthetic_complex, with_ligand_identity, SyntheticEncoder, SyntheticGenConfig, TokenKind, TokenizedComplex};
use crate::codec;
use crate::distogram::{aggregate_entropy, Distogram, N_BINS};
use crate::error::{Error, Result};
use crate::nn::{join, layer_norm, layer_norm_backward, sigmoid, Adam, DivergenceGuard, Linear, Mat, Mlp, Params};
use crate::pairformer::{PairStack, Pairformer};
use crate::pocket::{pocket_residues, POCKET_CUTOFF};
use crate::rng::{self, SeededRng};

pub const CONTEXT_LIMIT: usize = 200;
pub const HUBER_DELTA: f64 = 0.5;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const PROB_CLAMP: f64 = 1e-7;
/// Records with `y` above this (potency below 1 µM) are candidates for the prefilter.
pub const POTENT_LOG_UNITS: f64 = 6.0;
pub const PREFILTER_ENTROPY: f64 = 0.7;

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// Frozen per-complex features. Nothing here receives gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityInputs {
    /// Trunk pair representation, `(N, N, C_trunk)`.
    pub pair_latents: Array3<f64>,
    /// Trunk bin probabilities, `(N, N, 64)`.
    pub bin_probs: Array3<f64>,
    /// `(N, E)`.
    pub token_embeddings: Mat,
    /// Aggregated ligand embedding, broadcast to ligand-ligand pairs.
    pub ligand_global: Vec<f64>,
    pub kinds: Vec<TokenKind>,
}

impl AffinityInputs {
    /// Runs the trunk and keeps the ligand plus the protein tokens within 15 Å
    /// of it by expected distance.
    pub fn from_trunk(c: &TokenizedComplex, trunk: &Pairformer) -> Result<Self> {
        Self::with_pocket(c, trunk, None)
    }

    /// As [`AffinityInputs::from_trunk`], with an explicit pocket (protein
    /// token indices) in place of the predicted one.
    pub fn with_pocket(c: &TokenizedComplex, trunk: &Pairformer, pocket: Option<&[usize]>) -> Result<Self> {
        let (d, pair) = trunk.predict_with_pair(c)?;
        Self::from_trunk_output(c, &d, &pair, pocket)
    }

    /// Builds inputs from a trunk run already made on `c`.
    pub fn from_trunk_output(
        c: &TokenizedComplex,
        d: &Distogram,
        pair: &Array3<f64>,
        pocket: Option<&[usize]>,
    ) -> Result<Self> {
        if d.n_tokens() != c.len() || pair.dim().0 != c.len() || pair.dim().1 != c.len() {
            return Err(Error::invalid("trunk output does not match the complex"));
        }
        let pocket = match pocket {
            Some(p) => p.to_vec(),
            None => pocket_residues(&d.expected_distances(), &d.token_kinds, POCKET_CUTOFF)?,
        };
        if pocket.iter().any(|&j| j >= c.len() || c.tokens[j].kind != TokenKind::Protein) {
            return Err(Error::invalid("pocket indices must name protein tokens"));
        }
        let mut keep = c.ligand_indices();
        keep.extend(&pocket);
        keep.sort_unstable();
        keep.dedup();
        let n = keep.len();
        let pick3 = |a: &Array3<f64>| {
            let k = a.dim().2;
            Array3::from_shape_fn((n, n, k), |(i, j, x)| a[[keep[i], keep[j], x]])
        };
        let token_embeddings =
            Array2::from_shape_fn((n, c.embedding_dim()), |(i, k)| c.tokens[keep[i]].embedding[k]);
        let ligand = c.ligand_indices();
        let e = c.embedding_dim();
        let ligand_global = (0..e)
            .map(|k| ligand.iter().map(|&i| c.tokens[i].embedding[k]).sum::<f64>() / ligand.len() as f64)
            .collect();
        Ok(Self {
            pair_latents: pick3(pair),
            bin_probs: pick3(&d.probs),
            token_embeddings,
            ligand_global,
            kinds: keep.iter().map(|&i| c.tokens[i].kind).collect(),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.kinds.len()
    }

    /// 0 for protein-protein pairs, 1 otherwise.
    pub fn pair_mask(&self) -> Array2<f64> {
        let n = self.n_tokens();
        Array2::from_shape_fn((n, n), |(i, j)| {
            let pp = self.kinds[i] == TokenKind::Protein && self.kinds[j] == TokenKind::Protein;
            if pp {
                0.0
            } else {
                1.0
            }
        })
    }

    /// Reorders tokens.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = perm.len();
        let p3 = |a: &Array3<f64>| Array3::from_shape_fn((n, n, a.dim().2), |(i, j, k)| a[[perm[i], perm[j], k]]);
        Self {
            pair_latents: p3(&self.pair_latents),
            bin_probs: p3(&self.bin_probs),
            token_embeddings: Array2::from_shape_fn(self.token_embeddings.dim(), |(i, k)| {
                self.token_embeddings[[perm[i], k]]
            }),
            ligand_global: self.ligand_global.clone(),
            kinds: perm.iter().map(|&i| self.kinds[i]).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub channels: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub transition_factor: usize,
    pub hidden: usize,
    pub context_limit: usize,
    /// Added to the regression head output; set to the training mean.
    pub target_center: f64,
    pub seed: u64,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            embedding_dim: 32,
            channels: 16,
            n_layers: 6,
            n_heads: 4,
            transition_factor: 2,
            hidden: 32,
            context_limit: CONTEXT_LIMIT,
            target_center: 0.0,
            seed: 0,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_dim,
            self.embedding_dim,
            self.channels,
            self.n_layers,
            self.n_heads,
            self.transition_factor,
            self.hidden,
            self.context_limit,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("affinity dimensions and counts must be >= 1".into()));
        }
        if self.channels % self.n_heads != 0 {
            return Err(Error::Config("channels must be divisible by n_heads".into()));
        }
        if !self.target_center.is_finite() {
            return Err(Error::Config("target_center must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub latent: Linear,
    pub bins: Linear,
    pub left: Linear,
    pub right: Linear,
    pub global: Linear,
}

impl Params for Conditioning {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.latent.collect(&join(prefix, "latent"), out);
        self.bins.collect(&join(prefix, "bins"), out);
        self.left.collect(&join(prefix, "left"), out);
        self.right.collect(&join(prefix, "right"), out);
        self.global.collect(&join(prefix, "global"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.latent.collect_mut(out);
        self.bins.collect_mut(out);
        self.left.collect_mut(out);
        self.right.collect_mut(out);
        self.global.collect_mut(out);
    }
}

fn flat(a: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (n, m, c) = a.dim();
    a.view().into_shape_with_order((n * m, c)).expect("standard layout")
}

fn is_ll(kinds: &[TokenKind], i: usize, j: usize) -> bool {
    kinds[i] == TokenKind::Ligand && kinds[j] == TokenKind::Ligand
}

impl Conditioning {
    fn new(cfg: &AffinityConfig, rng: &mut SeededRng) -> Self {
        let c = cfg.channels;
        Self {
            latent: Linear::new(cfg.latent_dim, c, 1.0, rng),
            bins: Linear::new(N_BINS, c, 1.0, rng),
            left: Linear::new(cfg.embedding_dim, c, 1.0, rng),
            right: Linear::new(cfg.embedding_dim, c, 1.0, rng),
            global: Linear::new(cfg.embedding_dim, c, 1.0, rng),
        }
    }

    fn forward(&self, x: &AffinityInputs) -> Array3<f64> {
        let n = x.n_tokens();
        let c = self.latent.fan_out();
        let pair = self.latent.forward(flat(&x.pair_latents)) + self.bins.forward(flat(&x.bin_probs));
        let mut z = pair.into_shape_with_order((n, n, c)).expect("standard layout");
        let a = self.left.forward(x.token_embeddings.view());
        let b = self.right.forward(x.token_embeddings.view());
        let g = Array2::from_shape_vec((1, x.ligand_global.len()), x.ligand_global.clone()).expect("row");
        let glob = self.global.forward(g.view());
        for i in 0..n {
            for j in 0..n {
                let mut lane = z.slice_mut(s![i, j, ..]);
                lane += &a.row(i);
                lane += &b.row(j);
                if is_ll(&x.kinds, i, j) {
                    lane += &glob.row(0);
                }
            }
        }
        z
    }

    fn backward(&self, x: &AffinityInputs, dz: &Array3<f64>, grad: &mut Conditioning) {
        let n = x.n_tokens();
        let dflat = flat(dz);
        self.latent.backward(flat(&x.pair_latents), dflat, &mut grad.latent);
        self.bins.backward(flat(&x.bin_probs), dflat, &mut grad.bins);
        self.left.backward(x.token_embeddings.view(), dz.sum_axis(Axis(1)).view(), &mut grad.left);
        self.right.backward(x.token_embeddings.view(), dz.sum_axis(Axis(0)).view(), &mut grad.right);
        let mut dglob = Array2::zeros((1, dz.dim().2));
        for i in 0..n {
            for j in 0..n {
                if is_ll(&x.kinds, i, j) {
                    let mut row = dglob.row_mut(0);
                    row += &dz.slice(s![i, j, ..]);
                }
            }
        }
        let g = Array2::from_shape_vec((1, x.ligand_global.len()), x.ligand_global.clone()).expect("row");
        self.global.backward(g.view(), dglob.view(), &mut grad.global);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityModel {
    pub config: AffinityConfig,
    pub cond: Conditioning,
    pub stack: PairStack,
    pub cls: Mlp,
    pub reg: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityOutput {
    pub p_bind: f64,
    pub logit: f64,
    pub y_hat: f64,
    /// Pooled complex latent.
    pub g: Vec<f64>,
}

pub struct AffinityCache {
    stack: crate::pairformer::StackCache,
    normed: Mat,
    inv: Vec<f64>,
    mask: Array2<f64>,
    cls: crate::nn::MlpCache,
    reg: crate::nn::MlpCache,
}

pub const AFFINITY_CHECKPOINT_KIND: &str = "affinity";

impl AffinityModel {
    pub fn new(config: AffinityConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(rng::substream(config.seed, "affinity-init"));
        let c = config.channels;
        Ok(Self {
            config,
            cond: Conditioning::new(&config, &mut rng),
            stack: PairStack::new(config.n_layers, c, config.n_heads, config.transition_factor, &mut rng),
            cls: Mlp::new(&[c, config.hidden, 1], 0.1, &mut rng),
            reg: Mlp::new(&[c, config.hidden, 1], 0.1, &mut rng),
        })
    }

    fn check(&self, x: &AffinityInputs) -> Result<()> {
        let n = x.n_tokens();
        let cfg = &self.config;
        if n == 0 {
            return Err(Error::invalid("affinity inputs have no tokens"));
        }
        if n > cfg.context_limit {
            return Err(Error::invalid(format!(
                "context of {n} tokens exceeds the limit of {}",
                cfg.context_limit
            )));
        }
        if !x.kinds.contains(&TokenKind::Ligand) {
            return Err(Error::invalid("affinity inputs need a ligand token"));
        }
        if x.pair_latents.dim() != (n, n, cfg.latent_dim)
            || x.bin_probs.dim() != (n, n, N_BINS)
            || x.token_embeddings.dim() != (n, cfg.embedding_dim)
            || x.ligand_global.len() != cfg.embedding_dim
        {
            return Err(Error::invalid("affinity input shapes do not match the model config"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &AffinityInputs) -> Result<AffinityOutput> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &AffinityInputs) -> Result<(AffinityOutput, AffinityCache)> {
        self.check(x)?;
        let n = x.n_tokens();
        let c = self.config.channels;
        let mask = x.pair_mask();
        let (z, stack) = self.stack.forward_cached(self.cond.forward(x), Some(&mask))?;
        let (normed, inv) = layer_norm(flat(&z));
        let total: f64 = mask.sum();
        let mut g = Array2::zeros((1, c));
        for (p, m) in mask.iter().enumerate() {
            if *m > 0.0 {
                let mut row = g.row_mut(0);
                row.scaled_add(m / total, &normed.row(p));
            }
        }
        debug_assert_eq!(normed.nrows(), n * n);
        let (logit, cls) = self.cls.forward_cached(g.view());
        let (y, reg) = self.reg.forward_cached(g.view());
        let logit = logit[[0, 0]];
        Ok((
            AffinityOutput {
                p_bind: sigmoid(logit),
                logit,
                y_hat: y[[0, 0]] + self.config.target_center,
                g: g.row(0).to_vec(),
            },
            AffinityCache {
                stack,
                normed,
                inv,
                mask,
                cls,
                reg,
            },
        ))
    }

    /// Parameter gradients given `dL/dlogit` and `dL/dy_hat`.
    pub fn backward(&self, x: &AffinityInputs, cache: &AffinityCache, dlogit: f64, dy: f64) -> AffinityModel {
        let n = x.n_tokens();
        let c = self.config.channels;
        let mut grad = self.zeros_like();
        let dg_cls = self.cls.backward(&cache.cls, Array2::from_elem((1, 1), dlogit).view(), &mut grad.cls);
        let dg_reg = self.reg.backward(&cache.reg, Array2::from_elem((1, 1), dy).view(), &mut grad.reg);
        let dg = dg_cls + dg_reg;
        let total: f64 = cache.mask.sum();
        let mut dnormed = Array2::zeros((n * n, c));
        for (p, m) in cache.mask.iter().enumerate() {
            if *m > 0.0 {
                dnormed.row_mut(p).scaled_add(m / total, &dg.row(0));
            }
        }
        let dz = layer_norm_backward(cache.normed.view(), &cache.inv, dnormed.view())
            .into_shape_with_order((n, n, c))
            .expect("standard layout");
        let dz = self.stack.backward(&cache.stack, dz, &mut grad.stack);
        self.cond.backward(x, &dz, &mut grad.cond);
        grad
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Result<Vec<u8>> {
        crate::nn::encode_checkpoint(AFFINITY_CHECKPOINT_KIND, &self.config, metadata, self)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let ck = crate::nn::decode_checkpoint(bytes)?;
        ck.expect_kind(AFFINITY_CHECKPOINT_KIND)?;
        let config: AffinityConfig = ck.config()?;
        let mut model = Self::new(config).map_err(|e| Error::parse(0, e.to_string()))?;
        ck.load_into(&mut model)?;
        Ok(model)
    }
}

impl Params for AffinityModel {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.cond.collect(&join(prefix, "cond"), out);
        self.stack.collect(&join(prefix, "stack"), out);
        self.cls.collect(&join(prefix, "cls"), out);
        self.reg.collect(&join(prefix, "reg"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.cond.collect_mut(out);
        self.stack.collect_mut(out);
        self.cls.collect_mut(out);
        self.reg.collect_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

pub fn huber_grad(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

/// Mean Huber loss of `y_hat - y`.
pub fn huber_loss(y: &[f64], y_hat: &[f64], delta: f64) -> f64 {
    y.iter().zip(y_hat).map(|(a, b)| huber(b - a, delta)).sum::<f64>() / y.len().max(1) as f64
}

/// Focal loss of one binding logit and its derivative in the logit.
///
/// `alpha = None` drops the class weighting; with `gamma = 0` that is
/// binary cross-entropy.
pub fn focal_with_grad(logit: f64, label: bool, alpha: Option<f64>, gamma: f64) -> (f64, f64) {
    let sign = if label { 1.0 } else { -1.0 };
    let pt = sigmoid(sign * logit).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let at = match alpha {
        Some(a) if label => a,
        Some(a) => 1.0 - a,
        None => 1.0,
    };
    let q = 1.0 - pt;
    let loss = -at * q.powf(gamma) * pt.ln();
    let dl_dpt = if gamma == 0.0 {
        -at / pt
    } else {
        -at * (-gamma * q.powf(gamma - 1.0) * pt.ln() + q.powf(gamma) / pt)
    };
    (loss, dl_dpt * sign * pt * q)
}

/// Mean focal loss over a batch of probabilities.
pub fn focal_loss(p: &[f64], labels: &[bool], alpha: Option<f64>, gamma: f64) -> f64 {
    let total: f64 = p
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            focal_with_grad((p / (1.0 - p)).ln(), y, alpha, gamma).0
        })
        .sum();
    total / p.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeLoss {
    pub loss: f64,
    /// Fewer than two records: nothing to compare.
    pub degenerate: bool,
}

/// Huber loss over every ordered pair of `(Δŷ − Δy)` within one assay.
pub fn relative_affinity_loss(y: &[f64], y_hat: &[f64], delta: f64) -> RelativeLoss {
    relative_with_grad(y, y_hat, delta).0
}

pub fn relative_with_grad(y: &[f64], y_hat: &[f64], delta: f64) -> (RelativeLoss, Vec<f64>) {
    let n = y.len();
    let mut grad = vec![0.0; n];
    if n < 2 {
        return (
            RelativeLoss {
                loss: 0.0,
                degenerate: true,
            },
            grad,
        );
    }
    let pairs = (n * (n - 1)) as f64;
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let r = (y_hat[i] - y_hat[j]) - (y[i] - y[j]);
            loss += huber(r, delta);
            let d = huber_grad(r, delta) / pairs;
            grad[i] += d;
            grad[j] -= d;
        }
    }
    (
        RelativeLoss {
            loss: loss / pairs,
            degenerate: false,
        },
        grad,
    )
}

// ---------------------------------------------------------------------------
// Records, file format, sampling and prefiltering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Continuous,
    Binary,
}

/// One measurement. Continuous values are log10 potencies (pIC50-like);
/// binary values are 0 or 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssayRecord {
    pub assay_id: String,
    pub complex_id: String,
    pub label_kind: LabelKind,
    pub value: f64,
    pub h_lp: Option<f64>,
}

impl AssayRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.value.is_finite() {
            return Err(Error::invalid(format!("record {} has a non-finite value", self.complex_id)));
        }
        if self.label_kind == LabelKind::Binary && self.value != 0.0 && self.value != 1.0 {
            return Err(Error::invalid(format!("binary record {} must be 0 or 1", self.complex_id)));
        }
        if let Some(h) = self.h_lp {
            if !(0.0..=1.0).contains(&h) {
                return Err(Error::invalid(format!("record {} has H_LP outside [0, 1]", self.complex_id)));
            }
        }
        Ok(())
    }

    pub fn is_positive(&self) -> bool {
        self.label_kind == LabelKind::Binary && self.value == 1.0
    }
}

pub fn encode_records(records: &[AssayRecord]) -> Result<Vec<u8>> {
    codec::encode_jsonl(records, AssayRecord::validate)
}

/// Parses JSON lines; blank lines are skipped.
pub fn decode_records(bytes: &[u8]) -> Result<Vec<AssayRecord>> {
    codec::decode_jsonl(bytes, AssayRecord::validate)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub assay_id: String,
    /// Indices into the record list.
    pub records: Vec<usize>,
    /// The assay had fewer records than a full batch.
    pub short: bool,
}

pub const QUANT_BATCH: usize = 5;
pub const BINARY_NEGATIVES: usize = 4;

/// Draws an assay uniformly among those eligible, then its complexes.
///
/// Quantitative batches hold five records without replacement (all of them
/// if the assay is smaller). Binary batches hold one positive and four
/// negatives from an assay that has at least that many.
pub fn sample_batch(records: &[AssayRecord], kind: LabelKind, rng: &mut impl Rng) -> Result<Batch> {
    let mut by_assay: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate().filter(|(_, r)| r.label_kind == kind) {
        by_assay.entry(r.assay_id.as_str()).or_default().push(i);
    }
    match kind {
        LabelKind::Continuous => {
            let assays: Vec<(&str, Vec<usize>)> = by_assay.into_iter().collect();
            let (id, members) = assays
                .choose(rng)
                .ok_or_else(|| Error::invalid("no continuous records to sample"))?;
            let mut picked: Vec<usize> = members.choose_multiple(rng, QUANT_BATCH).copied().collect();
            picked.sort_unstable();
            Ok(Batch {
                assay_id: id.to_string(),
                records: picked,
                short: members.len() < QUANT_BATCH,
            })
        }
        LabelKind::Binary => {
            let eligible: Vec<(&str, Vec<usize>, Vec<usize>)> = by_assay
                .into_iter()
                .map(|(id, m)| {
                    let (pos, neg): (Vec<usize>, Vec<usize>) = m.iter().partition(|&&i| records[i].is_positive());
                    (id, pos, neg)
                })
                .filter(|(_, pos, neg)| !pos.is_empty() && neg.len() >= BINARY_NEGATIVES)
                .collect();
            let (id, pos, neg) = eligible
                .choose(rng)
                .ok_or_else(|| Error::invalid("no binary assay has one positive and four negatives"))?;
            let mut picked = vec![*pos.choose(rng).expect("non-empty")];
            let mut negs: Vec<usize> = neg.choose_multiple(rng, BINARY_NEGATIVES).copied().collect();
            negs.sort_unstable();
            picked.extend(negs);
            Ok(Batch {
                assay_id: id.to_string(),
                records: picked,
                short: false,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prefiltered {
    pub kept: Vec<AssayRecord>,
    /// Complex ids of kept records that had no H_LP.
    pub missing_entropy: Vec<String>,
    pub removed: usize,
}

/// Drops potent records (< 1 µM, so `y > 6`) whose structure is uncertain
/// (`H_LP > 0.7`). Binary records carry no potency and are always kept.
pub fn prefilter(records: &[AssayRecord]) -> Prefiltered {
    let mut kept = Vec::with_capacity(records.len());
    let mut missing_entropy = Vec::new();
    let mut removed = 0;
    for r in records {
        match r.h_lp {
            None => {
                missing_entropy.push(r.complex_id.clone());
                kept.push(r.clone());
            }
            Some(h) => {
                let potent = r.label_kind == LabelKind::Continuous && r.value > POTENT_LOG_UNITS;
                if potent && h > PREFILTER_ENTROPY {
                    removed += 1;
                } else {
                    kept.push(r.clone());
                }
            }
        }
    }
    Prefiltered {
        kept,
        missing_entropy,
        removed,
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub binary: f64,
    pub absolute: f64,
    pub relative: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            binary: 1.0,
            absolute: 1.0,
            relative: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub seed: u64,
}

impl Default for AffinityTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            focal_alpha: FOCAL_ALPHA,
            focal_gamma: FOCAL_GAMMA,
            seed: 0,
        }
    }
}

/// Per-complex loss gradients for one batch: `(dL/dlogit, dL/dy_hat)` per record.
fn batch_gradients(
    kind: LabelKind,
    records: &[&AssayRecord],
    outputs: &[AffinityOutput],
    cfg: &AffinityTrainConfig,
) -> (f64, Vec<(f64, f64)>) {
    let n = records.len() as f64;
    match kind {
        LabelKind::Binary => {
            let mut loss = 0.0;
            let grads = records
                .iter()
                .zip(outputs)
                .map(|(r, o)| {
                    let (l, d) = focal_with_grad(o.logit, r.is_positive(), Some(cfg.focal_alpha), cfg.focal_gamma);
                    loss += l / n;
                    (cfg.weights.binary * d / n, 0.0)
                })
                .collect();
            (cfg.weights.binary * loss, grads)
        }
        LabelKind::Continuous => {
            let y: Vec<f64> = records.iter().map(|r| r.value).collect();
            let yh: Vec<f64> = outputs.iter().map(|o| o.y_hat).collect();
            let abs = huber_loss(&y, &yh, HUBER_DELTA);
            let (rel, drel) = relative_with_grad(&y, &yh, HUBER_DELTA);
            let grads = (0..records.len())
                .map(|i| {
                    let dabs = huber_grad(yh[i] - y[i], HUBER_DELTA) / n;
                    (0.0, cfg.weights.absolute * dabs + cfg.weights.relative * drel[i])
                })
                .collect();
            (cfg.weights.absolute * abs + cfg.weights.relative * rel.loss, grads)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AffinityTrainLog {
    pub losses: Vec<f64>,
    pub kinds: Vec<Option<LabelKind>>,
}

/// Joint training on a prefiltered dataset. Each step draws a binary or a
/// quantitative batch (uniformly between the kinds present). Inputs are
/// looked up by `complex_id` and never modified.
pub fn train_affinity(
    mut model: AffinityModel,
    records: &[AssayRecord],
    inputs: &BTreeMap<String, AffinityInputs>,
    cfg: &AffinityTrainConfig,
) -> Result<(AffinityModel, AffinityTrainLog)> {
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    for r in records {
        r.validate()?;
        if !inputs.contains_key(&r.complex_id) {
            return Err(Error::invalid(format!("no inputs for complex {}", r.complex_id)));
        }
    }
    let mut kinds: Vec<LabelKind> = records.iter().map(|r| r.label_kind).collect();
    kinds.sort_unstable();
    kinds.dedup();
    if kinds.is_empty() {
        return Err(Error::invalid("affinity training needs records"));
    }
    let mut rng = rng::seeded(rng::substream(cfg.seed, "affinity-train"));
    let mut opt = Adam::new(cfg.learning_rate);
    let mut guard = DivergenceGuard::default();
    let mut log = AffinityTrainLog::default();
    for step in 0..cfg.steps {
        let kind = *kinds.choose(&mut rng).expect("non-empty");
        let batch = match sample_batch(records, kind, &mut rng) {
            Ok(b) => b,
            Err(_) if kinds.len() > 1 => {
                log.losses.push(f64::NAN);
                log.kinds.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        let recs: Vec<&AssayRecord> = batch.records.iter().map(|&i| &records[i]).collect();
        let forward: Vec<(AffinityOutput, AffinityCache)> = recs
            .par_iter()
            .map(|r| model.forward_cached(&inputs[&r.complex_id]))
            .collect::<Result<_>>()?;
        let outputs: Vec<AffinityOutput> = forward.iter().map(|(o, _)| o.clone()).collect();
        let (loss, dout) = batch_gradients(kind, &recs, &outputs, cfg);
        let grads: Vec<AffinityModel> = recs
            .par_iter()
            .zip(forward.par_iter())
            .zip(dout.par_iter())
            .map(|((r, (_, cache)), &(dl, dy))| model.backward(&inputs[&r.complex_id], cache, dl, dy))
            .collect();
        let mut total = model.zeros_like();
        for g in &grads {
            total.add_assign(g);
        }
        opt.step(&mut model, &total);
        if !model.all_finite() {
            return Err(Error::Numeric {
                layer: usize::MAX,
                message: "affinity parameters became non-finite".into(),
            });
        }
        guard.observe(step, loss)?;
        log.losses.push(loss);
        log.kinds.push(Some(kind));
    }
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Synthetic assays
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssayGenConfig {
    pub n_targets: usize,
    pub compounds_per_assay: usize,
    pub n_ligand: usize,
    pub n_protein: usize,
    pub embedding_dim: usize,
    /// Standard deviation of the per-assay offset, log units.
    pub offset_scale: f64,
    pub noise: f64,
    /// Emit binary assays: target binders plus decoys cross-paired from other targets.
    pub binary: bool,
    pub seed: u64,
}

impl Default for AssayGenConfig {
    fn default() -> Self {
        Self {
            n_targets: 3,
            compounds_per_assay: 16,
            n_ligand: 5,
            n_protein: 10,
            embedding_dim: 16,
            offset_scale: 1.5,
            noise: 0.1,
            binary: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticAssays {
    pub complexes: Vec<TokenizedComplex>,
    pub records: Vec<AssayRecord>,
    /// Noise-free potency of every complex, without assay offsets.
    pub potency: BTreeMap<String, f64>,
}

/// Potency score of a compound against a target: the mean ligand identity
/// projected on a target-specific direction, scaled to unit variance.
fn target_score(c: &TokenizedComplex, direction: &[f64]) -> f64 {
    let range = SyntheticEncoder::new(c.embedding_dim()).identity_range();
    let ligand = c.ligand_indices();
    let mean: Vec<f64> = range
        .clone()
        .map(|k| ligand.iter().map(|&i| c.tokens[i].embedding[k]).sum::<f64>() / ligand.len() as f64)
        .collect();
    (ligand.len() as f64).sqrt() * mean.iter().zip(direction).map(|(a, b)| a * b).sum::<f64>()
}

/// Assays over a handful of synthetic targets. Every compound shares its
/// target's binding pose; potency depends on the compound's identity features
/// along a direction specific to the target. Quantitative assays add a
/// per-assay offset. Binary assays label compounds scoring above 0.5 as
/// binders, and add binders of other targets as non-binders; binders are
/// assumed target-selective, so only those that do not also bind here qualify.
pub fn generate_assays(cfg: &AssayGenConfig) -> Result<SyntheticAssays> {
    if cfg.n_targets == 0 || cfg.compounds_per_assay == 0 {
        return Err(Error::invalid("assay generation needs targets and compounds"));
    }
    let mut rng = rng::seeded(rng::substream(cfg.seed, "assays"));
    let n_id = SyntheticEncoder::new(cfg.embedding_dim).identity_range().len();
    let mut targets = Vec::new();
    let mut directions = Vec::new();
    for t in 0..cfg.n_targets {
        let base = generate_synthetic_complex(&SyntheticGenConfig {
            n_ligand: cfg.n_ligand,
            n_protein: cfg.n_protein,
            embedding_dim: cfg.embedding_dim,
            seed: rng::indexed(cfg.seed, t as u64),
            pocket_fraction: 0.6,
            ..Default::default()
        });
        let mut d = rng::normal_vec(&mut rng, n_id);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);
        targets.push(base);
        directions.push(d);
    }
    let mut out = SyntheticAssays {
        complexes: Vec::new(),
        records: Vec::new(),
        potency: BTreeMap::new(),
    };
    let mut binders: Vec<Vec<u64>> = vec![Vec::new(); cfg.n_targets];
    let mut compound = 0u64;
    for (t, base) in targets.iter().enumerate() {
        let offset = cfg.offset_scale * rng::normal(&mut rng);
        for _ in 0..cfg.compounds_per_assay {
            let seed = rng::indexed(rng::substream(cfg.seed, "compound"), compound);
            compound += 1;
            let c = with_ligand_identity(base, seed);
            let s = target_score(&c, &directions[t]);
            let potency = 6.0 + 1.5 * s;
            let measured = potency + offset + cfg.noise * rng::normal(&mut rng);
            out.potency.insert(c.id.clone(), potency);
            out.records.push(AssayRecord {
                assay_id: format!("target{t}-quant"),
                complex_id: c.id.clone(),
                label_kind: LabelKind::Continuous,
                value: measured,
                h_lp: None,
            });
            if cfg.binary {
                let bind = s > 0.5;
                if bind {
                    binders[t].push(seed);
                }
                out.records.push(AssayRecord {
                    assay_id: format!("target{t}-binary"),
                    complex_id: c.id.clone(),
                    label_kind: LabelKind::Binary,
                    value: f64::from(u8::from(bind)),
                    h_lp: None,
                });
            }
            out.complexes.push(c);
        }
    }
    if cfg.binary {
        for (t, base) in targets.iter().enumerate() {
            let mut donors: Vec<u64> = (0..cfg.n_targets)
                .filter(|&o| o != t)
                .flat_map(|o| binders[o].iter().copied())
                .collect();
            donors.shuffle(&mut rng);
            let decoys = donors
                .into_iter()
                .map(|seed| with_ligand_identity(base, seed))
                .filter(|c| target_score(c, &directions[t]) <= 0.5)
                .take(cfg.compounds_per_assay / 2);
            for mut c in decoys {
                c.id = format!("{}-decoy", c.id);
                out.potency.insert(c.id.clone(), 6.0 + 1.5 * target_score(&c, &directions[t]));
                out.records.push(AssayRecord {
                    assay_id: format!("target{t}-binary"),
                    complex_id: c.id.clone(),
                    label_kind: LabelKind::Binary,
                    value: 0.0,
                    h_lp: None,
                });
                out.complexes.push(c);
            }
        }
    }
    Ok(out)
}

/// Fills `h_lp` from the trunk's distogram of each record's complex.
pub fn annotate_entropy(
    records: &mut [AssayRecord],
    complexes: &BTreeMap<String, TokenizedComplex>,
    trunk: &Pairformer,
) -> Result<()> {
    let values: Vec<Option<f64>> = records
        .par_iter()
        .map(|r| {
            let c = complexes
                .get(&r.complex_id)
                .ok_or_else(|| Error::invalid(format!("unknown complex {}", r.complex_id)))?;
            let d = trunk.predict(c)?;
            let pocket = pocket_residues(&d.expected_distances(), &d.token_kinds, POCKET_CUTOFF)?;
            Ok(aggregate_entropy(&d, &pocket)?.h_lp)
        })
        .collect::<Result<_>>()?;
    for (r, h) in records.iter_mut().zip(values) {
        r.h_lp = h;
    }
    Ok(())
}

/// Pearson correlation; absent for fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Area under the ROC curve by pairwise comparison, ties counting half.
/// Absent unless both classes occur.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(assay: &str, id: &str, kind: LabelKind, value: f64, h: Option<f64>) -> AssayRecord {
        AssayRecord {
            assay_id: assay.into(),
            complex_id: id.into(),
            label_kind: kind,
            value,
            h_lp: h,
        }
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.0, 0.5), 0.0);
        assert!((huber(0.25, 0.5) - 0.03125).abs() < 1e-15);
        assert!((huber(2.0, 0.5) - 0.875).abs() < 1e-15);
        assert!((huber(-2.0, 0.5) - 0.875).abs() < 1e-15);
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        assert!((focal_loss(&[0.5], &[true], None, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(focal_loss(&[1.0 - 1e-9], &[true], Some(0.25), 2.0) < 1e-12);
        let (l, _) = focal_with_grad(1000.0, false, None, 0.0);
        assert!((l + PROB_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn focal_gradient_matches_difference() {
        for &(x, y) in &[(0.3, true), (-1.2, false), (2.0, false)] {
            let h = 1e-6;
            let (_, d) = focal_with_grad(x, y, Some(0.25), 2.0);
            let num = (focal_with_grad(x + h, y, Some(0.25), 2.0).0 - focal_with_grad(x - h, y, Some(0.25), 2.0).0) / (2.0 * h);
            assert!((d - num).abs() < 1e-7, "{d} vs {num}");
        }
    }

    #[test]
    fn relative_loss_ignores_offsets() {
        let y = [5.0, 6.5, 7.25];
        let shifted: Vec<f64> = y.iter().map(|v| v + 3.7).collect();
        assert_eq!(relative_affinity_loss(&y, &shifted, 0.5).loss, 0.0);
        assert!(relative_affinity_loss(&[1.0], &[2.0], 0.5).degenerate);
    }

    #[test]
    fn prefilter_truth_table() {
        let rs = vec![
            rec("a", "1", LabelKind::Continuous, 7.0, Some(0.75)),
            rec("a", "2", LabelKind::Continuous, 5.0, Some(0.9)),
            rec("a", "3", LabelKind::Continuous, 7.0, Some(0.65)),
            rec("a", "4", LabelKind::Continuous, 7.0, None),
        ];
        let out = prefilter(&rs);
        let ids: Vec<&str> = out.kept.iter().map(|r| r.complex_id.as_str()).collect();
        assert_eq!(ids, vec!["2", "3", "4"]);
        assert_eq!(out.missing_entropy, vec!["4".to_string()]);
        assert_eq!(out.removed, 1);
    }

    #[test]
    fn small_assay_gives_short_batch() {
        let rs: Vec<AssayRecord> = (0..3)
            .map(|i| rec("a", &i.to_string(), LabelKind::Continuous, 6.0, None))
            .collect();
        let b = sample_batch(&rs, LabelKind::Continuous, &mut rng::seeded(1)).unwrap();
        assert_eq!(b.records, vec![0, 1, 2]);
        assert!(b.short);
        assert!(sample_batch(&rs, LabelKind::Binary, &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn records_round_trip() {
        let rs = vec![
            rec("a", "x", LabelKind::Continuous, 6.25, Some(0.5)),
            rec("b", "y", LabelKind::Binary, 1.0, None),
        ];
        let bytes = encode_records(&rs).unwrap();
        assert_eq!(decode_records(&bytes).unwrap(), rs);
        assert!(decode_records(b"{\"assay_id\":1}\n").is_err());
        assert!(decode_records(b"{\"assay_id\":\"a\",\"complex_id\":\"x\",\"label_kind\":\"binary\",\"value\":0.5,\"h_lp\":null}").is_err());
    }
}
