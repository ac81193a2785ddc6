//! Epistemic network over frozen complex latents.
//!
//! The residual `r(g, z) = (⟨f_θ(g, z), z⟩ + β⟨f_φ(g, z), z⟩) / √I` adds to a base
//! affinity prediction. `f_θ` is trained; `f_φ` is a prior network frozen at
//! its seeded initialization. Drawing one index `z` per posterior row and
//! sharing it across complexes gives joint sample paths.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::{huber, huber_grad, sample_batch, AssayRecord, LabelKind, HUBER_DELTA};
use crate::codec;
use crate::error::{Error, Result};
use crate::metrics::{binned_calibration, CalibrationReport};
use crate::nn::{join, Adam, DivergenceGuard, Mat, Mlp, Params};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpinetConfig {
    pub latent_dim: usize,
    pub index_dim: usize,
    pub hidden: Vec<usize>,
    /// β, the weight of the frozen prior.
    pub prior_scale: f64,
    /// Feed the index to the MLP body as well as the final inner product.
    pub index_in_body: bool,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for EpinetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            index_dim: 256,
            hidden: vec![64],
            prior_scale: 1.0,
            index_in_body: false,
            n_samples: 1000,
            seed: 0,
        }
    }
}

impl EpinetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.index_dim == 0 || self.n_samples == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("epinet dimensions and sample count must be >= 1".into()));
        }
        if !self.prior_scale.is_finite() {
            return Err(Error::Config("prior_scale must be finite".into()));
        }
        Ok(())
    }

    fn body_input(&self) -> usize {
        self.latent_dim + if self.index_in_body { self.index_dim } else { 0 }
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.body_input()];
        s.extend(&self.hidden);
        s.push(self.index_dim);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epinet {
    pub config: EpinetConfig,
    pub learner: Mlp,
    /// Never updated by training.
    pub prior: Mlp,
}

/// Rescale the first layer so the latent block and the index block each
/// contribute half the pre-activation variance, however wide the index is.
fn balance_first_layer(mlp: &mut Mlp, latent_dim: usize) {
    let w = &mut mlp.layers[0].w;
    let fan_in = w.nrows() as f64;
    let index_dim = w.nrows() - latent_dim;
    let g_scale = (fan_in / (2.0 * latent_dim as f64)).sqrt();
    let z_scale = (fan_in / (2.0 * index_dim as f64)).sqrt();
    for (i, mut row) in w.rows_mut().into_iter().enumerate() {
        row *= if i < latent_dim { g_scale } else { z_scale };
    }
}

pub const EPINET_CHECKPOINT_KIND: &str = "epinet";

impl Epinet {
    pub fn new(config: EpinetConfig) -> Result<Self> {
        config.validate()?;
        let sizes = config.sizes();
        let mut lrng = rng::seeded(rng::substream(config.seed, "epinet-learner"));
        let mut prng = rng::seeded(rng::substream(config.seed, "epinet-prior"));
        let mut learner = Mlp::new(&sizes, 0.0, &mut lrng);
        let mut prior = Mlp::new(&sizes, 1.0, &mut prng);
        if config.index_in_body {
            balance_first_layer(&mut learner, config.latent_dim);
            balance_first_layer(&mut prior, config.latent_dim);
        }
        Ok(Self { config, learner, prior })
    }

    fn body_rows(&self, g: ArrayView2<f64>, z: &[f64]) -> Mat {
        if self.config.index_in_body {
            let zs = Array2::from_shape_fn((g.nrows(), z.len()), |(_, k)| z[k]);
            concatenate![Axis(1), g, zs]
        } else {
            g.to_owned()
        }
    }

    fn check(&self, g: ArrayView2<f64>, z: &[f64]) -> Result<()> {
        if g.ncols() != self.config.latent_dim || z.len() != self.config.index_dim {
            return Err(Error::invalid(format!(
                "epinet expects latents of width {} and indices of width {}",
                self.config.latent_dim, self.config.index_dim
            )));
        }
        Ok(())
    }

    /// Residuals for the rows of `g` under one shared index `z`.
    pub fn residuals(&self, g: ArrayView2<f64>, z: &[f64]) -> Result<Vec<f64>> {
        self.check(g, z)?;
        let x = self.body_rows(g, z);
        let a = self.learner.forward(x.view());
        let p = self.prior.forward(x.view());
        let beta = self.config.prior_scale;
        let norm = self.head_norm();
        Ok((0..g.nrows())
            .map(|n| norm * (0..z.len()).map(|k| (a[[n, k]] + beta * p[[n, k]]) * z[k]).sum::<f64>())
            .collect())
    }

    /// `1/√I`, keeping the residual scale independent of the index width.
    fn head_norm(&self) -> f64 {
        1.0 / (self.config.index_dim as f64).sqrt()
    }

    /// Residual of a single latent.
    pub fn forward(&self, g: &[f64], z: &[f64]) -> Result<f64> {
        let row = ArrayView2::from_shape((1, g.len()), g).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.residuals(row, z)?[0])
    }

    /// Loss and learner gradient for a batch under one index.
    fn batch_gradient(&self, g: ArrayView2<f64>, y_tb: &[f64], y: &[f64], z: &[f64]) -> (f64, Mlp) {
        let x = self.body_rows(g, z);
        let (a, cache) = self.learner.forward_cached(x.view());
        let p = self.prior.forward(x.view());
        let beta = self.config.prior_scale;
        let norm = self.head_norm();
        let b = g.nrows() as f64;
        let mut loss = 0.0;
        let mut dout = Array2::zeros(a.raw_dim());
        for n in 0..g.nrows() {
            let r = norm * (0..z.len()).map(|k| (a[[n, k]] + beta * p[[n, k]]) * z[k]).sum::<f64>();
            let res = y_tb[n] + r - y[n];
            loss += huber(res, HUBER_DELTA) / b;
            let d = huber_grad(res, HUBER_DELTA) / b;
            for k in 0..z.len() {
                dout[[n, k]] = d * norm * z[k];
            }
        }
        let mut grad = self.learner.zeros_like();
        self.learner.backward(&cache, dout.view(), &mut grad);
        (loss, grad)
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Result<Vec<u8>> {
        crate::nn::encode_checkpoint(EPINET_CHECKPOINT_KIND, &self.config, metadata, self)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let ck = crate::nn::decode_checkpoint(bytes)?;
        ck.expect_kind(EPINET_CHECKPOINT_KIND)?;
        let config: EpinetConfig = ck.config()?;
        let mut model = Self::new(config).map_err(|e| Error::parse(0, e.to_string()))?;
        ck.load_into(&mut model)?;
        Ok(model)
    }
}

impl Params for Epinet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.learner.collect(&join(prefix, "learner"), out);
        self.prior.collect(&join(prefix, "prior"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.learner.collect_mut(out);
        self.prior.collect_mut(out);
    }
}

/// The `k`-th epistemic index of a stream; row `k` never depends on how many
/// rows are drawn.
pub fn index_vector(seed: u64, k: u64, dim: usize) -> Vec<f64> {
    let mut r = rng::seeded(rng::indexed(rng::substream(seed, "epinet-index"), k));
    rng::normal_vec(&mut r, dim)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// A continuous record with its frozen latent and base prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpinetExample {
    pub assay_id: String,
    pub g: Vec<f64>,
    pub y_base: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpinetTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EpinetTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Fits the learner with the assay sampler (five records per batch) and one
/// fresh index per step shared across the batch. The prior is untouched.
pub fn train_epinet(mut model: Epinet, data: &[EpinetExample], cfg: &EpinetTrainConfig) -> Result<(Epinet, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::invalid("epinet training needs examples"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    let d = model.config.latent_dim;
    if data.iter().any(|e| e.g.len() != d || !e.y.is_finite() || !e.y_base.is_finite()) {
        return Err(Error::invalid(format!("every example needs a finite {d}-wide latent and labels")));
    }
    let records: Vec<AssayRecord> = data
        .iter()
        .enumerate()
        .map(|(i, e)| AssayRecord {
            assay_id: e.assay_id.clone(),
            complex_id: i.to_string(),
            label_kind: LabelKind::Continuous,
            value: e.y,
            h_lp: None,
        })
        .collect();
    let stream = rng::substream(cfg.seed, "epinet-train");
    let mut rng = rng::seeded(stream);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut guard = DivergenceGuard::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(&records, LabelKind::Continuous, &mut rng)?;
        let g = Array2::from_shape_fn((batch.records.len(), d), |(n, k)| data[batch.records[n]].g[k]);
        let y_tb: Vec<f64> = batch.records.iter().map(|&i| data[i].y_base).collect();
        let y: Vec<f64> = batch.records.iter().map(|&i| data[i].y).collect();
        let z = index_vector(stream, step as u64, model.config.index_dim);
        let (loss, grad) = model.batch_gradient(g.view(), &y_tb, &y, &z);
        opt.step(&mut model.learner, &grad);
        if !model.learner.all_finite() {
            return Err(Error::Numeric {
                layer: usize::MAX,
                message: "epinet parameters became non-finite".into(),
            });
        }
        guard.observe(step, loss)?;
        losses.push(loss);
    }
    Ok((model, losses))
}

// ---------------------------------------------------------------------------
// Posterior sampling and statistics
// ---------------------------------------------------------------------------

/// `K × N` joint samples; row `k` uses one index for every complex.
#[derive(Debug, Clone, PartialEq)]
pub struct EpinetPosterior {
    pub ids: Vec<String>,
    pub base_predictions: Vec<f64>,
    pub samples: Array2<f64>,
}

impl EpinetPosterior {
    pub fn n_paths(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.samples.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.samples.ncols();
        if self.ids.len() != n || self.base_predictions.len() != n {
            return Err(Error::invalid("posterior ids and base predictions must match its columns"));
        }
        if self.samples.iter().chain(&self.base_predictions).any(|v| !v.is_finite()) {
            return Err(Error::invalid("posterior values must be finite"));
        }
        Ok(())
    }

    /// Keeps the listed columns in order.
    pub fn columns(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            base_predictions: idx.iter().map(|&i| self.base_predictions[i]).collect(),
            samples: self.samples.select(Axis(1), idx),
        }
    }
}

/// Draws `k` joint sample paths over the latents `g` (one row per complex).
pub fn sample_posterior(
    model: &Epinet,
    ids: &[String],
    g: ArrayView2<f64>,
    y_base: &[f64],
    k: usize,
    seed: u64,
) -> Result<EpinetPosterior> {
    let n = g.nrows();
    if ids.len() != n || y_base.len() != n {
        return Err(Error::invalid("ids, latents and base predictions differ in length"));
    }
    if k == 0 {
        return Err(Error::invalid("posterior needs at least one sample path"));
    }
    let rows: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|row| {
            let z = index_vector(seed, row as u64, model.config.index_dim);
            model.residuals(g, &z)
        })
        .collect::<Result<_>>()?;
    let samples = Array2::from_shape_fn((k, n), |(r, c)| y_base[c] + rows[r][c]);
    Ok(EpinetPosterior {
        ids: ids.to_vec(),
        base_predictions: y_base.to_vec(),
        samples,
    })
}

/// Quantile by linear interpolation between order statistics (position
/// `q·(n−1)` in the sorted sample).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalStats {
    pub mean: f64,
    /// Sample standard deviation (divisor K − 1; 0 for a single path).
    pub std: f64,
    /// Q3 − Q1; absent below four paths.
    pub iqr: Option<f64>,
}

pub fn marginal_stats(p: &EpinetPosterior, column: usize) -> Result<MarginalStats> {
    if column >= p.n_items() {
        return Err(Error::invalid(format!("column {column} is out of range")));
    }
    let mut col: Vec<f64> = p.samples.column(column).to_vec();
    let k = col.len();
    let mean = col.iter().sum::<f64>() / k as f64;
    let std = if k > 1 {
        (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    col.sort_by(f64::total_cmp);
    let iqr = (k >= 4).then(|| quantile(&col, 0.75) - quantile(&col, 0.25));
    Ok(MarginalStats { mean, std, iqr })
}

pub const SUCCESS_WINDOW: f64 = 1.0;

/// Success (`|prediction − truth| ≤ 1` log unit) rate per IQR bin.
pub fn iqr_calibration(predictions: &[f64], truths: &[f64], iqrs: &[f64], edges: &[f64]) -> Result<CalibrationReport> {
    if predictions.len() != truths.len() || truths.len() != iqrs.len() {
        return Err(Error::invalid("predictions, truths and IQRs differ in length"));
    }
    let success: Vec<bool> = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).abs() <= SUCCESS_WINDOW)
        .collect();
    binned_calibration(iqrs, &success, edges)
}

/// `n_bins` equal-count bin edges over `values`, from min to max.
pub fn quantile_edges(values: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() || n_bins == 0 {
        return Err(Error::invalid("quantile edges need values and at least one bin"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (0..=n_bins).map(|b| quantile(&v, b as f64 / n_bins as f64)).collect();
    edges.dedup();
    if edges.len() < 2 {
        return Err(Error::invalid("values are constant; no bins to form"));
    }
    Ok(edges)
}

// ---------------------------------------------------------------------------
// Posterior file: JSON header line, then base64 little-endian f32 K×N row-major.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosteriorHeader {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    ids: Vec<String>,
    base_predictions: Vec<f64>,
    dtype: String,
}

pub fn encode_posterior(p: &EpinetPosterior) -> Result<Vec<u8>> {
    p.validate()?;
    let header = PosteriorHeader {
        k: p.n_paths(),
        n: p.n_items(),
        ids: p.ids.clone(),
        base_predictions: p.base_predictions.clone(),
        dtype: "f32".into(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(codec::encode_f32(p.samples.iter().copied()).as_bytes());
    out.push(b'\n');
    Ok(out)
}

pub fn decode_posterior(bytes: &[u8]) -> Result<EpinetPosterior> {
    let (header, payload, offset) = codec::split_header(bytes)?;
    let h: PosteriorHeader = codec::parse_header(header)?;
    if h.dtype != "f32" {
        return Err(Error::parse(0, "unsupported dtype"));
    }
    if h.ids.len() != h.n || h.base_predictions.len() != h.n {
        return Err(Error::parse(0, "ids and base_predictions must have N entries"));
    }
    let count = h.k.checked_mul(h.n).ok_or_else(|| Error::parse(0, "K × N overflows"))?;
    let values = codec::decode_f32(payload, count, offset)?;
    let p = EpinetPosterior {
        ids: h.ids,
        base_predictions: h.base_predictions,
        samples: Array2::from_shape_vec((h.k, h.n), values).map_err(|e| Error::parse(offset, e.to_string()))?,
    };
    p.validate().map_err(|e| Error::parse(0, e.to_string()))?;
    Ok(p)
}

/// Toy regression data for exercising the epinet: latents near the origin
/// and a linear base predictor that is accurate there but misses a
/// quadratic term that dominates far from the training cloud.
pub fn toy_examples(n: usize, latent_dim: usize, n_assays: usize, seed: u64) -> Vec<EpinetExample> {
    let mut r = rng::seeded(rng::substream(seed, "epinet-toy"));
    (0..n)
        .map(|i| {
            let g: Vec<f64> = (0..latent_dim).map(|_| rng::normal(&mut r)).collect();
            let truth = toy_truth(&g);
            EpinetExample {
                assay_id: format!("assay{}", i % n_assays.max(1)),
                y_base: toy_base(&g),
                y: truth + 0.05 * rng::normal(&mut r),
                g,
            }
        })
        .collect()
}

pub fn toy_base(g: &[f64]) -> f64 {
    6.0 + g[0]
}

pub fn toy_truth(g: &[f64]) -> f64 {
    toy_base(g) + 0.05 * g.iter().map(|v| v * v - 1.0).sum::<f64>()
}

/// A latent far from the toy training distribution, at radius `3√d`.
pub fn toy_far_latent(latent_dim: usize, r: &mut impl Rng) -> Vec<f64> {
    let u: Vec<f64> = (0..latent_dim).map(|_| rng::normal(r)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let radius = 3.0 * (latent_dim as f64).sqrt();
    u.iter().map(|v| radius * v / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(index_in_body: bool) -> Epinet {
        Epinet::new(EpinetConfig {
            latent_dim: 3,
            index_dim: 8,
            hidden: vec![16],
            index_in_body,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_index_gives_zero_residual() {
        let m = small(true);
        assert_eq!(m.forward(&[0.3, -1.0, 2.0], &[0.0; 8]).unwrap(), 0.0);
    }

    #[test]
    fn residual_is_linear_in_the_index() {
        let m = small(false);
        let g = [0.3, -1.0, 2.0];
        let z: Vec<f64> = (0..8).map(|k| (k as f64 * 0.7).sin()).collect();
        let z2: Vec<f64> = z.iter().map(|v| -2.5 * v).collect();
        let a = m.forward(&g, &z).unwrap();
        let b = m.forward(&g, &z2).unwrap();
        assert!((b + 2.5 * a).abs() < 1e-12);
        assert!(a.abs() > 1e-6, "random prior should contribute");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = small(true);
        assert!(m.forward(&[0.0; 2], &[0.0; 8]).is_err());
        assert!(m.forward(&[0.0; 3], &[0.0; 7]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
        let iqr = quantile(&v, 0.75) - quantile(&v, 0.25);
        assert!((iqr - 0.4995).abs() < 1e-12);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
    }

    #[test]
    fn constant_column_has_zero_spread() {
        let p = EpinetPosterior {
            ids: vec!["a".into()],
            base_predictions: vec![1.0],
            samples: Array2::from_elem((10, 1), 1.0),
        };
        let s = marginal_stats(&p, 0).unwrap();
        assert_eq!((s.mean, s.std, s.iqr), (1.0, 0.0, Some(0.0)));
        let short = EpinetPosterior {
            samples: Array2::from_elem((3, 1), 1.0),
            ..p
        };
        assert_eq!(marginal_stats(&short, 0).unwrap().iqr, None);
    }
}
