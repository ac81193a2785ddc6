//! Distance binning, categorical distograms, expected distances, normalized
//! entropy confidence and the pair-type-weighted cross-entropy loss.
//!
//! Bins are zero-indexed: bin 0 is the covalent bin (< 2 Å), bins 1..=62 are
//! the evenly spaced interior bins on [2, 22) Å (left-closed, right-open), and
//! bin 63 collects everything at or beyond 22 Å.

use ndarray::{Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::complex::TokenKind;
use crate::error::{Error, Result};

pub const N_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinConfig {
    pub lower: f64,
    pub upper: f64,
    pub c1: f64,
    pub c64: f64,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            lower: 2.0,
            upper: 22.0,
            c1: 1.5,
            c64: 24.5,
        }
    }
}

impl BinConfig {
    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / (N_BINS - 2) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lower > 0.0
            && self.upper > self.lower
            && self.c1 < self.lower
            && self.c64 > self.upper
            && [self.lower, self.upper, self.c1, self.c64].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("inconsistent bin configuration {self:?}")))
        }
    }

    /// Bin containing distance `d`.
    pub fn bin_index(&self, d: f64) -> Result<usize> {
        if !(d >= 0.0) {
            return Err(Error::invalid(format!("distance must be non-negative, got {d}")));
        }
        Ok(if d < self.lower {
            0
        } else if d >= self.upper {
            N_BINS - 1
        } else {
            let k = ((d - self.lower) / self.width()).floor() as usize;
            1 + k.min(N_BINS - 3)
        })
    }

    pub fn bin_center(&self, b: usize) -> Result<f64> {
        match b {
            0 => Ok(self.c1),
            b if b == N_BINS - 1 => Ok(self.c64),
            b if b < N_BINS => Ok(self.lower + (b as f64 - 0.5) * self.width()),
            _ => Err(Error::invalid(format!("bin index {b} out of range"))),
        }
    }

    pub fn centers(&self) -> [f64; N_BINS] {
        let mut c = [0.0; N_BINS];
        for (b, v) in c.iter_mut().enumerate() {
            *v = self.bin_center(b).expect("in range");
        }
        c
    }
}

fn check_distribution(p: ArrayView1<f64>) -> Result<()> {
    if p.len() != N_BINS {
        return Err(Error::invalid(format!("expected {N_BINS} bins, got {}", p.len())));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("probabilities must be finite and non-negative"));
    }
    let s = p.sum();
    if (s - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

/// Probability-weighted mean of bin centers.
pub fn expected_distance(p: ArrayView1<f64>, cfg: &BinConfig) -> Result<f64> {
    check_distribution(p)?;
    Ok(expected_unchecked(p, &cfg.centers()))
}

fn expected_unchecked(p: ArrayView1<f64>, centers: &[f64; N_BINS]) -> f64 {
    p.iter().zip(centers).map(|(p, c)| p * c).sum()
}

/// Entropy normalized by `ln 64` so it lies in [0, 1]; `0·ln 0 = 0`.
pub fn pairwise_entropy(p: ArrayView1<f64>) -> Result<f64> {
    check_distribution(p)?;
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: ArrayView1<f64>) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    (h / (N_BINS as f64).ln()).clamp(0.0, 1.0)
}

/// Per-pair distance distributions over all tokens of a complex.
#[derive(Debug, Clone, PartialEq)]
pub struct Distogram {
    /// Shape `(N, N, 64)`.
    pub probs: Array3<f64>,
    pub token_kinds: Vec<TokenKind>,
    pub bin_config: BinConfig,
}

impl Distogram {
    pub fn new(probs: Array3<f64>, token_kinds: Vec<TokenKind>, bin_config: BinConfig) -> Result<Self> {
        let (n, m, b) = probs.dim();
        if n != m || b != N_BINS || token_kinds.len() != n {
            return Err(Error::invalid(format!(
                "distogram shape ({n}, {m}, {b}) does not match {} tokens",
                token_kinds.len()
            )));
        }
        bin_config.validate()?;
        for i in 0..n {
            for j in 0..n {
                let slice = probs.slice(ndarray::s![i, j, ..]);
                let s = slice.sum();
                if slice.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (s - 1.0).abs() > 1e-4 {
                    return Err(Error::invalid(format!("pair ({i}, {j}) is not a distribution")));
                }
            }
        }
        Ok(Self {
            probs,
            token_kinds,
            bin_config,
        })
    }

    /// Softmax over the last axis of raw head logits.
    pub fn from_logits(logits: &Array3<f64>, token_kinds: Vec<TokenKind>, bin_config: BinConfig) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: usize::MAX,
                message: "non-finite distogram logits".into(),
            });
        }
        Self::new(softmax_last(logits), token_kinds, bin_config)
    }

    /// Every pair's slice is a one-hot on the bin of the given distance.
    pub fn from_distances(d: &Array2<f64>, token_kinds: Vec<TokenKind>, bin_config: BinConfig) -> Result<Self> {
        let bins = target_distogram(d, &bin_config)?;
        let n = d.nrows();
        let mut probs = Array3::zeros((n, n, N_BINS));
        for ((i, j), &b) in bins.indexed_iter() {
            probs[[i, j, b]] = 1.0;
        }
        Self::new(probs, token_kinds, bin_config)
    }

    pub fn n_tokens(&self) -> usize {
        self.token_kinds.len()
    }

    pub fn ligand_indices(&self) -> Vec<usize> {
        kind_indices(&self.token_kinds, TokenKind::Ligand)
    }

    pub fn protein_indices(&self) -> Vec<usize> {
        kind_indices(&self.token_kinds, TokenKind::Protein)
    }

    /// Expected distance matrix `d̂`.
    pub fn expected_distances(&self) -> Array2<f64> {
        let centers = self.bin_config.centers();
        let n = self.n_tokens();
        Array2::from_shape_fn((n, n), |(i, j)| {
            expected_unchecked(self.probs.slice(ndarray::s![i, j, ..]), &centers)
        })
    }

    pub fn entropies(&self) -> Array2<f64> {
        let n = self.n_tokens();
        Array2::from_shape_fn((n, n), |(i, j)| entropy_unchecked(self.probs.slice(ndarray::s![i, j, ..])))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.n_tokens();
        (0..n).all(|i| {
            (0..i).all(|j| {
                (0..N_BINS).all(|b| (self.probs[[i, j, b]] - self.probs[[j, i, b]]).abs() <= tol)
            })
        })
    }

    /// Restricts to a token subset in the given order.
    pub fn subset(&self, keep: &[usize]) -> Distogram {
        let m = keep.len();
        let probs = Array3::from_shape_fn((m, m, N_BINS), |(a, b, k)| self.probs[[keep[a], keep[b], k]]);
        Distogram {
            probs,
            token_kinds: keep.iter().map(|&i| self.token_kinds[i]).collect(),
            bin_config: self.bin_config,
        }
    }
}

pub(crate) fn kind_indices(kinds: &[TokenKind], want: TokenKind) -> Vec<usize> {
    kinds
        .iter()
        .enumerate()
        .filter(|(_, &k)| k == want)
        .map(|(i, _)| i)
        .collect()
}

pub(crate) fn softmax_last(logits: &Array3<f64>) -> Array3<f64> {
    let mut out = logits.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - m).exp());
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    out
}

/// Averages each `(i, j)` slice with its `(j, i)` partner and renormalizes.
pub fn symmetrize(d: &Distogram) -> Distogram {
    let n = d.n_tokens();
    let mut probs = d.probs.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for b in 0..N_BINS {
                let v = 0.5 * (d.probs[[i, j, b]] + d.probs[[j, i, b]]);
                probs[[i, j, b]] = v;
                s += v;
            }
            for b in 0..N_BINS {
                let v = probs[[i, j, b]] / s;
                probs[[i, j, b]] = v;
                probs[[j, i, b]] = v;
            }
        }
    }
    Distogram {
        probs,
        token_kinds: d.token_kinds.clone(),
        bin_config: d.bin_config,
    }
}

/// Elementwise bin index of a distance matrix.
pub fn target_distogram(d: &Array2<f64>, cfg: &BinConfig) -> Result<Array2<usize>> {
    let mut out = Array2::zeros(d.raw_dim());
    for (idx, &v) in d.indexed_iter() {
        out[idx] = cfg.bin_index(v)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTypeWeights {
    pub ll: f64,
    pub lp: f64,
    pub pp: f64,
}

impl Default for PairTypeWeights {
    fn default() -> Self {
        Self::equal()
    }
}

impl PairTypeWeights {
    pub fn equal() -> Self {
        Self { ll: 1.0, lp: 1.0, pp: 1.0 }
    }

    pub fn new(ll: f64, lp: f64, pp: f64) -> Result<Self> {
        let w = Self { ll, lp, pp };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.ll, self.lp, self.pp];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || all.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid(format!("pair-type weights {self:?} must be >= 0 with one > 0")));
        }
        Ok(())
    }

    pub fn weight(&self, a: TokenKind, b: TokenKind) -> f64 {
        match (a, b) {
            (TokenKind::Ligand, TokenKind::Ligand) => self.ll,
            (TokenKind::Protein, TokenKind::Protein) => self.pp,
            _ => self.lp,
        }
    }
}

/// Default loss mask: every off-diagonal pair.
pub fn off_diagonal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| i != j)
}

/// `Σ w_ij ℓ_ij / Σ w_ij` over masked pairs, with `ℓ_ij` the cross-entropy of
/// `softmax(logits[i, j])` against the target bin.
pub fn structure_loss(
    logits: &Array3<f64>,
    target_bins: &Array2<usize>,
    kinds: &[TokenKind],
    weights: &PairTypeWeights,
    mask: &Array2<bool>,
) -> Result<f64> {
    structure_loss_with_grad(logits, target_bins, kinds, weights, mask).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub fn structure_loss_with_grad(
    logits: &Array3<f64>,
    target_bins: &Array2<usize>,
    kinds: &[TokenKind],
    weights: &PairTypeWeights,
    mask: &Array2<bool>,
) -> Result<(f64, Array3<f64>)> {
    let (n, m, b) = logits.dim();
    if n != m || b != N_BINS || target_bins.dim() != (n, n) || mask.dim() != (n, n) || kinds.len() != n {
        return Err(Error::invalid("structure_loss shape mismatch"));
    }
    weights.validate()?;
    let total: f64 = mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((i, j), _)| weights.weight(kinds[i], kinds[j]))
        .sum();
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("structure_loss mask selects no pairs"));
    }
    if total <= 0.0 {
        return Err(Error::invalid("masked pairs carry zero total weight"));
    }
    let mut grad = Array3::zeros((n, n, N_BINS));
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !mask[[i, j]] {
                continue;
            }
            let w = weights.weight(kinds[i], kinds[j]);
            if w == 0.0 {
                continue;
            }
            let t = target_bins[[i, j]];
            if t >= N_BINS {
                return Err(Error::invalid(format!("target bin {t} out of range")));
            }
            let row = logits.slice(ndarray::s![i, j, ..]);
            let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += w * (lse - row[t]);
            let scale = w / total;
            for k in 0..N_BINS {
                let p = (row[k] - lse).exp();
                grad[[i, j, k]] = scale * (p - if k == t { 1.0 } else { 0.0 });
            }
        }
    }
    Ok((loss / total, grad))
}

/// Aggregated normalized entropies by pair type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Absent for single-atom ligands.
    pub h_ll: Option<f64>,
    /// Absent when the pocket is empty.
    pub h_lp: Option<f64>,
    /// Absent when the pocket has fewer than two residues.
    pub h_pp: Option<f64>,
    pub pocket: Vec<usize>,
    pub empty_pocket: bool,
}

/// Mean entropies over ordered ligand pairs, ligand×pocket pairs and ordered
/// pocket pairs, excluding the diagonal.
pub fn aggregate_entropy(d: &Distogram, pocket: &[usize]) -> Result<EntropyReport> {
    let ligand = d.ligand_indices();
    if ligand.is_empty() {
        return Err(Error::invalid("aggregate_entropy needs at least one ligand token"));
    }
    for &p in pocket {
        if d.token_kinds.get(p) != Some(&TokenKind::Protein) {
            return Err(Error::invalid(format!("pocket index {p} is not a protein token")));
        }
    }
    let h = |i: usize, j: usize| entropy_unchecked(d.probs.slice(ndarray::s![i, j, ..]));
    let mean_ordered = |set: &[usize]| {
        if set.len() < 2 {
            return None;
        }
        let mut s = 0.0;
        for &i in set {
            for &j in set {
                if i != j {
                    s += h(i, j);
                }
            }
        }
        Some(s / (set.len() * (set.len() - 1)) as f64)
    };
    let h_lp = if pocket.is_empty() {
        None
    } else {
        let s: f64 = ligand.iter().flat_map(|&i| pocket.iter().map(move |&j| (i, j))).map(|(i, j)| h(i, j)).sum();
        Some(s / (ligand.len() * pocket.len()) as f64)
    };
    Ok(EntropyReport {
        h_ll: mean_ordered(&ligand),
        h_lp,
        h_pp: mean_ordered(pocket),
        pocket: pocket.to_vec(),
        empty_pocket: pocket.is_empty(),
    })
}

// ---------------------------------------------------------------------------
// File format: one JSON header line, then base64 little-endian f32 (i, j, b).
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistogramHeader {
    n_tokens: usize,
    n_bins: usize,
    bin_config: BinConfig,
    token_kinds: Vec<TokenKind>,
    dtype: String,
    layout: String,
}

const LAYOUT: &str = "row-major i,j,b";

pub fn encode_distogram(d: &Distogram) -> Result<Vec<u8>> {
    let header = DistogramHeader {
        n_tokens: d.n_tokens(),
        n_bins: N_BINS,
        bin_config: d.bin_config,
        token_kinds: d.token_kinds.clone(),
        dtype: "f32".into(),
        layout: LAYOUT.into(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(codec::encode_f32(d.probs.iter().copied()).as_bytes());
    out.push(b'\n');
    Ok(out)
}

pub fn decode_distogram(bytes: &[u8]) -> Result<Distogram> {
    let (header, payload, offset) = codec::split_header(bytes)?;
    let h: DistogramHeader = codec::parse_header(header)?;
    if h.n_bins != N_BINS || h.dtype != "f32" || h.layout != LAYOUT {
        return Err(Error::parse(0, "unsupported n_bins, dtype or layout"));
    }
    if h.token_kinds.len() != h.n_tokens {
        return Err(Error::parse(0, "token_kinds length differs from n_tokens"));
    }
    h.bin_config.validate().map_err(|e| Error::parse(0, e.to_string()))?;
    let count = h
        .n_tokens
        .checked_mul(h.n_tokens)
        .and_then(|v| v.checked_mul(N_BINS))
        .ok_or_else(|| Error::parse(0, "n_tokens too large"))?;
    let values = codec::decode_f32(payload, count, offset)?;
    let probs = Array3::from_shape_vec((h.n_tokens, h.n_tokens, N_BINS), values)
        .map_err(|e| Error::parse(offset, e.to_string()))?;
    Distogram::new(probs, h.token_kinds, h.bin_config).map_err(|e| Error::parse(offset, e.to_string()))
}
