//! Coarse-grained complexes: ligand heavy atoms plus protein residue centers.
//!
//! Real encoders and structures are out of reach at desk scale, so this module
//! also owns a deterministic generator of synthetic complexes. Generated
//! embeddings combine a seeded Gaussian identity block with a structural block
//! that encodes (noisily, with a per-complex quality) where each token sits.
//! That stands in for frozen pretrained features carrying structural signal.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

pub const LIGAND_CHAIN: &str = "L";
pub const PROTEIN_CHAIN: &str = "A";
const BOND_LENGTH: f64 = 1.5;
const CA_STEP: f64 = 3.8;
const POCKET_RADIUS: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Ligand,
    Protein,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Token {
    pub kind: TokenKind,
    #[serde(rename = "chain")]
    pub chain_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residue_index: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element: Option<String>,
    pub embedding: Vec<f64>,
}

impl Token {
    pub fn is_ligand(&self) -> bool {
        self.kind == TokenKind::Ligand
    }
}

/// A bond between two ligand tokens, serialized as `[i, j, order]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond(pub usize, pub usize, pub u8);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizedComplex {
    pub id: String,
    pub tokens: Vec<Token>,
    pub bonds: Vec<Bond>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<[f64; 3]>>,
}

impl TokenizedComplex {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn kinds(&self) -> Vec<TokenKind> {
        self.tokens.iter().map(|t| t.kind).collect()
    }

    pub fn ligand_indices(&self) -> Vec<usize> {
        self.indices_of(TokenKind::Ligand)
    }

    pub fn protein_indices(&self) -> Vec<usize> {
        self.indices_of(TokenKind::Protein)
    }

    fn indices_of(&self, kind: TokenKind) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.embedding.len())
    }

    /// Checks every structural invariant of the type.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::invalid("complex has no tokens"));
        }
        let dim = self.embedding_dim();
        for (i, t) in self.tokens.iter().enumerate() {
            if t.embedding.len() != dim {
                return Err(Error::invalid(format!(
                    "token {i} embedding has length {}, expected {dim}",
                    t.embedding.len()
                )));
            }
            if t.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("token {i} embedding is not finite")));
            }
            match t.kind {
                TokenKind::Protein if t.residue_index.is_none() => {
                    return Err(Error::invalid(format!("protein token {i} lacks residue_index")))
                }
                TokenKind::Protein if t.element.is_some() => {
                    return Err(Error::invalid(format!("protein token {i} carries an element")))
                }
                TokenKind::Ligand if t.element.is_none() => {
                    return Err(Error::invalid(format!("ligand token {i} lacks an element")))
                }
                TokenKind::Ligand if t.residue_index.is_some() => {
                    return Err(Error::invalid(format!("ligand token {i} carries a residue_index")))
                }
                _ => {}
            }
        }
        for (k, &Bond(i, j, _)) in self.bonds.iter().enumerate() {
            if i == j {
                return Err(Error::invalid(format!("bond {k} joins token {i} to itself")));
            }
            for end in [i, j] {
                match self.tokens.get(end) {
                    Some(t) if t.is_ligand() => {}
                    Some(_) => {
                        return Err(Error::invalid(format!("bond {k} touches protein token {end}")))
                    }
                    None => return Err(Error::invalid(format!("bond {k} endpoint {end} out of range"))),
                }
            }
        }
        if let Some(coords) = &self.coords {
            if coords.len() != self.tokens.len() {
                return Err(Error::invalid(format!(
                    "{} coordinate rows for {} tokens",
                    coords.len(),
                    self.tokens.len()
                )));
            }
            if coords.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite coordinate"));
            }
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate), additionally requiring both a ligand and a protein token.
    pub fn validate_binding(&self) -> Result<()> {
        self.validate()?;
        if self.ligand_indices().is_empty() || self.protein_indices().is_empty() {
            return Err(Error::invalid("binding tasks need at least one ligand and one protein token"));
        }
        Ok(())
    }

    pub fn true_distances(&self) -> Result<Array2<f64>> {
        let coords = self
            .coords
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("complex {} has no coordinates", self.id)))?;
        distance_matrix(coords)
    }

    /// Restricts the complex to `keep` (in the given order), retaining induced bonds.
    pub fn subset(&self, keep: &[usize]) -> TokenizedComplex {
        let mut remap = vec![usize::MAX; self.tokens.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let bonds = self
            .bonds
            .iter()
            .filter(|b| remap[b.0] != usize::MAX && remap[b.1] != usize::MAX)
            .map(|b| Bond(remap[b.0], remap[b.1], b.2))
            .collect();
        TokenizedComplex {
            id: self.id.clone(),
            tokens: keep.iter().map(|&i| self.tokens[i].clone()).collect(),
            bonds,
            coords: self
                .coords
                .as_ref()
                .map(|c| keep.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Pairwise Euclidean distances in Å.
pub fn distance_matrix(coords: &[[f64; 3]]) -> Result<Array2<f64>> {
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite coordinate"));
    }
    let n = coords.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist(&coords[i], &coords[j]);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Writes the complex as compact JSON.
pub fn encode_complex(c: &TokenizedComplex) -> Result<Vec<u8>> {
    c.validate()?;
    serde_json::to_vec(c).map_err(|e| Error::invalid(e.to_string()))
}

pub fn decode_complex(bytes: &[u8]) -> Result<TokenizedComplex> {
    let c: TokenizedComplex =
        serde_json::from_slice(bytes).map_err(|e| Error::from_json(&e, bytes))?;
    c.validate().map_err(|e| Error::parse(0, e.to_string()))?;
    Ok(c)
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Geometry {
    FoldedBlob,
    Helix,
    Cliff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGenConfig {
    pub n_ligand: usize,
    pub n_protein: usize,
    pub embedding_dim: usize,
    pub geometry: Geometry,
    pub seed: u64,
    pub pocket_fraction: f64,
    /// Range from which the per-complex encoder quality is drawn. Quality 1
    /// gives a clean structural signal; lower values shrink and blur it.
    pub quality: (f64, f64),
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            n_ligand: 10,
            n_protein: 40,
            embedding_dim: 32,
            geometry: Geometry::FoldedBlob,
            seed: 0,
            pocket_fraction: 0.5,
            quality: (1.0, 1.0),
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ligand == 0 || self.n_protein == 0 || self.embedding_dim == 0 {
            return Err(Error::invalid("token counts and embedding_dim must be >= 1"));
        }
        if !(self.pocket_fraction > 0.0 && self.pocket_fraction <= 1.0) {
            return Err(Error::invalid("pocket_fraction must lie in (0, 1]"));
        }
        let (lo, hi) = self.quality;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::invalid("quality range must satisfy 0 <= lo <= hi <= 1"));
        }
        Ok(())
    }

    /// Number of protein tokens the generator places inside the 15 Å pocket.
    pub fn target_pocket_size(&self) -> usize {
        ((self.pocket_fraction * self.n_protein as f64).ceil() as usize).clamp(1, self.n_protein)
    }
}

/// Generates a complex with ground-truth coordinates. Pure in `cfg`.
///
/// Panics only if `cfg` violates [`SyntheticGenConfig::validate`].
pub fn generate_synthetic_complex(cfg: &SyntheticGenConfig) -> TokenizedComplex {
    cfg.validate().expect("invalid SyntheticGenConfig");
    let mut rng = rng::seeded(rng::substream(cfg.seed, "complex"));

    let protein = match cfg.geometry {
        Geometry::Helix => helix_trace(cfg.n_protein),
        Geometry::FoldedBlob | Geometry::Cliff => folded_blob(cfg.n_protein, &mut rng),
    };
    let ligand = build_ligand(cfg.n_ligand, &mut rng);
    let ligand_coords = place_ligand(&ligand.coords, &protein, cfg.target_pocket_size(), &mut rng);

    let quality = if cfg.quality.1 > cfg.quality.0 {
        rng.random_range(cfg.quality.0..=cfg.quality.1)
    } else {
        cfg.quality.0
    };
    let encoder = SyntheticEncoder::new(cfg.embedding_dim);

    let mut tokens = Vec::with_capacity(cfg.n_ligand + cfg.n_protein);
    let mut coords = Vec::with_capacity(cfg.n_ligand + cfg.n_protein);
    for (i, x) in ligand_coords.iter().enumerate() {
        tokens.push(Token {
            kind: TokenKind::Ligand,
            chain_id: LIGAND_CHAIN.to_string(),
            residue_index: None,
            element: Some(ligand.elements[i].to_string()),
            embedding: encoder.embed(cfg.seed, TokenKind::Ligand, i, x, quality, &mut rng),
        });
        coords.push(*x);
    }
    for (i, x) in protein.iter().enumerate() {
        tokens.push(Token {
            kind: TokenKind::Protein,
            chain_id: PROTEIN_CHAIN.to_string(),
            residue_index: Some(i as i32 + 1),
            element: None,
            embedding: encoder.embed(cfg.seed, TokenKind::Protein, i, x, quality, &mut rng),
        });
        coords.push(*x);
    }

    TokenizedComplex {
        id: format!("synthetic-{:?}-{}", cfg.geometry, cfg.seed).to_lowercase(),
        tokens,
        bonds: ligand.bonds,
        coords: Some(coords),
    }
}

/// Two complexes sharing a protein whose ligands differ by a tiny embedding
/// perturbation, with affinity labels planted far apart (an activity cliff).
#[derive(Debug, Clone)]
pub struct CliffPair {
    pub first: TokenizedComplex,
    pub second: TokenizedComplex,
    pub first_affinity: f64,
    pub second_affinity: f64,
}

pub fn generate_cliff_pair(cfg: &SyntheticGenConfig) -> CliffPair {
    let base = SyntheticGenConfig {
        geometry: Geometry::Cliff,
        ..cfg.clone()
    };
    let first = generate_synthetic_complex(&base);
    let mut rng = rng::seeded(rng::substream(cfg.seed, "cliff"));
    let mut second = first.clone();
    second.id = format!("{}-cliff", first.id);
    for t in second.tokens.iter_mut().filter(|t| t.is_ligand()) {
        for v in t.embedding.iter_mut() {
            *v += 0.01 * rng::normal(&mut rng);
        }
    }
    let first_affinity = rng.random_range(5.0..7.0);
    let jump = rng.random_range(2.0..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    CliffPair {
        first,
        second,
        first_affinity,
        second_affinity: first_affinity + jump,
    }
}

/// The same pose with fresh ligand identity features: a different compound
/// in an unchanged binding mode.
pub fn with_ligand_identity(c: &TokenizedComplex, compound_seed: u64) -> TokenizedComplex {
    let range = SyntheticEncoder::new(c.embedding_dim()).identity_range();
    let mut out = c.clone();
    out.id = format!("{}-c{compound_seed}", c.id);
    for (i, t) in out.tokens.iter_mut().filter(|t| t.is_ligand()).enumerate() {
        let mut r = rng::seeded(rng::indexed(rng::substream(compound_seed, "compound"), i as u64));
        for k in range.clone() {
            t.embedding[k] = rng::normal(&mut r);
        }
    }
    out
}

/// Deterministic stand-in for the frozen sequence/ligand encoders.
///
/// Layout of an embedding of width `E >= 8`:
/// `[kind flag | identity (E/4, unit Gaussian) | q·x/10 (3) | q·random Fourier features]`.
/// Narrower embeddings carry identity features only.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    dim: usize,
    n_identity: usize,
    frequencies: Vec<([f64; 3], f64)>,
}

impl SyntheticEncoder {
    pub fn new(dim: usize) -> Self {
        let n_identity = if dim >= 8 { dim / 4 } else { dim };
        let n_struct = dim.saturating_sub(1 + n_identity + 3);
        let n_freq = n_struct / 2;
        // Frequencies are global constants so the encoding is consistent across complexes.
        let mut rng = rng::seeded(0x5EED_F00D);
        let scales = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 12.0];
        let frequencies = (0..n_freq)
            .map(|m| {
                let u = rng::unit_vector(&mut rng);
                let s = scales[m % scales.len()];
                ([u[0] * s, u[1] * s, u[2] * s], rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self {
            dim,
            n_identity,
            frequencies,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Positions of the per-token identity features.
    pub fn identity_range(&self) -> std::ops::Range<usize> {
        if self.dim < 8 {
            0..self.dim
        } else {
            1..1 + self.n_identity
        }
    }

    fn embed(
        &self,
        seed: u64,
        kind: TokenKind,
        index: usize,
        x: &[f64; 3],
        quality: f64,
        noise_rng: &mut SeededRng,
    ) -> Vec<f64> {
        let kind_tag = match kind {
            TokenKind::Ligand => "ligand",
            TokenKind::Protein => "protein",
        };
        let mut id_rng = rng::seeded(rng::indexed(rng::substream(seed, kind_tag), index as u64));
        let identity = rng::normal_vec(&mut id_rng, self.n_identity);
        if self.dim < 8 {
            return identity;
        }
        let mut e = Vec::with_capacity(self.dim);
        e.push(if kind == TokenKind::Ligand { 1.0 } else { -1.0 });
        e.extend(identity);
        let blur = 3.0 * (1.0 - quality);
        let noisy = [
            x[0] + blur * rng::normal(noise_rng),
            x[1] + blur * rng::normal(noise_rng),
            x[2] + blur * rng::normal(noise_rng),
        ];
        e.extend(noisy.iter().map(|v| quality * v / 10.0));
        for (w, phase) in &self.frequencies {
            let arg = w[0] * noisy[0] + w[1] * noisy[1] + w[2] * noisy[2] + phase;
            e.push(quality * arg.cos());
            e.push(quality * arg.sin());
        }
        e.resize(self.dim, 0.0);
        e
    }
}

struct LigandSketch {
    coords: Vec<[f64; 3]>,
    bonds: Vec<Bond>,
    elements: Vec<&'static str>,
}

/// Random spanning tree with an optional six-membered ring, 1.5 Å bonds.
fn build_ligand(n: usize, rng: &mut SeededRng) -> LigandSketch {
    let mut coords: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut bonds = Vec::new();
    let mut elements = Vec::with_capacity(n);
    let mut degree = Vec::with_capacity(n);

    if n >= 6 && rng.random_bool(0.6) {
        let u = rng::unit_vector(rng);
        let (a, b) = orthonormal_pair(&u);
        for k in 0..6 {
            let t = k as f64 * std::f64::consts::PI / 3.0;
            coords.push([
                BOND_LENGTH * (t.cos() * a[0] + t.sin() * b[0]),
                BOND_LENGTH * (t.cos() * a[1] + t.sin() * b[1]),
                BOND_LENGTH * (t.cos() * a[2] + t.sin() * b[2]),
            ]);
            elements.push(if rng.random_bool(0.85) { "C" } else { "N" });
            degree.push(2usize);
        }
        for k in 0..6 {
            bonds.push(Bond(k, (k + 1) % 6, if k % 2 == 0 { 2 } else { 1 }));
        }
    } else {
        coords.push([0.0, 0.0, 0.0]);
        elements.push(pick_element(rng));
        degree.push(0);
    }

    while coords.len() < n {
        let mut placed = false;
        for _ in 0..200 {
            let parent = rng.random_range(0..coords.len());
            if degree[parent] >= 3 {
                continue;
            }
            let u = rng::unit_vector(rng);
            let p = coords[parent];
            let cand = [
                p[0] + BOND_LENGTH * u[0],
                p[1] + BOND_LENGTH * u[1],
                p[2] + BOND_LENGTH * u[2],
            ];
            let clash = coords
                .iter()
                .enumerate()
                .any(|(k, c)| k != parent && dist(c, &cand) < 2.3);
            if !clash {
                bonds.push(Bond(parent, coords.len(), 1));
                degree[parent] += 1;
                degree.push(1);
                coords.push(cand);
                elements.push(pick_element(rng));
                placed = true;
                break;
            }
        }
        if !placed {
            // Crowded: extend from the last atom along a random direction.
            let parent = coords.len() - 1;
            let u = rng::unit_vector(rng);
            let p = coords[parent];
            bonds.push(Bond(parent, coords.len(), 1));
            degree[parent] += 1;
            degree.push(1);
            coords.push([
                p[0] + BOND_LENGTH * u[0],
                p[1] + BOND_LENGTH * u[1],
                p[2] + BOND_LENGTH * u[2],
            ]);
            elements.push(pick_element(rng));
        }
    }
    let c = centroid(&coords);
    for x in coords.iter_mut() {
        for k in 0..3 {
            x[k] -= c[k];
        }
    }
    LigandSketch {
        coords,
        bonds,
        elements,
    }
}

fn pick_element(rng: &mut SeededRng) -> &'static str {
    let r: f64 = rng.random();
    if r < 0.7 {
        "C"
    } else if r < 0.85 {
        "N"
    } else {
        "O"
    }
}

fn orthonormal_pair(u: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let a = normalize(cross(u, &helper));
    let b = cross(u, &a);
    (a, b)
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

pub(crate) fn centroid(coords: &[[f64; 3]]) -> [f64; 3] {
    let n = coords.len().max(1) as f64;
    let mut c = [0.0; 3];
    for x in coords {
        for k in 0..3 {
            c[k] += x[k];
        }
    }
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Confined self-avoiding random walk of Cα-like centers, centered at the origin.
fn folded_blob(n: usize, rng: &mut SeededRng) -> Vec<[f64; 3]> {
    let radius = 3.3 * (n as f64).cbrt() + 2.0;
    let mut coords: Vec<[f64; 3]> = Vec::with_capacity(n);
    let start = rng::unit_vector(rng);
    let r0 = radius * 0.3;
    coords.push([start[0] * r0, start[1] * r0, start[2] * r0]);
    while coords.len() < n {
        let prev = *coords.last().unwrap();
        let mut best: Option<([f64; 3], f64)> = None;
        for _ in 0..60 {
            let u = rng::unit_vector(rng);
            let cand = [
                prev[0] + CA_STEP * u[0],
                prev[1] + CA_STEP * u[1],
                prev[2] + CA_STEP * u[2],
            ];
            let r = (cand[0] * cand[0] + cand[1] * cand[1] + cand[2] * cand[2]).sqrt();
            let min_d = coords[..coords.len() - 1]
                .iter()
                .map(|c| dist(c, &cand))
                .fold(f64::INFINITY, f64::min);
            let score = min_d.min(4.5) - (r - radius).max(0.0) * 2.0;
            if r <= radius && min_d >= 4.2 {
                best = Some((cand, f64::INFINITY));
                break;
            }
            if best.as_ref().is_none_or(|(_, s)| score > *s) {
                best = Some((cand, score));
            }
        }
        coords.push(best.unwrap().0);
    }
    let c = centroid(&coords);
    coords
        .iter()
        .map(|x| [x[0] - c[0], x[1] - c[1], x[2] - c[2]])
        .collect()
}

/// Ideal α-helix trace: 2.3 Å radius, 1.5 Å rise, 100° per residue.
fn helix_trace(n: usize) -> Vec<[f64; 3]> {
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let t = (i as f64) * 100f64.to_radians();
            [2.3 * t.cos(), 2.3 * t.sin(), 1.5 * i as f64]
        })
        .collect();
    let c = centroid(&coords);
    coords
        .iter()
        .map(|x| [x[0] - c[0], x[1] - c[1], x[2] - c[2]])
        .collect()
}

fn random_rotation(rng: &mut SeededRng) -> [[f64; 3]; 3] {
    let q = loop {
        let q = [rng::normal(rng), rng::normal(rng), rng::normal(rng), rng::normal(rng)];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            break [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn pocket_count(ligand: &[[f64; 3]], protein: &[[f64; 3]]) -> (usize, f64) {
    let mut count = 0;
    let mut min_d = f64::INFINITY;
    for p in protein {
        let d = ligand
            .iter()
            .map(|l| dist(l, p))
            .fold(f64::INFINITY, f64::min);
        if d < POCKET_RADIUS {
            count += 1;
        }
        min_d = min_d.min(d);
    }
    (count, min_d)
}

/// Translates and rotates the ligand so exactly `target` protein tokens lie within
/// 15 Å of some ligand atom, preferring placements without clashes.
fn place_ligand(
    ligand: &[[f64; 3]],
    protein: &[[f64; 3]],
    target: usize,
    rng: &mut SeededRng,
) -> Vec<[f64; 3]> {
    let extent = protein
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let mut best: Option<(Vec<[f64; 3]>, usize)> = None;
    for clash in [3.5, 2.0, 0.0] {
        for _ in 0..300 {
            let rot = random_rotation(rng);
            let oriented: Vec<[f64; 3]> = ligand.iter().map(|x| apply(&rot, x)).collect();
            let anchor = protein[rng.random_range(0..protein.len())];
            let dir = rng::unit_vector(rng);
            let mut t = 0.0;
            while t <= extent + POCKET_RADIUS + 10.0 {
                let shift = [
                    anchor[0] * 0.3 + dir[0] * t,
                    anchor[1] * 0.3 + dir[1] * t,
                    anchor[2] * 0.3 + dir[2] * t,
                ];
                let placed: Vec<[f64; 3]> = oriented
                    .iter()
                    .map(|x| [x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]])
                    .collect();
                let (count, min_d) = pocket_count(&placed, protein);
                if count == target && min_d >= clash {
                    return placed;
                }
                let miss = count.abs_diff(target);
                if best.as_ref().is_none_or(|(_, m)| miss < *m) {
                    best = Some((placed, miss));
                }
                if count == 0 {
                    break;
                }
                t += 0.25;
            }
        }
    }
    best.map(|(c, _)| c).unwrap_or_else(|| ligand.to_vec())
}

fn apply(r: &[[f64; 3]; 3], x: &[f64; 3]) -> [f64; 3] {
    [
        r[0][0] * x[0] + r[0][1] * x[1] + r[0][2] * x[2],
        r[1][0] * x[0] + r[1][1] * x[1] + r[1][2] * x[2],
        r[2][0] * x[0] + r[2][1] * x[1] + r[2][2] * x[2],
    ]
}
