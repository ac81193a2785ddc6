//! Pocket identification from expected distances and budgeted context
//! cropping around a ligand.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::complex::{TokenKind, TokenizedComplex};
use crate::error::{Error, Result};

/// Pocket cutoff for pose building and affinity features, Å.
pub const POCKET_CUTOFF: f64 = 15.0;
/// Wider cutoff for the first pass of two-pass cropped inference, Å.
pub const INITIAL_POCKET_CUTOFF: f64 = 22.0;
/// Residues whose sequence positions differ by at most this much share a cluster.
pub const CLUSTER_GAP: i64 = 3;

/// Protein tokens within `cutoff` (strictly) of some ligand token.
pub fn pocket_residues(expected: &Array2<f64>, kinds: &[TokenKind], cutoff: f64) -> Result<Vec<usize>> {
    let n = kinds.len();
    if expected.dim() != (n, n) {
        return Err(Error::invalid("distance matrix does not match token count"));
    }
    if !(cutoff > 0.0) {
        return Err(Error::invalid("pocket cutoff must be positive"));
    }
    let ligand: Vec<usize> = (0..n).filter(|&i| kinds[i] == TokenKind::Ligand).collect();
    if ligand.is_empty() {
        return Err(Error::invalid("pocket needs at least one ligand token"));
    }
    Ok((0..n)
        .filter(|&j| kinds[j] == TokenKind::Protein && ligand.iter().any(|&i| expected[[i, j]] < cutoff))
        .collect())
}

/// Ligand plus pocket token count, the context an affinity or pose model sees.
pub fn context_size(expected: &Array2<f64>, kinds: &[TokenKind], cutoff: f64) -> Result<usize> {
    let pocket = pocket_residues(expected, kinds, cutoff)?;
    Ok(pocket.len() + kinds.iter().filter(|k| **k == TokenKind::Ligand).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ligand,
    Pocket,
    Expansion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PocketCrop {
    /// Kept token indices in ascending order.
    pub kept: Vec<usize>,
    pub provenance: Vec<Provenance>,
    /// The ligand alone exceeds the budget; it is kept whole regardless.
    pub over_budget: bool,
}

impl PocketCrop {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// The cropped complex with induced bonds.
    pub fn apply(&self, c: &TokenizedComplex) -> TokenizedComplex {
        c.subset(&self.kept)
    }
}

/// Budgeted crop: the whole ligand, then pocket residues (closest first if
/// they do not all fit), then sequence neighbors of pocket clusters on the
/// chains already present. Ties resolve by ascending token index.
pub fn crop(c: &TokenizedComplex, budget: usize, pocket: &[usize], expected: &Array2<f64>) -> Result<PocketCrop> {
    if budget < 1 {
        return Err(Error::invalid("crop budget must be at least 1"));
    }
    let n = c.len();
    if expected.dim() != (n, n) {
        return Err(Error::invalid("distance matrix does not match token count"));
    }
    for &p in pocket {
        match c.tokens.get(p) {
            Some(t) if t.kind == TokenKind::Protein => {}
            _ => return Err(Error::invalid(format!("pocket index {p} is not a protein token"))),
        }
    }
    let ligand = c.ligand_indices();
    let mut prov: BTreeMap<usize, Provenance> = ligand.iter().map(|&i| (i, Provenance::Ligand)).collect();
    let over_budget = ligand.len() > budget;

    let mut pocket: Vec<usize> = pocket.to_vec();
    pocket.sort_unstable();
    pocket.dedup();
    if ligand.len() + pocket.len() > budget {
        let room = budget.saturating_sub(ligand.len());
        let to_ligand = |j: usize| ligand.iter().map(|&k| expected[[j, k]]).fold(f64::INFINITY, f64::min);
        let mut ranked: Vec<(f64, usize)> = pocket.iter().map(|&j| (to_ligand(j), j)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pocket = ranked.into_iter().take(room).map(|(_, j)| j).collect();
    }
    for &j in &pocket {
        prov.insert(j, Provenance::Pocket);
    }

    if prov.len() < budget {
        let mut chains: Vec<&str> = prov
            .keys()
            .filter(|&&i| c.tokens[i].kind == TokenKind::Protein)
            .map(|&i| c.tokens[i].chain_id.as_str())
            .collect();
        chains.sort_unstable();
        chains.dedup();
        let mut candidates: Vec<(i64, usize)> = Vec::new();
        for chain in chains {
            let on_chain: Vec<usize> = (0..n)
                .filter(|&i| c.tokens[i].kind == TokenKind::Protein && c.tokens[i].chain_id == chain)
                .collect();
            let mut present: Vec<i64> = on_chain
                .iter()
                .filter(|i| prov.contains_key(i))
                .map(|&i| residue(c, i))
                .collect();
            present.sort_unstable();
            let clusters = clusters(&present);
            for &r in on_chain.iter().filter(|i| !prov.contains_key(i)) {
                let pos = residue(c, r);
                let d = clusters
                    .iter()
                    .map(|&(s, e)| (pos - s).abs().min((pos - e).abs()))
                    .min()
                    .expect("chain intersects the crop");
                candidates.push((d, r));
            }
        }
        candidates.sort_unstable();
        for (_, r) in candidates {
            if prov.len() >= budget {
                break;
            }
            prov.insert(r, Provenance::Expansion);
        }
    }

    let (kept, provenance) = prov.into_iter().unzip();
    Ok(PocketCrop {
        kept,
        provenance,
        over_budget,
    })
}

fn residue(c: &TokenizedComplex, i: usize) -> i64 {
    i64::from(c.tokens[i].residue_index.expect("protein tokens carry residue indices"))
}

/// Merges sorted positions into `(start, end)` runs whose consecutive gaps are at most [`CLUSTER_GAP`].
fn clusters(sorted: &[i64]) -> Vec<(i64, i64)> {
    let mut out: Vec<(i64, i64)> = Vec::new();
    for &r in sorted {
        match out.last_mut() {
            Some((_, e)) if r - *e <= CLUSTER_GAP => *e = r,
            _ => out.push((r, r)),
        }
    }
    out
}

/// Ligand-centered crop using ground-truth distances, as used to build
/// training examples: the true 15 Å pocket seeds the crop.
pub fn crop_by_truth(c: &TokenizedComplex, budget: usize) -> Result<PocketCrop> {
    let d = c.true_distances()?;
    let pocket = pocket_residues(&d, &c.kinds(), POCKET_CUTOFF)?;
    crop(c, budget, &pocket, &d)
}
