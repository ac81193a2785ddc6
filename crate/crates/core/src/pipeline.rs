//! End-to-end compositions: distogram inference with optional pocket
//! cropping, pose generation from a distogram, and pose evaluation against
//! a reference structure.

use serde::{Deserialize, Serialize};

use crate::complex::TokenizedComplex;
use crate::distogram::{aggregate_entropy, Distogram};
use crate::error::{Error, Result};
use crate::metrics::{lddt_pli, ligand_rmsd, symmetry_corrected_rmsd, LigandGraph, Point, LDDT_RADIUS, LDDT_THRESHOLDS};
use crate::pairformer::Pairformer;
use crate::pocket::{crop, pocket_residues, PocketCrop, INITIAL_POCKET_CUTOFF};
use crate::posegen::{build_reference, optimize_pose, select_best, OptConfig, PoseFile};

/// A distogram over `tokens` of the input complex (all of them unless cropped).
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub distogram: Distogram,
    pub tokens: Vec<usize>,
    pub crop: Option<PocketCrop>,
}

/// Runs the trunk on the whole complex. With a token budget, the first
/// pass's 22 Å pocket seeds a crop and the trunk runs again on the crop.
pub fn infer(c: &TokenizedComplex, trunk: &Pairformer, pocket_tokens: Option<usize>) -> Result<Inference> {
    let full = trunk.predict(c)?;
    let Some(budget) = pocket_tokens else {
        return Ok(Inference {
            distogram: full,
            tokens: (0..c.len()).collect(),
            crop: None,
        });
    };
    let expected = full.expected_distances();
    let pocket = pocket_residues(&expected, &full.token_kinds, INITIAL_POCKET_CUTOFF)?;
    let cropped = crop(c, budget, &pocket, &expected)?;
    let distogram = trunk.predict(&cropped.apply(c))?;
    Ok(Inference {
        distogram,
        tokens: cropped.kept.clone(),
        crop: Some(cropped),
    })
}

/// Coarse pose from a distogram: ligand plus pocket coordinates from
/// `cfg.n_samples` optimizations, keeping the lowest-loss sample as best.
pub fn predict_pose(d: &Distogram, cfg: &OptConfig) -> Result<PoseFile> {
    let reference = build_reference(d, cfg.pocket_cutoff)?;
    let samples = optimize_pose(&reference.matrix, cfg)?;
    let (best, _) = select_best(&samples)?;
    Ok(PoseFile {
        samples,
        best,
        pocket: reference.pocket,
        tokens: reference.tokens,
    })
}

/// Scores of one predicted pose against the reference structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEvaluation {
    pub id: String,
    pub rmsd: f64,
    pub rmsd_symcorr: f64,
    pub lddt_pli: Option<f64>,
    pub h_ll: Option<f64>,
    pub h_lp: Option<f64>,
    pub h_pp: Option<f64>,
    /// Automorphism enumeration gave up; `rmsd_symcorr` equals `rmsd`.
    pub symmetry_fallback: bool,
}

/// Evaluates the best sample of `pose`.
///
/// `tokens[k]` is the index in `truth` of distogram token `k` (the identity
/// for uncropped inference). RMSDs align ligand plus pocket and ignore
/// handedness, which distances alone cannot fix.
pub fn evaluate_pose(truth: &TokenizedComplex, tokens: &[usize], d: &Distogram, pose: &PoseFile) -> Result<PoseEvaluation> {
    let coords = truth
        .coords
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("complex {} has no reference coordinates", truth.id)))?;
    if tokens.len() != d.n_tokens() || tokens.iter().any(|&t| t >= truth.len()) {
        return Err(Error::invalid("token map does not match the distogram and complex"));
    }
    let best = pose.best_sample()?;
    if pose.tokens.len() != best.coords.len() || pose.tokens.iter().any(|&t| t >= d.n_tokens()) {
        return Err(Error::invalid("pose tokens do not match its coordinates"));
    }
    // Rows of the pose, mapped to truth tokens.
    let in_truth: Vec<usize> = pose.tokens.iter().map(|&t| tokens[t]).collect();
    let pred: Vec<Point> = best.coords.clone();
    let reference: Vec<Point> = in_truth.iter().map(|&t| coords[t]).collect();
    let ligand: Vec<usize> = (0..in_truth.len()).filter(|&r| truth.tokens[in_truth[r]].is_ligand()).collect();
    let pocket: Vec<usize> = (0..in_truth.len()).filter(|&r| !truth.tokens[in_truth[r]].is_ligand()).collect();

    let plain = ligand_rmsd(&pred, &reference, &ligand, &pocket, true)?;
    let graph = ligand_graph(truth, &ligand.iter().map(|&r| in_truth[r]).collect::<Vec<_>>())?;
    let sym = symmetry_corrected_rmsd(&pred, &reference, &ligand, &pocket, &graph, true)?;

    let mut placed: Vec<Option<Point>> = vec![None; truth.len()];
    for (r, &t) in in_truth.iter().enumerate() {
        placed[t] = Some(pred[r]);
    }
    let lddt = lddt_pli(
        &placed,
        coords,
        &truth.ligand_indices(),
        &truth.protein_indices(),
        LDDT_RADIUS,
        &LDDT_THRESHOLDS,
    )?;
    let entropy = aggregate_entropy(d, &pose.pocket)?;
    Ok(PoseEvaluation {
        id: truth.id.clone(),
        rmsd: plain.rmsd,
        rmsd_symcorr: sym.rmsd,
        lddt_pli: lddt,
        h_ll: entropy.h_ll,
        h_lp: entropy.h_lp,
        h_pp: entropy.h_pp,
        symmetry_fallback: sym.fallback,
    })
}

/// Molecular graph of the given ligand tokens, in that order.
fn ligand_graph(c: &TokenizedComplex, ligand: &[usize]) -> Result<LigandGraph> {
    let mut local = vec![usize::MAX; c.len()];
    for (k, &t) in ligand.iter().enumerate() {
        local[t] = k;
    }
    let elements = ligand
        .iter()
        .map(|&t| c.tokens[t].element.clone().unwrap_or_default())
        .collect();
    let bonds: Vec<_> = c
        .bonds
        .iter()
        .filter(|b| local[b.0] != usize::MAX && local[b.1] != usize::MAX)
        .map(|b| crate::complex::Bond(local[b.0], local[b.1], b.2))
        .collect();
    LigandGraph::new(elements, &bonds)
}
