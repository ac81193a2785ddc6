//! Coordinate generation by direct optimization: points start from a unit
//! Gaussian and Adam minimizes the mean squared error between their pairwise
//! distances and a reference matrix of expected distances.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex::dist;
use crate::distogram::Distogram;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::pocket::{pocket_residues, POCKET_CUTOFF};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub patience: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub pocket_cutoff: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            max_iters: 5000,
            tol: 1e-3,
            patience: 20,
            n_samples: 10,
            seed: 0,
            pocket_cutoff: POCKET_CUTOFF,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.max_iters > 0
            && self.tol > 0.0
            && self.patience >= 1
            && self.n_samples >= 1
            && self.pocket_cutoff > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub coords: Vec<[f64; 3]>,
    pub final_loss: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Mean squared distance error over ordered pairs `i != j`.
pub fn optimization_loss(coords: &[[f64; 3]], reference: &Array2<f64>, weights: Option<&Array2<f64>>) -> Result<f64> {
    check_reference(coords.len(), reference, weights)?;
    Ok(loss_and_grad(coords, reference, weights, false).0)
}

fn check_reference(m: usize, reference: &Array2<f64>, weights: Option<&Array2<f64>>) -> Result<()> {
    if m < 2 {
        return Err(Error::invalid("pose optimization needs at least two points"));
    }
    if reference.dim() != (m, m) || weights.is_some_and(|w| w.dim() != (m, m)) {
        return Err(Error::invalid("reference shape does not match point count"));
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("reference distances must be finite"));
    }
    Ok(())
}

fn loss_and_grad(
    x: &[[f64; 3]],
    r: &Array2<f64>,
    w: Option<&Array2<f64>>,
    want_grad: bool,
) -> (f64, Vec<[f64; 3]>) {
    let m = x.len();
    let norm = 1.0 / (m * (m - 1)) as f64;
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![[0.0; 3]; m] } else { Vec::new() };
    for i in 0..m {
        for j in (i + 1)..m {
            let d = dist(&x[i], &x[j]);
            let (wij, wji) = w.map_or((1.0, 1.0), |w| (w[[i, j]], w[[j, i]]));
            let (eij, eji) = (d - r[[i, j]], d - r[[j, i]]);
            loss += wij * eij * eij + wji * eji * eji;
            if want_grad && d > 0.0 {
                let coef = 2.0 * norm * (wij * eij + wji * eji) / d;
                for k in 0..3 {
                    let g = coef * (x[i][k] - x[j][k]);
                    grad[i][k] += g;
                    grad[j][k] -= g;
                }
            }
        }
    }
    (loss * norm, grad)
}

/// Stops after `patience` consecutive steps whose loss changed by less than `tol`.
#[derive(Debug, Clone)]
pub struct ConvergenceDetector {
    tol: f64,
    patience: usize,
    last: f64,
    streak: usize,
}

impl ConvergenceDetector {
    pub fn new(tol: f64, patience: usize, initial_loss: f64) -> Self {
        Self {
            tol,
            patience,
            last: initial_loss,
            streak: 0,
        }
    }

    /// Records a new loss; true once the stopping rule fires.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.streak = if (loss - self.last).abs() < self.tol { self.streak + 1 } else { 0 };
        self.last = loss;
        self.streak >= self.patience
    }
}

/// One optimization run from a seeded `N(0, I)` start.
pub fn optimize_once(reference: &Array2<f64>, cfg: &OptConfig, seed: u64) -> Result<PoseSample> {
    optimize_weighted(reference, None, cfg, seed)
}

pub fn optimize_weighted(
    reference: &Array2<f64>,
    weights: Option<&Array2<f64>>,
    cfg: &OptConfig,
    seed: u64,
) -> Result<PoseSample> {
    let m = reference.nrows();
    check_reference(m, reference, weights)?;
    let mut r = rng::seeded(seed);
    let mut x = Array2::from_shape_simple_fn((m, 3), || rng::normal(&mut r));
    let as_points = |x: &Array2<f64>| -> Vec<[f64; 3]> { x.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect() };
    let (mut loss, mut g) = loss_and_grad(&as_points(&x), reference, weights, true);
    let mut detector = ConvergenceDetector::new(cfg.tol, cfg.patience, loss);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        let gm = Array2::from_shape_fn((m, 3), |(i, k)| g[i][k]);
        opt.step_tensors(vec![&mut x], &[&gm]);
        iters += 1;
        (loss, g) = loss_and_grad(&as_points(&x), reference, weights, true);
        if !loss.is_finite() {
            return Err(Error::Numeric {
                layer: iters,
                message: "pose loss became non-finite".into(),
            });
        }
        if detector.observe(loss) {
            converged = true;
            break;
        }
    }
    Ok(PoseSample {
        coords: as_points(&x),
        final_loss: loss,
        iters,
        converged,
    })
}

/// `n_samples` independent runs, seeded `seed + sample_index`. A run that
/// fails is retried once from a fresh seed; a second failure leaves `None`.
pub fn optimize_pose(reference: &Array2<f64>, cfg: &OptConfig) -> Result<Vec<Option<PoseSample>>> {
    cfg.validate()?;
    check_reference(reference.nrows(), reference, None)?;
    Ok((0..cfg.n_samples)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k as u64);
            optimize_once(reference, cfg, seed)
                .or_else(|_| optimize_once(reference, cfg, rng::substream(seed, "retry")))
                .ok()
        })
        .collect())
}

/// Lowest final loss; ties go to the lowest sample index.
pub fn select_best(samples: &[Option<PoseSample>]) -> Result<(usize, &PoseSample)> {
    samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().map(|s| (i, s)))
        .fold(None, |best: Option<(usize, &PoseSample)>, (i, s)| match best {
            Some((_, b)) if b.final_loss <= s.final_loss => best,
            _ => Some((i, s)),
        })
        .ok_or_else(|| Error::invalid("every pose sample failed"))
}

/// Reference distances for ligand plus pocket, with the token order used.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    /// Symmetric `M × M` expected distances over `tokens`.
    pub matrix: Array2<f64>,
    /// Ligand tokens first, then pocket tokens, as indices into the distogram.
    pub tokens: Vec<usize>,
    pub n_ligand: usize,
    pub pocket: Vec<usize>,
    /// No protein token fell inside the cutoff; the reference is ligand-only.
    pub empty_pocket: bool,
}

pub fn build_reference(d: &Distogram, pocket_cutoff: f64) -> Result<Reference> {
    let expected = d.expected_distances();
    let pocket = pocket_residues(&expected, &d.token_kinds, pocket_cutoff)?;
    let ligand = d.ligand_indices();
    let tokens: Vec<usize> = ligand.iter().chain(&pocket).copied().collect();
    let m = tokens.len();
    let matrix = Array2::from_shape_fn((m, m), |(a, b)| {
        if a == b {
            0.0
        } else {
            0.5 * (expected[[tokens[a], tokens[b]]] + expected[[tokens[b], tokens[a]]])
        }
    });
    Ok(Reference {
        matrix,
        n_ligand: ligand.len(),
        empty_pocket: pocket.is_empty(),
        pocket,
        tokens,
    })
}

// ---------------------------------------------------------------------------
// Pose file: {samples: [{coords, final_loss, iters, converged} | null], best, pocket}
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub samples: Vec<Option<PoseSample>>,
    pub best: usize,
    pub pocket: Vec<usize>,
    /// Distogram token index of every row of `coords`.
    #[serde(default)]
    pub tokens: Vec<usize>,
}

impl PoseFile {
    pub fn best_sample(&self) -> Result<&PoseSample> {
        self.samples
            .get(self.best)
            .and_then(|s| s.as_ref())
            .ok_or_else(|| Error::invalid("pose file best index does not name a sample"))
    }
}
