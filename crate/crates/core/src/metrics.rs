//! Pose evaluation on coarse tokens: weighted rigid alignment, ligand RMSD
//! with optional graph-symmetry correction, LDDT-PLI, success rates and
//! binned calibration reports.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::complex::{dist, Bond};
use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Maps a predicted cloud onto the truth: `truth ≈ rotation · pred + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub weighted_rmsd: f64,
}

impl Alignment {
    pub fn apply(&self, p: &Point) -> Point {
        let v = self.rotation * Vector3::from(*p) + self.translation;
        [v.x, v.y, v.z]
    }
}

fn weighted_centroid(pts: &[Point], w: &[f64]) -> Vector3<f64> {
    let total: f64 = w.iter().sum();
    pts.iter()
        .zip(w)
        .fold(Vector3::zeros(), |acc, (p, &wi)| acc + Vector3::from(*p) * wi)
        / total
}

/// Weighted least-squares proper rotation and translation (Kabsch).
pub fn kabsch_align(pred: &[Point], truth: &[Point], weights: &[f64]) -> Result<Alignment> {
    let m = pred.len();
    if m < 3 || truth.len() != m || weights.len() != m {
        return Err(Error::invalid("alignment needs at least three matched points and weights"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid("alignment weights must be non-negative with positive sum"));
    }
    if pred.iter().chain(truth).flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("alignment coordinates must be finite"));
    }
    let cp = weighted_centroid(pred, weights);
    let ct = weighted_centroid(truth, weights);
    let mut h = Matrix3::zeros();
    let mut spread_p = Matrix3::zeros();
    let mut spread_t = Matrix3::zeros();
    for ((p, t), &w) in pred.iter().zip(truth).zip(weights) {
        let a = Vector3::from(*p) - cp;
        let b = Vector3::from(*t) - ct;
        h += a * b.transpose() * w;
        spread_p += a * a.transpose() * w;
        spread_t += b * b.transpose() * w;
    }
    for s in [spread_p, spread_t] {
        let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0].max(1.0) {
            return Err(Error::invalid("degenerate point cloud: centered rank below 2"));
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested V^T").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = ct - rotation * cp;
    let al = Alignment {
        rotation,
        translation,
        weighted_rmsd: 0.0,
    };
    let total: f64 = weights.iter().sum();
    let sq: f64 = pred
        .iter()
        .zip(truth)
        .zip(weights)
        .map(|((p, t), &w)| w * dist(&al.apply(p), t).powi(2))
        .sum();
    Ok(Alignment {
        weighted_rmsd: (sq / total).sqrt(),
        ..al
    })
}

/// Reflection through the yz-plane.
pub fn mirrored(pts: &[Point]) -> Vec<Point> {
    pts.iter().map(|p| [-p[0], p[1], p[2]]).collect()
}

/// Plain RMSD between matched points.
pub fn rmsd(a: &[Point], b: &[Point]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| dist(x, y).powi(2)).sum();
    (sq / a.len().max(1) as f64).sqrt()
}

/// RMSD of the whole cloud after equal-weight alignment; with
/// `chirality_blind`, the better of the cloud and its mirror image.
pub fn aligned_rmsd(pred: &[Point], truth: &[Point], chirality_blind: bool) -> Result<f64> {
    let w = vec![1.0; pred.len()];
    let direct = kabsch_align(pred, truth, &w)?.weighted_rmsd;
    if chirality_blind {
        Ok(direct.min(kabsch_align(&mirrored(pred), truth, &w)?.weighted_rmsd))
    } else {
        Ok(direct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LigandRmsd {
    pub rmsd: f64,
    /// No pocket tokens were available; alignment used the ligand alone.
    pub ligand_only_alignment: bool,
    /// The mirrored prediction gave the reported value.
    pub mirrored: bool,
}

/// Ligand RMSD after aligning ligand and pocket with equal weights.
///
/// `pred[k]` and `truth[k]` correspond; `ligand` and `pocket` index into both.
pub fn ligand_rmsd(
    pred: &[Point],
    truth: &[Point],
    ligand: &[usize],
    pocket: &[usize],
    chirality_blind: bool,
) -> Result<LigandRmsd> {
    ligand_rmsd_mapped(pred, truth, ligand, pocket, None, chirality_blind)
}

/// As [`ligand_rmsd`], with predicted ligand atom `ligand[i]` matched to
/// truth atom `ligand[perm[i]]`.
fn ligand_rmsd_mapped(
    pred: &[Point],
    truth: &[Point],
    ligand: &[usize],
    pocket: &[usize],
    perm: Option<&[usize]>,
    chirality_blind: bool,
) -> Result<LigandRmsd> {
    if ligand.is_empty() || pred.len() != truth.len() {
        return Err(Error::invalid("ligand RMSD needs ligand tokens and matched clouds"));
    }
    if ligand.iter().chain(pocket).any(|&i| i >= pred.len()) {
        return Err(Error::invalid("ligand or pocket index out of range"));
    }
    let truth_of = |i: usize| match perm {
        Some(p) => ligand[p[i]],
        None => ligand[i],
    };
    let ligand_only = pocket.is_empty();
    let score = |p: &[Point]| -> Result<f64> {
        let mut a: Vec<Point> = ligand.iter().map(|&i| p[i]).collect();
        let mut b: Vec<Point> = (0..ligand.len()).map(|i| truth[truth_of(i)]).collect();
        a.extend(pocket.iter().map(|&j| p[j]));
        b.extend(pocket.iter().map(|&j| truth[j]));
        let al = kabsch_align(&a, &b, &vec![1.0; a.len()])?;
        let moved: Vec<Point> = a[..ligand.len()].iter().map(|x| al.apply(x)).collect();
        Ok(rmsd(&moved, &b[..ligand.len()]))
    };
    let direct = score(pred)?;
    if chirality_blind {
        let m = score(&mirrored(pred))?;
        if m < direct {
            return Ok(LigandRmsd {
                rmsd: m,
                ligand_only_alignment: ligand_only,
                mirrored: true,
            });
        }
    }
    Ok(LigandRmsd {
        rmsd: direct,
        ligand_only_alignment: ligand_only,
        mirrored: false,
    })
}

pub const AUTOMORPHISM_CAP: usize = 10_000;

/// Ligand graph over local atom indices `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LigandGraph {
    pub elements: Vec<String>,
    /// Bond order between atoms, 0 if unbonded.
    adjacency: Vec<Vec<u8>>,
}

impl LigandGraph {
    pub fn new(elements: Vec<String>, bonds: &[Bond]) -> Result<Self> {
        let n = elements.len();
        let mut adjacency = vec![vec![0u8; n]; n];
        for b in bonds {
            if b.0 >= n || b.1 >= n || b.0 == b.1 {
                return Err(Error::invalid(format!("bond ({}, {}) is not between distinct ligand atoms", b.0, b.1)));
            }
            adjacency[b.0][b.1] = b.2.max(1);
            adjacency[b.1][b.0] = b.2.max(1);
        }
        Ok(Self { elements, adjacency })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    fn degree(&self, i: usize) -> usize {
        self.adjacency[i].iter().filter(|&&o| o > 0).count()
    }

    /// Element-, degree- and bond-order-preserving permutations, found by
    /// backtracking. Returns `None` once more than `cap` exist.
    pub fn automorphisms(&self, cap: usize) -> Option<Vec<Vec<usize>>> {
        let n = self.len();
        let degree: Vec<usize> = (0..n).map(|i| self.degree(i)).collect();
        let order = self.search_order();
        let mut image = vec![usize::MAX; n];
        let mut used = vec![false; n];
        let mut out = Vec::new();
        let ok = self.extend(&order, 0, &degree, &mut image, &mut used, &mut out, cap);
        ok.then_some(out)
    }

    /// Breadth-first order so each atom after the first usually has a mapped neighbor.
    fn search_order(&self) -> Vec<usize> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        for start in 0..n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut queue = std::collections::VecDeque::from([start]);
            while let Some(i) = queue.pop_front() {
                order.push(i);
                for j in 0..n {
                    if self.adjacency[i][j] > 0 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        order
    }

    #[allow(clippy::too_many_arguments)]
    fn extend(
        &self,
        order: &[usize],
        depth: usize,
        degree: &[usize],
        image: &mut [usize],
        used: &mut [bool],
        out: &mut Vec<Vec<usize>>,
        cap: usize,
    ) -> bool {
        if depth == order.len() {
            out.push(image.to_vec());
            return out.len() <= cap;
        }
        let i = order[depth];
        for j in 0..self.len() {
            if used[j] || self.elements[j] != self.elements[i] || degree[j] != degree[i] {
                continue;
            }
            let consistent = order[..depth]
                .iter()
                .all(|&k| self.adjacency[i][k] == self.adjacency[j][image[k]]);
            if !consistent {
                continue;
            }
            image[i] = j;
            used[j] = true;
            let keep_going = self.extend(order, depth + 1, degree, image, used, out, cap);
            used[j] = false;
            image[i] = usize::MAX;
            if !keep_going {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetryRmsd {
    pub rmsd: f64,
    /// Number of automorphisms searched (0 when the search gave up).
    pub n_automorphisms: usize,
    /// The automorphism count exceeded the cap; `rmsd` is uncorrected.
    pub fallback: bool,
}

/// Minimum ligand RMSD over graph automorphisms of the ligand.
pub fn symmetry_corrected_rmsd(
    pred: &[Point],
    truth: &[Point],
    ligand: &[usize],
    pocket: &[usize],
    graph: &LigandGraph,
    chirality_blind: bool,
) -> Result<SymmetryRmsd> {
    if graph.len() != ligand.len() {
        return Err(Error::invalid("ligand graph size differs from ligand token count"));
    }
    let Some(autos) = graph.automorphisms(AUTOMORPHISM_CAP) else {
        return Ok(SymmetryRmsd {
            rmsd: ligand_rmsd(pred, truth, ligand, pocket, chirality_blind)?.rmsd,
            n_automorphisms: 0,
            fallback: true,
        });
    };
    let mut best = f64::INFINITY;
    for perm in &autos {
        let r = ligand_rmsd_mapped(pred, truth, ligand, pocket, Some(perm), chirality_blind)?.rmsd;
        best = best.min(r);
    }
    Ok(SymmetryRmsd {
        rmsd: best,
        n_automorphisms: autos.len(),
        fallback: false,
    })
}

pub const LDDT_RADIUS: f64 = 6.0;
pub const LDDT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// LDDT over ligand-protein pairs closer than `radius` in the truth.
///
/// `pred[k]` is `None` for tokens the prediction does not place; such pairs
/// count as failures at every threshold. Absent when no pair qualifies.
pub fn lddt_pli(
    pred: &[Option<Point>],
    truth: &[Point],
    ligand: &[usize],
    protein: &[usize],
    radius: f64,
    thresholds: &[f64],
) -> Result<Option<f64>> {
    if pred.len() != truth.len() || thresholds.is_empty() {
        return Err(Error::invalid("lddt_pli needs matched clouds and at least one threshold"));
    }
    let mut pairs = 0usize;
    let mut hits = vec![0usize; thresholds.len()];
    for &l in ligand {
        for &p in protein {
            let dt = dist(&truth[l], &truth[p]);
            if dt >= radius {
                continue;
            }
            pairs += 1;
            if let (Some(a), Some(b)) = (pred[l], pred[p]) {
                let err = (dist(&a, &b) - dt).abs();
                for (h, &t) in hits.iter_mut().zip(thresholds) {
                    if err < t {
                        *h += 1;
                    }
                }
            }
        }
    }
    if pairs == 0 {
        return Ok(None);
    }
    let mean = hits.iter().map(|&h| h as f64 / pairs as f64).sum::<f64>() / thresholds.len() as f64;
    Ok(Some(mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseResult {
    pub rmsd: f64,
    pub lddt_pli: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRates {
    /// Fraction with RMSD < 2 Å.
    pub rate_rmsd2: f64,
    /// Fraction with RMSD < 2 Å and LDDT-PLI > 0.8.
    pub rate_combined: f64,
}

pub fn is_success(r: &PoseResult) -> bool {
    r.rmsd < 2.0
}

pub fn success_rates(results: &[PoseResult]) -> Result<SuccessRates> {
    if results.is_empty() {
        return Err(Error::invalid("success rates need at least one result"));
    }
    let n = results.len() as f64;
    let rmsd_ok = results.iter().filter(|r| is_success(r)).count() as f64;
    let both = results
        .iter()
        .filter(|r| is_success(r) && r.lddt_pli.is_some_and(|l| l > 0.8))
        .count() as f64;
    Ok(SuccessRates {
        rate_rmsd2: rmsd_ok / n,
        rate_combined: both / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Absent for empty bins.
    pub success_rate: Vec<Option<f64>>,
    /// Values outside the outer edges, not counted in any bin.
    pub out_of_range: usize,
    /// Success rate never increases across occupied bins.
    pub nonincreasing: bool,
}

/// Bins `values` by half-open intervals `[e_k, e_{k+1})`, the last closed on
/// the right, and reports the success rate per bin.
pub fn binned_calibration(values: &[f64], successes: &[bool], edges: &[f64]) -> Result<CalibrationReport> {
    if values.len() != successes.len() {
        return Err(Error::invalid("values and successes differ in length"));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("bin edges must be strictly increasing with at least two entries"));
    }
    let nb = edges.len() - 1;
    let mut counts = vec![0usize; nb];
    let mut wins = vec![0usize; nb];
    let mut out_of_range = 0;
    for (&v, &s) in values.iter().zip(successes) {
        let last = edges[nb];
        let bin = if v == last { Some(nb - 1) } else { (0..nb).find(|&b| v >= edges[b] && v < edges[b + 1]) };
        match bin {
            Some(b) => {
                counts[b] += 1;
                wins[b] += usize::from(s);
            }
            None => out_of_range += 1,
        }
    }
    let success_rate: Vec<Option<f64>> = counts
        .iter()
        .zip(&wins)
        .map(|(&c, &w)| (c > 0).then(|| w as f64 / c as f64))
        .collect();
    let occupied: Vec<f64> = success_rate.iter().flatten().copied().collect();
    let nonincreasing = occupied.windows(2).all(|w| w[1] <= w[0]);
    Ok(CalibrationReport {
        bin_edges: edges.to_vec(),
        counts,
        success_rate,
        out_of_range,
        nonincreasing,
    })
}

pub const ENTROPY_EDGES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Success rate per entropy bin.
pub fn entropy_calibration(h: &[f64], successes: &[bool], edges: &[f64]) -> Result<CalibrationReport> {
    binned_calibration(h, successes, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> Vec<Point> {
        vec![
            [0.0, 0.0, 0.0],
            [1.5, 0.2, -0.3],
            [0.4, 2.1, 0.8],
            [-1.2, 0.7, 1.9],
            [0.9, -1.4, 2.2],
        ]
    }

    fn rotate(p: &[Point], axis: Vector3<f64>, angle: f64, shift: Vector3<f64>) -> Vec<Point> {
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        p.iter()
            .map(|x| {
                let v = r * Vector3::from(*x) + shift;
                [v.x, v.y, v.z]
            })
            .collect()
    }

    #[test]
    fn identical_clouds_align_trivially() {
        let c = cloud();
        let a = kabsch_align(&c, &c, &[1.0; 5]).unwrap();
        assert!(a.weighted_rmsd < 1e-12);
        assert!((a.rotation - Matrix3::identity()).norm() < 1e-9);
    }

    #[test]
    fn rigid_copy_has_zero_rmsd() {
        let c = cloud();
        let moved = rotate(&c, Vector3::new(1.0, 2.0, -0.5), 1.1, Vector3::new(3.0, -2.0, 5.0));
        let a = kabsch_align(&c, &moved, &[1.0; 5]).unwrap();
        assert!(a.weighted_rmsd < 1e-9);
        assert!((a.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_clouds_are_rejected() {
        let line: Vec<Point> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert!(kabsch_align(&line, &line, &[1.0; 4]).is_err());
        assert!(kabsch_align(&cloud()[..2], &cloud()[..2], &[1.0; 2]).is_err());
    }

    #[test]
    fn shifted_ligand_in_fixed_pocket() {
        // Pocket of 12 fixed points, ligand of 2 points shifted 3 Å.
        let mut truth: Vec<Point> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        for k in 0..12 {
            let t = k as f64;
            truth.push([8.0 * (t * 0.7).cos(), 8.0 * (t * 0.7).sin(), 2.0 * t - 10.0]);
        }
        let mut pred = truth.clone();
        pred[0][1] += 3.0;
        pred[1][1] += 3.0;
        let ligand = [0, 1];
        let pocket: Vec<usize> = (2..14).collect();
        let r = ligand_rmsd(&pred, &truth, &ligand, &pocket, false).unwrap();
        assert!((r.rmsd - 3.0).abs() < 0.5, "{}", r.rmsd);
        assert!(ligand_rmsd(&truth, &truth, &ligand, &pocket, false).unwrap().rmsd < 1e-9);
    }

    #[test]
    fn mirror_handling() {
        let truth = cloud();
        let pred = mirrored(&truth);
        let all: Vec<usize> = (0..5).collect();
        let plain = ligand_rmsd(&pred, &truth, &all, &[], false).unwrap();
        let blind = ligand_rmsd(&pred, &truth, &all, &[], true).unwrap();
        assert!(plain.rmsd > 0.1);
        assert!(blind.rmsd < 1e-9 && blind.mirrored && blind.ligand_only_alignment);
    }

    #[test]
    fn hexagon_automorphisms() {
        let bonds: Vec<Bond> = (0..6).map(|i| Bond(i, (i + 1) % 6, 1)).collect();
        let g = LigandGraph::new(vec!["C".into(); 6], &bonds).unwrap();
        assert_eq!(g.automorphisms(AUTOMORPHISM_CAP).unwrap().len(), 12);
        let g = LigandGraph::new(vec!["C".into(); 6], &bonds).unwrap();
        assert!(g.automorphisms(5).is_none());
    }

    #[test]
    fn lddt_counting() {
        let truth: Vec<Point> = vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 4.0, 0.0], [20.0, 0.0, 0.0]];
        let mut pred: Vec<Option<Point>> = truth.iter().copied().map(Some).collect();
        assert_eq!(lddt_pli(&pred, &truth, &[0], &[1, 2, 3], 6.0, &LDDT_THRESHOLDS).unwrap(), Some(1.0));
        pred[1] = Some([3.2, 0.0, 0.0]);
        pred[2] = Some([0.0, 7.0, 0.0]);
        let v = lddt_pli(&pred, &truth, &[0], &[1, 2, 3], 6.0, &LDDT_THRESHOLDS).unwrap().unwrap();
        assert!((v - 0.625).abs() < 1e-12);
        pred[2] = None;
        let v = lddt_pli(&pred, &truth, &[0], &[1, 2], 6.0, &LDDT_THRESHOLDS).unwrap().unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(lddt_pli(&pred, &truth, &[0], &[3], 6.0, &LDDT_THRESHOLDS).unwrap(), None);
    }

    #[test]
    fn success_thresholds_are_strict() {
        let r = success_rates(&[
            PoseResult { rmsd: 1.9, lddt_pli: Some(0.79) },
            PoseResult { rmsd: 0.5, lddt_pli: Some(0.95) },
            PoseResult { rmsd: 2.0, lddt_pli: Some(0.99) },
            PoseResult { rmsd: 1.0, lddt_pli: None },
        ])
        .unwrap();
        assert_eq!(r.rate_rmsd2, 0.75);
        assert_eq!(r.rate_combined, 0.25);
        assert!(success_rates(&[]).is_err());
    }

    #[test]
    fn calibration_bins() {
        let rep = entropy_calibration(&[0.1, 0.2, 0.0], &[true, true, true], &ENTROPY_EDGES).unwrap();
        assert_eq!(rep.counts, vec![3, 0, 0, 0]);
        assert_eq!(rep.success_rate, vec![Some(1.0), None, None, None]);
        let rep = entropy_calibration(&[1.0, 0.5, 0.6, 0.3], &[false, true, false, true], &ENTROPY_EDGES).unwrap();
        assert_eq!(rep.counts, vec![0, 1, 2, 1]);
        assert_eq!(rep.success_rate, vec![None, Some(1.0), Some(0.5), Some(0.0)]);
        assert!(rep.nonincreasing);
    }
}
