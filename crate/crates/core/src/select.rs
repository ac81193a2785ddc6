//! Batch selection over joint posterior samples, pathwise conditioning on
//! observed affinities, and a simulated design-make-test-analyze loop.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::epinet::{index_vector, sample_posterior, Epinet, EpinetPosterior};
use crate::error::{Error, Result};
use crate::rng;

/// A chosen batch, as column indices in selection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Fewer candidates than the requested batch size; everything was taken.
    pub short: bool,
}

/// Candidate order used to break ties: ascending id.
fn id_order(ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    order
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} must be finite")));
    }
    Ok(())
}

/// Top `b` by prediction; ties go to the smaller id.
pub fn greedy_select(ids: &[String], predictions: &[f64], b: usize) -> Result<Selection> {
    if ids.len() != predictions.len() {
        return Err(Error::invalid("ids and predictions differ in length"));
    }
    check_finite(predictions, "predictions")?;
    let mut order = id_order(ids);
    // Stable sort keeps id order among equal predictions.
    order.sort_by(|&a, &c| predictions[c].total_cmp(&predictions[a]));
    order.truncate(b);
    Ok(Selection {
        indices: order,
        short: b > ids.len(),
    })
}

// ---------------------------------------------------------------------------
// EMAX
// ---------------------------------------------------------------------------

/// Mean over sample paths (rows) of the maximum over the `subset` columns.
pub fn emax(samples: ArrayView2<f64>, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::invalid("EMAX needs a nonempty subset"));
    }
    if let Some(&c) = subset.iter().find(|&&c| c >= samples.ncols()) {
        return Err(Error::invalid(format!("column {c} out of range")));
    }
    if samples.nrows() == 0 {
        return Err(Error::invalid("EMAX needs at least one sample path"));
    }
    let total: f64 = samples
        .rows()
        .into_iter()
        .map(|row| subset.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / samples.nrows() as f64)
}

fn mean_of_max(current: &[f64], column: ndarray::ArrayView1<f64>) -> f64 {
    current.iter().zip(column).map(|(a, b)| a.max(*b)).sum::<f64>() / current.len() as f64
}

/// Relative slack below which a swap does not count as an improvement.
const SWAP_TOLERANCE: f64 = 1e-12;

/// Batch of `b` columns with high EMAX.
///
/// Built by greedy augmentation (each step adds the column that most raises
/// EMAX, ties to the smaller id), then refined by single swaps between batch
/// and candidates until no swap improves EMAX.
pub fn emax_select(p: &EpinetPosterior, b: usize) -> Result<Selection> {
    p.validate()?;
    let (k, n) = p.samples.dim();
    if k == 0 {
        return Err(Error::invalid("EMAX needs at least one sample path"));
    }
    let short = b > n;
    let b = b.min(n);
    let order = id_order(&p.ids);
    let cols: Vec<_> = (0..n).map(|c| p.samples.column(c)).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(b);
    let mut in_batch = vec![false; n];
    let mut current = vec![f64::NEG_INFINITY; k];
    while chosen.len() < b {
        let mut best: Option<(usize, f64)> = None;
        for &c in order.iter().filter(|&&c| !in_batch[c]) {
            let v = mean_of_max(&current, cols[c]);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((c, v));
            }
        }
        let (c, _) = best.expect("candidates remain while the batch is short");
        chosen.push(c);
        in_batch[c] = true;
        for (m, v) in current.iter_mut().zip(cols[c]) {
            *m = m.max(*v);
        }
    }
    if b >= 2 && b < n {
        refine_by_swaps(p.samples.view(), &order, &mut chosen, &mut in_batch);
    }
    Ok(Selection { indices: chosen, short })
}

fn refine_by_swaps(samples: ArrayView2<f64>, order: &[usize], chosen: &mut [usize], in_batch: &mut [bool]) {
    let k = samples.nrows();
    let b = chosen.len();
    let mut value = emax(samples, chosen).expect("batch is nonempty");
    // Each accepted swap strictly raises EMAX, so this terminates.
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for pos in 0..b {
            let rest: Vec<f64> = (0..k)
                .map(|r| {
                    (0..b)
                        .filter(|&q| q != pos)
                        .map(|q| samples[[r, chosen[q]]])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            for &c in order.iter().filter(|&&c| !in_batch[c]) {
                let v = mean_of_max(&rest, samples.column(c));
                if v > value + SWAP_TOLERANCE * value.abs().max(1.0) && best.is_none_or(|(_, _, bv)| v > bv) {
                    best = Some((pos, c, v));
                }
            }
        }
        match best {
            Some((pos, c, v)) => {
                in_batch[chosen[pos]] = false;
                in_batch[c] = true;
                chosen[pos] = c;
                value = v;
            }
            None => return,
        }
    }
}

// ---------------------------------------------------------------------------
// Pathwise conditioning
// ---------------------------------------------------------------------------

pub const SIGMA_OBS: f64 = 0.5;

/// Source of the per-path observation noise ε.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationNoise {
    /// Fresh `N(0, σ²)` per path and observation, from this seed.
    Sampled(u64),
    /// ε = 0, for exact-interpolation checks.
    Zero,
}

/// Conditions every sample path on observed `(column, y)` pairs.
///
/// Per path `k`: `y_new = y_k + K̂*(K̂ + σ²I)⁻¹(y_obs − y_k[obs] − ε_k)`, with
/// `K̂` and `K̂*` the across-path covariances (1/(K−1), centered per column)
/// between observed columns and between all columns and observed columns.
pub fn pathwise_update(
    p: &EpinetPosterior,
    observed: &[(usize, f64)],
    sigma_obs: f64,
    noise: ObservationNoise,
) -> Result<EpinetPosterior> {
    p.validate()?;
    if observed.is_empty() {
        return Ok(p.clone());
    }
    if !(sigma_obs >= 0.0 && sigma_obs.is_finite()) {
        return Err(Error::invalid("sigma_obs must be finite and nonnegative"));
    }
    let (k, n) = p.samples.dim();
    if k < 2 {
        return Err(Error::invalid("pathwise update needs at least two sample paths"));
    }
    if let Some(&(c, _)) = observed.iter().find(|(c, _)| *c >= n) {
        return Err(Error::invalid(format!("observed column {c} out of range")));
    }
    check_finite(&observed.iter().map(|o| o.1).collect::<Vec<_>>(), "observations")?;
    let obs: Vec<usize> = observed.iter().map(|o| o.0).collect();
    let m = obs.len();

    let mean = p.samples.mean_axis(Axis(0)).expect("at least two rows");
    let centered = &p.samples - &mean;
    let centered_obs = centered.select(Axis(1), &obs);
    let norm = 1.0 / (k - 1) as f64;
    // N × m and m × m covariances.
    let cross = centered.t().dot(&centered_obs) * norm;
    let gram = centered_obs.t().dot(&centered_obs) * norm;
    let a = DMatrix::from_fn(m, m, |i, j| gram[[i, j]] + if i == j { sigma_obs * sigma_obs } else { 0.0 });
    let chol = a.cholesky().filter(|c| well_conditioned(c.l_dirty(), m)).ok_or_else(|| Error::Numeric {
        layer: usize::MAX,
        message: "observed covariance is singular; use sigma_obs > 0 or observe distinct columns".into(),
    })?;

    let rows: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|row| {
            let eps = match noise {
                ObservationNoise::Sampled(seed) => {
                    let mut r = rng::seeded(rng::indexed(rng::substream(seed, "pathwise-noise"), row as u64));
                    rng::normal_vec(&mut r, m).into_iter().map(|e| sigma_obs * e).collect()
                }
                ObservationNoise::Zero => vec![0.0; m],
            };
            let resid = DVector::from_fn(m, |j, _| observed[j].1 - p.samples[[row, obs[j]]] - eps[j]);
            let w = chol.solve(&resid);
            (0..n)
                .map(|c| p.samples[[row, c]] + (0..m).map(|j| cross[[c, j]] * w[j]).sum::<f64>())
                .collect()
        })
        .collect();
    let samples = Array2::from_shape_fn((k, n), |(r, c)| rows[r][c]);
    Ok(EpinetPosterior {
        ids: p.ids.clone(),
        base_predictions: p.base_predictions.clone(),
        samples,
    })
}

/// Rejects factorizations whose pivots collapse relative to the largest one.
fn well_conditioned(l: &DMatrix<f64>, m: usize) -> bool {
    let diag: Vec<f64> = (0..m).map(|i| l[(i, i)]).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    max > 0.0 && diag.iter().all(|d| d.is_finite() && *d > 1e-7 * max)
}

// ---------------------------------------------------------------------------
// Selection pool
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolItem {
    pub id: String,
    pub g: Vec<f64>,
    pub y_base: f64,
    /// Revealed to a strategy only once the item is selected.
    pub y_true: f64,
}

impl PoolItem {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains([',', ';', '\n', '"']) {
            return Err(Error::invalid(format!("pool id {:?} is empty or contains a separator", self.id)));
        }
        if self.g.is_empty() || self.g.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{}: latent must be nonempty and finite", self.id)));
        }
        if !self.y_base.is_finite() || !self.y_true.is_finite() {
            return Err(Error::invalid(format!("{}: affinities must be finite", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPool {
    items: Vec<PoolItem>,
}

impl SelectionPool {
    pub fn new(items: Vec<PoolItem>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for it in &items {
            it.validate()?;
            if !seen.insert(it.id.as_str()) {
                return Err(Error::invalid(format!("duplicate pool id {}", it.id)));
            }
            if it.g.len() != items[0].g.len() {
                return Err(Error::invalid("pool latents differ in width"));
            }
        }
        if items.is_empty() {
            return Err(Error::invalid("empty pool"));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }

    pub fn latents(&self) -> Array2<f64> {
        let d = self.items[0].g.len();
        Array2::from_shape_fn((self.items.len(), d), |(i, k)| self.items[i].g[k])
    }

    pub fn base_predictions(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.y_base).collect()
    }

    /// Joint posterior over the pool, one column per item in pool order.
    pub fn posterior(&self, model: &Epinet, k: usize, seed: u64) -> Result<EpinetPosterior> {
        sample_posterior(model, &self.ids(), self.latents().view(), &self.base_predictions(), k, seed)
    }
}

pub fn encode_pool(pool: &SelectionPool) -> Result<Vec<u8>> {
    codec::encode_jsonl(pool.items(), PoolItem::validate)
}

pub fn decode_pool(bytes: &[u8]) -> Result<SelectionPool> {
    let items = codec::decode_jsonl(bytes, PoolItem::validate)?;
    SelectionPool::new(items).map_err(|e| Error::parse(0, e.to_string()))
}

// ---------------------------------------------------------------------------
// DMTA simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Top-B by the base predictions.
    Greedy,
    /// Top-B by posterior means after conditioning on every readout so far.
    ContinualGreedy,
    /// EMAX batches from the conditioned posterior.
    ContinualEmax,
    /// Top-B by externally supplied predictions, one per pool item.
    StaticExternal(Vec<f64>),
    /// Top-B by the hidden truth; an upper bound for tests.
    Oracle,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::ContinualGreedy => "continual-greedy",
            Strategy::ContinualEmax => "continual-emax",
            Strategy::StaticExternal(_) => "static-external",
            Strategy::Oracle => "oracle",
        }
    }

    fn continual(&self) -> bool {
        matches!(self, Strategy::ContinualGreedy | Strategy::ContinualEmax)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmtaConfig {
    pub cycles: usize,
    pub batch_size: usize,
    pub sigma_obs: f64,
    pub seed: u64,
}

impl Default for DmtaConfig {
    fn default() -> Self {
        Self {
            cycles: 20,
            batch_size: 5,
            sigma_obs: SIGMA_OBS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmtaState {
    pub strategy: String,
    /// Cycles completed.
    pub cycle: usize,
    pub selected: Vec<Vec<String>>,
    pub observed: Vec<(String, f64)>,
    /// Pool maximum minus the best readout so far, after each cycle.
    pub max_gap: Vec<f64>,
    /// The pool ran out before all cycles were run.
    pub exhausted: bool,
}

/// Runs select → reveal → update cycles. Continual strategies condition the
/// original posterior on all readouts so far before each selection.
pub fn dmta_simulate(
    pool: &SelectionPool,
    prior: &EpinetPosterior,
    strategy: &Strategy,
    cfg: &DmtaConfig,
) -> Result<DmtaState> {
    prior.validate()?;
    if prior.ids != pool.ids() {
        return Err(Error::invalid("posterior columns must follow the pool order"));
    }
    if let Strategy::StaticExternal(v) = strategy {
        if v.len() != pool.len() {
            return Err(Error::invalid("external predictions must cover the pool"));
        }
        check_finite(v, "external predictions")?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let items = pool.items();
    let best = items.iter().map(|i| i.y_true).fold(f64::NEG_INFINITY, f64::max);
    let mut available: Vec<usize> = (0..pool.len()).collect();
    let mut observed_cols: Vec<(usize, f64)> = Vec::new();
    let mut state = DmtaState {
        strategy: strategy.name().into(),
        cycle: 0,
        selected: Vec::new(),
        observed: Vec::new(),
        max_gap: Vec::new(),
        exhausted: false,
    };
    let mut found = f64::NEG_INFINITY;
    let noise_stream = rng::substream(cfg.seed, "dmta");
    for cycle in 0..cfg.cycles {
        if available.is_empty() {
            state.exhausted = true;
            break;
        }
        let posterior = if strategy.continual() {
            let noise = ObservationNoise::Sampled(rng::indexed(noise_stream, cycle as u64));
            pathwise_update(prior, &observed_cols, cfg.sigma_obs, noise)?.columns(&available)
        } else {
            prior.columns(&available)
        };
        let local = match strategy {
            Strategy::Greedy => greedy_select(&posterior.ids, &posterior.base_predictions, cfg.batch_size)?,
            Strategy::ContinualGreedy => {
                let means = posterior.samples.mean_axis(Axis(0)).expect("posterior has paths").to_vec();
                greedy_select(&posterior.ids, &means, cfg.batch_size)?
            }
            Strategy::ContinualEmax => emax_select(&posterior, cfg.batch_size)?,
            Strategy::StaticExternal(v) => {
                let preds: Vec<f64> = available.iter().map(|&i| v[i]).collect();
                greedy_select(&posterior.ids, &preds, cfg.batch_size)?
            }
            Strategy::Oracle => {
                let truth: Vec<f64> = available.iter().map(|&i| items[i].y_true).collect();
                greedy_select(&posterior.ids, &truth, cfg.batch_size)?
            }
        };
        if local.short {
            state.exhausted = true;
        }
        let picked: Vec<usize> = local.indices.iter().map(|&j| available[j]).collect();
        for &i in &picked {
            let y = items[i].y_true;
            found = found.max(y);
            observed_cols.push((i, y));
            state.observed.push((items[i].id.clone(), y));
        }
        state.selected.push(picked.iter().map(|&i| items[i].id.clone()).collect());
        available.retain(|i| !picked.contains(i));
        state.max_gap.push(best - found);
        state.cycle = cycle + 1;
    }
    if state.cycle < cfg.cycles {
        state.exhausted = true;
    }
    Ok(state)
}

/// `cycle,strategy,selected_ids,max_gap` rows; ids within a batch are joined by `;`.
pub fn dmta_csv(runs: &[DmtaState]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cycle", "strategy", "selected_ids", "max_gap"])
        .map_err(|e| Error::invalid(e.to_string()))?;
    for s in runs {
        for (c, (ids, gap)) in s.selected.iter().zip(&s.max_gap).enumerate() {
            w.write_record([(c + 1).to_string(), s.strategy.clone(), ids.join(";"), format!("{gap:.6}")])
                .map_err(|e| Error::invalid(e.to_string()))?;
        }
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

// ---------------------------------------------------------------------------
// Synthetic activity-cliff pool
// ---------------------------------------------------------------------------

/// A pool of chemical series in latent space. Items in a series sit close
/// together around a series offset and a shared linear trend, which the
/// base predictions follow. The truth adds the epinet residual under one
/// hidden index (so the base model's error is a draw from the epinet's own
/// prior) plus rare activity cliffs that no model sees coming.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CliffPoolConfig {
    pub n_series: usize,
    pub per_series: usize,
    /// Spread of series centers.
    pub series_spread: f64,
    /// Spread of items around their series center.
    pub item_spread: f64,
    /// Standard deviation of series offsets around 6.
    pub offset_std: f64,
    pub cliff_rate: f64,
    pub cliff_size: f64,
    pub seed: u64,
}

impl Default for CliffPoolConfig {
    fn default() -> Self {
        Self {
            n_series: 50,
            per_series: 20,
            series_spread: 1.0,
            item_spread: 0.3,
            offset_std: 0.5,
            cliff_rate: 0.05,
            cliff_size: 1.0,
            seed: 0,
        }
    }
}

/// Builds a pool whose latents match `model`'s input width.
pub fn generate_cliff_pool(cfg: &CliffPoolConfig, model: &Epinet) -> Result<SelectionPool> {
    if cfg.n_series == 0 || cfg.per_series == 0 {
        return Err(Error::Config("cliff pool dimensions must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.cliff_rate) {
        return Err(Error::Config("cliff_rate must lie in [0, 1]".into()));
    }
    let mut r = rng::seeded(rng::substream(cfg.seed, "cliff-pool"));
    let d = model.config.latent_dim;
    let hidden = index_vector(rng::substream(cfg.seed, "cliff-truth"), 0, model.config.index_dim);
    let slope = rng::normal_vec(&mut r, d);
    let mut items = Vec::with_capacity(cfg.n_series * cfg.per_series);
    for s in 0..cfg.n_series {
        let center: Vec<f64> = (0..d).map(|_| cfg.series_spread * rng::normal(&mut r)).collect();
        let offset = 6.0 + cfg.offset_std * rng::normal(&mut r);
        for j in 0..cfg.per_series {
            let g: Vec<f64> = center.iter().map(|c| c + cfg.item_spread * rng::normal(&mut r)).collect();
            let trend = 0.3 * (0..d).map(|k| slope[k] * (g[k] - center[k])).sum::<f64>() / (d as f64).sqrt();
            let cliff = if rand::Rng::random::<f64>(&mut r) < cfg.cliff_rate {
                cfg.cliff_size * rng::normal(&mut r)
            } else {
                0.0
            };
            let y_base = offset + trend;
            let error = model.forward(&g, &hidden)?;
            items.push(PoolItem {
                id: format!("s{s:03}-{j:03}"),
                g,
                y_base,
                y_true: y_base + error + cliff,
            });
        }
    }
    SelectionPool::new(items)
}
