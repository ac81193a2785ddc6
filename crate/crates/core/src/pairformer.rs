//! Pair-representation trunk: token embeddings are lifted to a pair tensor
//! `z` of shape `(N, N, C)` and refined by blocks of triangle multiplication
//! (outgoing, incoming), triangle attention (starting, ending) and a
//! transition MLP, each applied as a residual update on a layer-normed input.
//! A linear head maps the final pair tensor to 64 distance-bin logits.
//!
//! All ops carry hand-written backward passes. An optional pair mask removes
//! pairs from triangle updates: masked pairs contribute nothing to the
//! products, are never attended to, and add no attention bias.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex::{TokenKind, TokenizedComplex};
use crate::distogram::{self, BinConfig, Distogram, N_BINS};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, join, layer_norm, layer_norm_backward, sigmoid, Linear, Mat, Params};
use crate::rng::{self, SeededRng};

pub const RELPOS_CLIP: usize = 32;
/// `|Δresidue|` in 0..=32 for same-chain protein pairs, plus one "other" bin.
pub const N_RELPOS: usize = RELPOS_CLIP + 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairformerConfig {
    pub embedding_dim: usize,
    pub channels: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub transition_factor: usize,
    pub seed: u64,
}

impl Default for PairformerConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            channels: 32,
            n_layers: 4,
            n_heads: 4,
            transition_factor: 4,
            seed: 0,
        }
    }
}

impl PairformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.channels == 0 || self.n_heads == 0 || self.transition_factor == 0 {
            return Err(Error::Config("pairformer dimensions must be positive".into()));
        }
        if self.channels % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by n_heads ({})",
                self.channels, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Per-complex inputs to the trunk.
#[derive(Debug, Clone)]
pub struct PairInput {
    /// Token embeddings, `(N, E)`.
    pub embeddings: Mat,
    /// Relative-position bin of each ordered pair, `(N, N)`.
    pub relpos: Array2<usize>,
    /// 1 for pairs that take part in triangle updates, 0 otherwise.
    pub mask: Option<Array2<f64>>,
    pub kinds: Vec<TokenKind>,
}

impl PairInput {
    pub fn from_complex(c: &TokenizedComplex) -> Result<Self> {
        c.validate()?;
        let n = c.len();
        let embeddings = Array2::from_shape_fn((n, c.embedding_dim()), |(i, k)| c.tokens[i].embedding[k]);
        let relpos = Array2::from_shape_fn((n, n), |(i, j)| {
            let (a, b) = (&c.tokens[i], &c.tokens[j]);
            match (a.kind, b.kind, a.residue_index, b.residue_index) {
                (TokenKind::Protein, TokenKind::Protein, Some(ra), Some(rb)) if a.chain_id == b.chain_id => {
                    ((ra - rb).unsigned_abs() as usize).min(RELPOS_CLIP)
                }
                _ => N_RELPOS - 1,
            }
        });
        Ok(Self {
            embeddings,
            relpos,
            mask: None,
            kinds: c.kinds(),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.embeddings.nrows()
    }

    /// Reorders tokens; used by the equivariance tests.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = perm.len();
        Self {
            embeddings: Array2::from_shape_fn(self.embeddings.dim(), |(i, k)| self.embeddings[[perm[i], k]]),
            relpos: Array2::from_shape_fn((n, n), |(i, j)| self.relpos[[perm[i], perm[j]]]),
            mask: self
                .mask
                .as_ref()
                .map(|m| Array2::from_shape_fn((n, n), |(i, j)| m[[perm[i], perm[j]]])),
            kinds: perm.iter().map(|&i| self.kinds[i]).collect(),
        }
    }
}

fn flat(z: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (n, m, c) = z.dim();
    z.view().into_shape_with_order((n * m, c)).expect("standard layout")
}

fn unflat(x: Mat, n: usize) -> Array3<f64> {
    let c = x.ncols();
    x.into_shape_with_order((n, n, c)).expect("standard layout")
}

fn transposed(z: &Array3<f64>) -> Array3<f64> {
    z.view().permuted_axes([1, 0, 2]).as_standard_layout().into_owned()
}

/// `(N, N, C)` → `(C, N, N)`, contiguous per channel.
fn channel_major(x: &Mat, n: usize) -> Array3<f64> {
    let c = x.ncols();
    x.view()
        .into_shape_with_order((n, n, c))
        .expect("standard layout")
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .into_owned()
}

fn pair_major(x: &Array3<f64>) -> Mat {
    let (c, n, _) = x.dim();
    x.view()
        .permuted_axes([1, 2, 0])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * n, c))
        .expect("standard layout")
}

fn mask_column(mask: Option<&Array2<f64>>, n: usize) -> Option<Mat> {
    mask.map(|m| {
        m.as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * n, 1))
            .expect("standard layout")
    })
}

// ---------------------------------------------------------------------------
// Pair embedding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PairEmbed {
    pub left: Linear,
    pub right: Linear,
    pub relpos: Linear,
}

impl PairEmbed {
    fn new(e: usize, c: usize, rng: &mut SeededRng) -> Self {
        Self {
            left: Linear::new(e, c, 1.0, rng),
            right: Linear::new(e, c, 1.0, rng),
            relpos: Linear::new(N_RELPOS, c, 1.0, rng),
        }
    }

    /// `z_ij = W_a e_i + W_b e_j + W_r onehot(relpos_ij)`.
    fn forward(&self, input: &PairInput) -> Array3<f64> {
        let n = input.n_tokens();
        let a = self.left.forward(input.embeddings.view());
        let b = self.right.forward(input.embeddings.view());
        let c = a.ncols();
        let mut z = Array3::zeros((n, n, c));
        for i in 0..n {
            for j in 0..n {
                let r = input.relpos[[i, j]];
                let mut lane = z.slice_mut(s![i, j, ..]);
                Zip::from(&mut lane)
                    .and(a.row(i))
                    .and(b.row(j))
                    .and(self.relpos.w.row(r))
                    .and(self.relpos.b.row(0))
                    .for_each(|z, &a, &b, &w, &bias| *z = a + b + w + bias);
            }
        }
        z
    }

    fn backward(&self, input: &PairInput, dz: &Array3<f64>, grad: &mut PairEmbed) {
        let da = dz.sum_axis(Axis(1));
        let db = dz.sum_axis(Axis(0));
        self.left.backward(input.embeddings.view(), da.view(), &mut grad.left);
        self.right.backward(input.embeddings.view(), db.view(), &mut grad.right);
        let n = input.n_tokens();
        for i in 0..n {
            for j in 0..n {
                let r = input.relpos[[i, j]];
                let d = dz.slice(s![i, j, ..]);
                let mut w = grad.relpos.w.row_mut(r);
                w += &d;
                let mut b = grad.relpos.b.row_mut(0);
                b += &d;
            }
        }
    }
}

impl Params for PairEmbed {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.left.collect(&join(prefix, "left"), out);
        self.right.collect(&join(prefix, "right"), out);
        self.relpos.collect(&join(prefix, "relpos"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.left.collect_mut(out);
        self.right.collect_mut(out);
        self.relpos.collect_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Triangle multiplication
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Outgoing,
    Incoming,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMultiplication {
    pub direction: Direction,
    pub a_gate: Linear,
    pub a_proj: Linear,
    pub b_gate: Linear,
    pub b_proj: Linear,
    pub out: Linear,
}

/// Intermediates of one triangle multiplication pass, for its backward pass.
pub struct TriMulCache {
    x: Mat,
    x_inv: Vec<f64>,
    sa: Mat,
    pa: Mat,
    sb: Mat,
    pb: Mat,
    a: Array3<f64>,
    b: Array3<f64>,
    t: Mat,
    t_inv: Vec<f64>,
    mask: Option<Mat>,
}

impl TriangleMultiplication {
    pub fn new(direction: Direction, c: usize, rng: &mut SeededRng) -> Self {
        Self {
            direction,
            a_gate: Linear::new(c, c, 1.0, rng),
            a_proj: Linear::new(c, c, 1.0, rng),
            b_gate: Linear::new(c, c, 1.0, rng),
            b_proj: Linear::new(c, c, 1.0, rng),
            out: Linear::new(c, c, 0.5, rng),
        }
    }

    /// The residual update (not `z` plus the update).
    pub fn forward(&self, z: &Array3<f64>, mask: Option<&Array2<f64>>) -> (Array3<f64>, TriMulCache) {
        let n = z.dim().0;
        let (x, x_inv) = layer_norm(flat(z));
        let mask = mask_column(mask, n);
        let gated = |gate: &Linear, proj: &Linear| {
            let s = gate.forward(x.view()).mapv(sigmoid);
            let p = proj.forward(x.view());
            let mut v = &s * &p;
            if let Some(m) = &mask {
                v *= m;
            }
            (s, p, channel_major(&v, n))
        };
        let (sa, pa, a) = gated(&self.a_gate, &self.a_proj);
        let (sb, pb, b) = gated(&self.b_gate, &self.b_proj);
        let c = a.dim().0;
        let mut t = Array3::zeros((c, n, n));
        for ch in 0..c {
            let (ac, bc) = (a.index_axis(Axis(0), ch), b.index_axis(Axis(0), ch));
            let prod = match self.direction {
                Direction::Outgoing => ac.dot(&bc.t()),
                Direction::Incoming => ac.t().dot(&bc),
            };
            t.index_axis_mut(Axis(0), ch).assign(&prod);
        }
        let (t, t_inv) = layer_norm(pair_major(&t).view());
        let out = unflat(self.out.forward(t.view()), n);
        let cache = TriMulCache {
            x,
            x_inv,
            sa,
            pa,
            sb,
            pb,
            a,
            b,
            t,
            t_inv,
            mask,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &TriMulCache, dout: &Array3<f64>, grad: &mut Self) -> Array3<f64> {
        let n = dout.dim().0;
        let dt = self.out.backward(cache.t.view(), flat(dout), &mut grad.out);
        let dt = layer_norm_backward(cache.t.view(), &cache.t_inv, dt.view());
        let dt = channel_major(&dt, n);
        let c = dt.dim().0;
        let mut da = Array3::zeros((c, n, n));
        let mut db = Array3::zeros((c, n, n));
        for ch in 0..c {
            let (ac, bc, dtc) = (
                cache.a.index_axis(Axis(0), ch),
                cache.b.index_axis(Axis(0), ch),
                dt.index_axis(Axis(0), ch),
            );
            let (gac, gbc) = match self.direction {
                Direction::Outgoing => (dtc.dot(&bc), dtc.t().dot(&ac)),
                Direction::Incoming => (bc.dot(&dtc.t()), ac.dot(&dtc)),
            };
            da.index_axis_mut(Axis(0), ch).assign(&gac);
            db.index_axis_mut(Axis(0), ch).assign(&gbc);
        }
        let mut dx = Array2::zeros(cache.x.raw_dim());
        let mut branch = |dv: Array3<f64>, s: &Mat, p: &Mat, gate: &Linear, proj: &Linear, gg: &mut Linear, gp: &mut Linear| {
            let mut dv = pair_major(&dv);
            if let Some(m) = &cache.mask {
                dv *= m;
            }
            let dp = &dv * s;
            let ds = Zip::from(&dv).and(p).and(s).map_collect(|&d, &p, &s| d * p * s * (1.0 - s));
            dx += &gate.backward(cache.x.view(), ds.view(), gg);
            dx += &proj.backward(cache.x.view(), dp.view(), gp);
        };
        branch(da, &cache.sa, &cache.pa, &self.a_gate, &self.a_proj, &mut grad.a_gate, &mut grad.a_proj);
        branch(db, &cache.sb, &cache.pb, &self.b_gate, &self.b_proj, &mut grad.b_gate, &mut grad.b_proj);
        unflat(layer_norm_backward(cache.x.view(), &cache.x_inv, dx.view()), n)
    }
}

impl Params for TriangleMultiplication {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.a_gate.collect(&join(prefix, "a_gate"), out);
        self.a_proj.collect(&join(prefix, "a_proj"), out);
        self.b_gate.collect(&join(prefix, "b_gate"), out);
        self.b_proj.collect(&join(prefix, "b_proj"), out);
        self.out.collect(&join(prefix, "out"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.a_gate.collect_mut(out);
        self.a_proj.collect_mut(out);
        self.b_gate.collect_mut(out);
        self.b_proj.collect_mut(out);
        self.out.collect_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Triangle attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Starting,
    Ending,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleAttention {
    pub node: Node,
    pub n_heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub bias: Linear,
    pub out: Linear,
}

/// Intermediates of one triangle attention pass, for its backward pass.
pub struct TriAttnCache {
    x: Mat,
    x_inv: Vec<f64>,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Attention weights per row `i`, shaped `(H, N, N)`.
    attn: Vec<Array3<f64>>,
    o: Mat,
    mask: Option<Array2<f64>>,
}

impl TriangleAttention {
    pub fn new(node: Node, c: usize, n_heads: usize, rng: &mut SeededRng) -> Self {
        Self {
            node,
            n_heads,
            query: Linear::new(c, c, 1.0, rng),
            key: Linear::new(c, c, 1.0, rng),
            value: Linear::new(c, c, 1.0, rng),
            bias: Linear::new(c, n_heads, 1.0, rng),
            out: Linear::new(c, c, 0.5, rng),
        }
    }

    /// The residual update (not `z` plus the update).
    pub fn forward(&self, z: &Array3<f64>, mask: Option<&Array2<f64>>) -> (Array3<f64>, TriAttnCache) {
        match self.node {
            Node::Starting => self.forward_starting(z, mask.cloned()),
            Node::Ending => {
                let (out, cache) = self.forward_starting(&transposed(z), mask.map(|m| m.t().as_standard_layout().into_owned()));
                (transposed(&out), cache)
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &TriAttnCache, dout: &Array3<f64>, grad: &mut Self) -> Array3<f64> {
        match self.node {
            Node::Starting => self.backward_starting(cache, dout, grad),
            Node::Ending => transposed(&self.backward_starting(cache, &transposed(dout), grad)),
        }
    }

    /// Row `i` attends over `k` for every `j`:
    /// `o_ij = Σ_k softmax_k(q_ij·k_ik/√d + b_jk) v_ik`.
    fn forward_starting(&self, z: &Array3<f64>, mask: Option<Array2<f64>>) -> (Array3<f64>, TriAttnCache) {
        let n = z.dim().0;
        let h = self.n_heads;
        let (x, x_inv) = layer_norm(flat(z));
        let q = self.query.forward(x.view());
        let k = self.key.forward(x.view());
        let v = self.value.forward(x.view());
        let mut bias = self.bias.forward(x.view());
        if let Some(m) = &mask {
            bias *= &mask_column(Some(m), n).expect("mask present");
        }
        let c = q.ncols();
        let dh = c / h;
        let scale = 1.0 / (dh as f64).sqrt();
        // (H, N, N) bias over (j, k).
        let bias = bias.into_shape_with_order((n, n, h)).expect("layout").permuted_axes([2, 0, 1]).as_standard_layout().into_owned();

        let rows: Vec<(Mat, Array3<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let qi = q.slice(s![i * n..(i + 1) * n, ..]);
                let ki = k.slice(s![i * n..(i + 1) * n, ..]);
                let vi = v.slice(s![i * n..(i + 1) * n, ..]);
                let mut oi = Array2::zeros((n, c));
                let mut ai = Array3::zeros((h, n, n));
                for hd in 0..h {
                    let cols = s![.., hd * dh..(hd + 1) * dh];
                    let mut logits = qi.slice(cols).dot(&ki.slice(cols).t()) * scale + bias.index_axis(Axis(0), hd);
                    if let Some(m) = &mask {
                        for kk in 0..n {
                            if m[[i, kk]] == 0.0 {
                                logits.column_mut(kk).fill(f64::NEG_INFINITY);
                            }
                        }
                    }
                    softmax_rows(&mut logits);
                    oi.slice_mut(cols).assign(&logits.dot(&vi.slice(cols)));
                    ai.index_axis_mut(Axis(0), hd).assign(&logits);
                }
                (oi, ai)
            })
            .collect();
        let mut o = Array2::zeros((n * n, c));
        let mut attn = Vec::with_capacity(n);
        for (i, (oi, ai)) in rows.into_iter().enumerate() {
            o.slice_mut(s![i * n..(i + 1) * n, ..]).assign(&oi);
            attn.push(ai);
        }
        let out = unflat(self.out.forward(o.view()), n);
        (
            out,
            TriAttnCache {
                x,
                x_inv,
                q,
                k,
                v,
                attn,
                o,
                mask,
            },
        )
    }

    fn backward_starting(&self, cache: &TriAttnCache, dout: &Array3<f64>, grad: &mut Self) -> Array3<f64> {
        let n = dout.dim().0;
        let h = self.n_heads;
        let c = cache.q.ncols();
        let dh = c / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_o = self.out.backward(cache.o.view(), flat(dout), &mut grad.out);

        let rows: Vec<(Mat, Mat, Mat, Array3<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let range = s![i * n..(i + 1) * n, ..];
                let (qi, ki, vi, doi) = (
                    cache.q.slice(range),
                    cache.k.slice(range),
                    cache.v.slice(range),
                    d_o.slice(range),
                );
                let mut dq = Array2::zeros((n, c));
                let mut dk = Array2::zeros((n, c));
                let mut dv = Array2::zeros((n, c));
                let mut dbias = Array3::zeros((h, n, n));
                for hd in 0..h {
                    let cols = s![.., hd * dh..(hd + 1) * dh];
                    let a = cache.attn[i].index_axis(Axis(0), hd);
                    let d_oh = doi.slice(cols);
                    dv.slice_mut(cols).assign(&a.t().dot(&d_oh));
                    let da = d_oh.dot(&vi.slice(cols).t());
                    let mut dl = &a * &da;
                    let sums = dl.sum_axis(Axis(1));
                    for (mut row, (&s, ar)) in dl.rows_mut().into_iter().zip(sums.iter().zip(a.rows())) {
                        row.zip_mut_with(&ar, |d, &p| *d -= p * s);
                    }
                    dq.slice_mut(cols).assign(&(dl.dot(&ki.slice(cols)) * scale));
                    dk.slice_mut(cols).assign(&(dl.t().dot(&qi.slice(cols)) * scale));
                    dbias.index_axis_mut(Axis(0), hd).assign(&dl);
                }
                (dq, dk, dv, dbias)
            })
            .collect();

        let mut dq = Array2::zeros((n * n, c));
        let mut dk = Array2::zeros((n * n, c));
        let mut dv = Array2::zeros((n * n, c));
        let mut dbias = Array3::<f64>::zeros((h, n, n));
        for (i, (q, k, v, b)) in rows.into_iter().enumerate() {
            let range = s![i * n..(i + 1) * n, ..];
            dq.slice_mut(range).assign(&q);
            dk.slice_mut(range).assign(&k);
            dv.slice_mut(range).assign(&v);
            dbias += &b;
        }
        let mut dbias = pair_major(&dbias);
        if let Some(m) = &cache.mask {
            dbias *= &mask_column(Some(m), n).expect("mask present");
        }
        let mut dx = self.query.backward(cache.x.view(), dq.view(), &mut grad.query);
        dx += &self.key.backward(cache.x.view(), dk.view(), &mut grad.key);
        dx += &self.value.backward(cache.x.view(), dv.view(), &mut grad.value);
        dx += &self.bias.backward(cache.x.view(), dbias.view(), &mut grad.bias);
        unflat(layer_norm_backward(cache.x.view(), &cache.x_inv, dx.view()), n)
    }
}

/// Row softmax; rows that are entirely `-inf` become all zeros.
fn softmax_rows(x: &mut Mat) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if m == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

impl Params for TriangleAttention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.query.collect(&join(prefix, "query"), out);
        // Key and pair-bias offsets shift every logit of a row equally, so only
        // their weights are trained.
        out.push((join(prefix, "key.w"), &self.key.w));
        self.value.collect(&join(prefix, "value"), out);
        out.push((join(prefix, "bias.w"), &self.bias.w));
        self.out.collect(&join(prefix, "out"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.query.collect_mut(out);
        out.push(&mut self.key.w);
        self.value.collect_mut(out);
        out.push(&mut self.bias.w);
        self.out.collect_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Transition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub up: Linear,
    pub down: Linear,
}

struct TransitionCache {
    x: Mat,
    x_inv: Vec<f64>,
    pre: Mat,
}

impl Transition {
    fn new(c: usize, factor: usize, rng: &mut SeededRng) -> Self {
        Self {
            up: Linear::new(c, c * factor, 1.0, rng),
            down: Linear::new(c * factor, c, 0.5, rng),
        }
    }

    fn forward(&self, z: &Array3<f64>) -> (Array3<f64>, TransitionCache) {
        let n = z.dim().0;
        let (x, x_inv) = layer_norm(flat(z));
        let pre = self.up.forward(x.view());
        let out = unflat(self.down.forward(pre.mapv(gelu).view()), n);
        (out, TransitionCache { x, x_inv, pre })
    }

    fn backward(&self, cache: &TransitionCache, dout: &Array3<f64>, grad: &mut Self) -> Array3<f64> {
        let n = dout.dim().0;
        let mut dh = self.down.backward(cache.pre.mapv(gelu).view(), flat(dout), &mut grad.down);
        dh.zip_mut_with(&cache.pre, |d, &p| *d *= gelu_grad(p));
        let dx = self.up.backward(cache.x.view(), dh.view(), &mut grad.up);
        unflat(layer_norm_backward(cache.x.view(), &cache.x_inv, dx.view()), n)
    }
}

impl Params for Transition {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.up.collect(&join(prefix, "up"), out);
        self.down.collect(&join(prefix, "down"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.up.collect_mut(out);
        self.down.collect_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Blocks and stacks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PairBlock {
    pub tri_mul_out: TriangleMultiplication,
    pub tri_mul_in: TriangleMultiplication,
    pub tri_att_start: TriangleAttention,
    pub tri_att_end: TriangleAttention,
    pub transition: Transition,
}

struct BlockCache {
    mul_out: TriMulCache,
    mul_in: TriMulCache,
    att_start: TriAttnCache,
    att_end: TriAttnCache,
    transition: TransitionCache,
}

impl PairBlock {
    pub fn new(c: usize, n_heads: usize, factor: usize, rng: &mut SeededRng) -> Self {
        Self {
            tri_mul_out: TriangleMultiplication::new(Direction::Outgoing, c, rng),
            tri_mul_in: TriangleMultiplication::new(Direction::Incoming, c, rng),
            tri_att_start: TriangleAttention::new(Node::Starting, c, n_heads, rng),
            tri_att_end: TriangleAttention::new(Node::Ending, c, n_heads, rng),
            transition: Transition::new(c, factor, rng),
        }
    }

    fn forward(&self, z: &Array3<f64>, mask: Option<&Array2<f64>>) -> (Array3<f64>, BlockCache) {
        let (d, mul_out) = self.tri_mul_out.forward(z, mask);
        let z = z + &d;
        let (d, mul_in) = self.tri_mul_in.forward(&z, mask);
        let z = z + &d;
        let (d, att_start) = self.tri_att_start.forward(&z, mask);
        let z = z + &d;
        let (d, att_end) = self.tri_att_end.forward(&z, mask);
        let z = z + &d;
        let (d, transition) = self.transition.forward(&z);
        let z = z + &d;
        (
            z,
            BlockCache {
                mul_out,
                mul_in,
                att_start,
                att_end,
                transition,
            },
        )
    }

    fn backward(&self, cache: &BlockCache, dz: Array3<f64>, grad: &mut Self) -> Array3<f64> {
        let dz = &dz + &self.transition.backward(&cache.transition, &dz, &mut grad.transition);
        let dz = &dz + &self.tri_att_end.backward(&cache.att_end, &dz, &mut grad.tri_att_end);
        let dz = &dz + &self.tri_att_start.backward(&cache.att_start, &dz, &mut grad.tri_att_start);
        let dz = &dz + &self.tri_mul_in.backward(&cache.mul_in, &dz, &mut grad.tri_mul_in);
        &dz + &self.tri_mul_out.backward(&cache.mul_out, &dz, &mut grad.tri_mul_out)
    }
}

impl Params for PairBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.tri_mul_out.collect(&join(prefix, "tri_mul_out"), out);
        self.tri_mul_in.collect(&join(prefix, "tri_mul_in"), out);
        self.tri_att_start.collect(&join(prefix, "tri_att_start"), out);
        self.tri_att_end.collect(&join(prefix, "tri_att_end"), out);
        self.transition.collect(&join(prefix, "transition"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.tri_mul_out.collect_mut(out);
        self.tri_mul_in.collect_mut(out);
        self.tri_att_start.collect_mut(out);
        self.tri_att_end.collect_mut(out);
        self.transition.collect_mut(out);
    }
}

/// A sequence of pair blocks. Tensor names are `layer{n}.{op}.{tensor}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStack {
    pub blocks: Vec<PairBlock>,
}

pub struct StackCache {
    blocks: Vec<BlockCache>,
}

impl PairStack {
    pub fn new(n_layers: usize, c: usize, n_heads: usize, factor: usize, rng: &mut SeededRng) -> Self {
        Self {
            blocks: (0..n_layers).map(|_| PairBlock::new(c, n_heads, factor, rng)).collect(),
        }
    }

    /// Inference pass; caches are dropped block by block.
    pub fn forward(&self, z: Array3<f64>, mask: Option<&Array2<f64>>) -> Result<Array3<f64>> {
        let mut z = z;
        for (l, block) in self.blocks.iter().enumerate() {
            z = block.forward(&z, mask).0;
            check_finite(&z, l)?;
        }
        Ok(z)
    }

    pub fn forward_cached(&self, z: Array3<f64>, mask: Option<&Array2<f64>>) -> Result<(Array3<f64>, StackCache)> {
        let mut z = z;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (next, cache) = block.forward(&z, mask);
            check_finite(&next, l)?;
            z = next;
            caches.push(cache);
        }
        Ok((z, StackCache { blocks: caches }))
    }

    pub fn backward(&self, cache: &StackCache, dz: Array3<f64>, grad: &mut Self) -> Array3<f64> {
        let mut dz = dz;
        for (l, block) in self.blocks.iter().enumerate().rev() {
            dz = block.backward(&cache.blocks[l], dz, &mut grad.blocks[l]);
        }
        dz
    }
}

fn check_finite(z: &Array3<f64>, layer: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            message: "pair representation became non-finite".into(),
        })
    }
}

impl Params for PairStack {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        for (l, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("layer{l}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        for b in &mut self.blocks {
            b.collect_mut(out);
        }
    }
}

// ---------------------------------------------------------------------------
// Full distogram model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Pairformer {
    pub config: PairformerConfig,
    pub embed: PairEmbed,
    pub stack: PairStack,
    pub head: Linear,
}

pub struct PairformerCache {
    stack: StackCache,
    head_in: Mat,
    head_inv: Vec<f64>,
}

/// Trunk outputs for one complex.
#[derive(Debug, Clone)]
pub struct TrunkOutput {
    /// Final pair representation `(N, N, C)`.
    pub pair: Array3<f64>,
    /// Raw head logits `(N, N, 64)`.
    pub logits: Array3<f64>,
}

impl Pairformer {
    pub fn new(config: PairformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(rng::substream(config.seed, "pairformer-init"));
        let c = config.channels;
        Ok(Self {
            config,
            embed: PairEmbed::new(config.embedding_dim, c, &mut rng),
            stack: PairStack::new(config.n_layers, c, config.n_heads, config.transition_factor, &mut rng),
            head: Linear::new(c, N_BINS, 1.0, &mut rng),
        })
    }

    fn check_input(&self, input: &PairInput) -> Result<()> {
        let n = input.n_tokens();
        if n == 0 {
            return Err(Error::invalid("complex has no tokens"));
        }
        if input.embeddings.ncols() != self.config.embedding_dim {
            return Err(Error::invalid(format!(
                "embedding width {} does not match model width {}",
                input.embeddings.ncols(),
                self.config.embedding_dim
            )));
        }
        if input.relpos.dim() != (n, n) || input.relpos.iter().any(|&r| r >= N_RELPOS) {
            return Err(Error::invalid("relative-position bins are malformed"));
        }
        if let Some(m) = &input.mask {
            if m.dim() != (n, n) {
                return Err(Error::invalid("pair mask shape does not match token count"));
            }
        }
        Ok(())
    }

    pub fn run(&self, input: &PairInput) -> Result<TrunkOutput> {
        self.check_input(input)?;
        let n = input.n_tokens();
        let z = self.stack.forward(self.embed.forward(input), input.mask.as_ref())?;
        let (h, _) = layer_norm(flat(&z));
        let logits = unflat(self.head.forward(h.view()), n);
        Ok(TrunkOutput { pair: z, logits })
    }

    pub fn forward_cached(&self, input: &PairInput) -> Result<(Array3<f64>, PairformerCache)> {
        self.check_input(input)?;
        let n = input.n_tokens();
        let (z, stack) = self.stack.forward_cached(self.embed.forward(input), input.mask.as_ref())?;
        let (head_in, head_inv) = layer_norm(flat(&z));
        let logits = unflat(self.head.forward(head_in.view()), n);
        Ok((
            logits,
            PairformerCache {
                stack,
                head_in,
                head_inv,
            },
        ))
    }

    /// Parameter gradients given `dL/dlogits`.
    pub fn backward(&self, input: &PairInput, cache: &PairformerCache, dlogits: &Array3<f64>) -> Pairformer {
        let n = input.n_tokens();
        let mut grad = self.zeros_like();
        let dh = self.head.backward(cache.head_in.view(), flat(dlogits), &mut grad.head);
        let dz = unflat(layer_norm_backward(cache.head_in.view(), &cache.head_inv, dh.view()), n);
        let dz = self.stack.backward(&cache.stack, dz, &mut grad.stack);
        self.embed.backward(input, &dz, &mut grad.embed);
        grad
    }

    /// Symmetrized distogram for a complex.
    pub fn predict(&self, c: &TokenizedComplex) -> Result<Distogram> {
        let out = self.run(&PairInput::from_complex(c)?)?;
        Ok(distogram::symmetrize(&Distogram::from_logits(&out.logits, c.kinds(), BinConfig::default())?))
    }

    pub fn predict_with_pair(&self, c: &TokenizedComplex) -> Result<(Distogram, Array3<f64>)> {
        let out = self.run(&PairInput::from_complex(c)?)?;
        let d = distogram::symmetrize(&Distogram::from_logits(&out.logits, c.kinds(), BinConfig::default())?);
        Ok((d, out.pair))
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Result<Vec<u8>> {
        crate::nn::encode_checkpoint(CHECKPOINT_KIND, &self.config, metadata, self)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let ck = crate::nn::decode_checkpoint(bytes)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: PairformerConfig = ck.config()?;
        let mut model = Self::new(config).map_err(|e| Error::parse(0, e.to_string()))?;
        ck.load_into(&mut model)?;
        Ok(model)
    }
}

pub const CHECKPOINT_KIND: &str = "pairformer";

impl Params for Pairformer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.embed.collect(&join(prefix, "embed"), out);
        self.stack.collect(prefix, out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.embed.collect_mut(out);
        self.stack.collect_mut(out);
        self.head.collect_mut(out);
    }
}

/// Sum of `logits ⊙ weights`; a convenient scalar objective for tests.
pub fn contract(logits: ArrayView3<f64>, weights: ArrayView3<f64>) -> f64 {
    Zip::from(logits).and(weights).fold(0.0, |acc, &a, &b| acc + a * b)
}
