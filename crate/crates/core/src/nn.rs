//! Small dense building blocks with hand-written backward passes: linear
//! layers, layer norm without affine parameters, GELU, sigmoid, a GELU MLP,
//! the Adam optimizer and the checkpoint file format.
//!
//! Every parameter tensor is an `Array2<f64>`; biases are stored as `(1, out)`
//! rows. Models expose their tensors through [`Params`], and gradients are
//! values of the same type as the model.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

pub type Mat = Array2<f64>;

pub const LN_EPS: f64 = 1e-5;

/// Named access to every trainable tensor of a model.
pub trait Params: Clone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>);

    fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn add_assign(&mut self, other: &Self) {
        let src: Vec<Mat> = other.named().into_iter().map(|(_, t)| t.clone()).collect();
        for (t, s) in self.tensors_mut().into_iter().zip(src) {
            *t += &s;
        }
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }

    fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

impl Linear {
    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)`, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, gain: f64, rng: &mut SeededRng) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || std * rng::normal(rng));
        Self {
            w,
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Mat {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Mat {
        grad.w += &x.t().dot(&dy);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Params for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

/// Row-wise layer norm without affine parameters. Returns the normalized rows
/// and each row's inverse standard deviation.
pub fn layer_norm(x: ArrayView2<f64>) -> (Mat, Vec<f64>) {
    let mut y = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in y.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
        inv.push(s);
    }
    (y, inv)
}

pub fn layer_norm_backward(y: ArrayView2<f64>, inv: &[f64], dy: ArrayView2<f64>) -> Mat {
    let mut dx = dy.to_owned();
    let n = y.ncols() as f64;
    for ((mut row, yr), &s) in dx.rows_mut().into_iter().zip(y.rows()).zip(inv) {
        let mean_dy = row.sum() / n;
        let mean_dyy = row.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        for (d, &yv) in row.iter_mut().zip(yr.iter()) {
            *d = s * (*d - mean_dy - yv * mean_dyy);
        }
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Linear layers with GELU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Inputs to every layer plus pre-activations, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
}

impl Mlp {
    /// `sizes = [in, hidden..., out]`. The last layer is scaled by `out_gain`.
    pub fn new(sizes: &[usize], out_gain: f64, rng: &mut SeededRng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let gain = if l + 1 == n { out_gain } else { 1.0 };
                Linear::new(sizes[l], sizes[l + 1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Mat {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Mat, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(h.view());
            inputs.push(h);
            if l + 1 < self.layers.len() {
                h = y.mapv(gelu);
                pre.push(y);
            } else {
                h = y;
            }
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<f64>, grad: &mut Mlp) -> Mat {
        let mut d = dy.to_owned();
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                d.zip_mut_with(&cache.pre[l], |g, &p| *g *= gelu_grad(p));
            }
            d = self.layers[l].backward(cache.inputs[l].view(), d.view(), &mut grad.layers[l]);
        }
        d
    }
}

impl Params for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&join(prefix, &format!("fc{i}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        for l in &mut self.layers {
            l.collect_mut(out);
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let g: Vec<&Mat> = grads.named().into_iter().map(|(_, t)| t).collect();
        self.step_tensors(params.tensors_mut(), &g);
    }

    pub fn step_tensors(&mut self, params: Vec<&mut Mat>, grads: &[&Mat]) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(*g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Stops training once the loss stays above 10x its first value for 100
/// consecutive steps.
#[derive(Debug, Clone, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    above: usize,
}

impl DivergenceGuard {
    pub const FACTOR: f64 = 10.0;
    pub const PATIENCE: usize = 100;

    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let init = *self.initial.get_or_insert(loss);
        self.above = if !loss.is_finite() || loss > Self::FACTOR * init { self.above + 1 } else { 0 };
        if self.above >= Self::PATIENCE {
            return Err(Error::Diverged {
                step,
                loss,
                initial: init,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: a JSON manifest line, then base64 f32 tensors in manifest order.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Serializes a model: its kind tag, the config needed to rebuild it, optional
/// metadata, and every tensor.
pub fn encode_checkpoint<P: Params>(
    kind: &str,
    config: &impl Serialize,
    metadata: serde_json::Value,
    model: &P,
) -> Result<Vec<u8>> {
    let named = model.named();
    let manifest = Manifest {
        kind: kind.to_string(),
        config: serde_json::to_value(config).map_err(|e| Error::invalid(e.to_string()))?,
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: [t.nrows(), t.ncols()],
            })
            .collect(),
        metadata,
    };
    let mut out = serde_json::to_vec(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    out.push(b'\n');
    let payload = codec::encode_f32(named.iter().flat_map(|(_, t)| t.iter().copied()));
    out.extend_from_slice(payload.as_bytes());
    out.push(b'\n');
    Ok(out)
}

/// Parsed checkpoint before it is bound to a model.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub metadata: serde_json::Value,
    tensors: Vec<(String, Mat)>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload, offset) = codec::split_header(bytes)?;
    let manifest: Manifest = codec::parse_header(header)?;
    let mut total = 0usize;
    for t in &manifest.tensors {
        let n = t.shape[0]
            .checked_mul(t.shape[1])
            .and_then(|n| total.checked_add(n))
            .ok_or_else(|| Error::parse(0, format!("tensor {} is too large", t.name)))?;
        total = n;
    }
    let values = codec::decode_f32(payload, total, offset)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut at = 0;
    for t in manifest.tensors {
        let n = t.shape[0] * t.shape[1];
        let m = Array2::from_shape_vec((t.shape[0], t.shape[1]), values[at..at + n].to_vec())
            .map_err(|e| Error::parse(offset, e.to_string()))?;
        at += n;
        tensors.push((t.name, m));
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        config: manifest.config,
        metadata: manifest.metadata,
        tensors,
    })
}

impl Checkpoint {
    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::parse(0, format!("checkpoint config: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::parse(0, format!("checkpoint holds a {} model, expected {kind}", self.kind)))
        }
    }

    /// Copies tensors into `model`, which must have exactly matching names and shapes.
    pub fn load_into<P: Params>(&self, model: &mut P) -> Result<()> {
        let names: Vec<(String, (usize, usize))> =
            model.named().into_iter().map(|(n, t)| (n, t.dim())).collect();
        if names.len() != self.tensors.len() {
            return Err(Error::parse(
                0,
                format!("checkpoint has {} tensors, model expects {}", self.tensors.len(), names.len()),
            ));
        }
        for ((name, shape), (cname, ct)) in names.iter().zip(&self.tensors) {
            if name != cname || *shape != ct.dim() {
                return Err(Error::parse(
                    0,
                    format!("checkpoint tensor {cname} {:?} does not match {name} {shape:?}", ct.dim()),
                ));
            }
        }
        for (t, (_, ct)) in model.tensors_mut().into_iter().zip(&self.tensors) {
            t.assign(ct);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_and_sigmoid_derivatives() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - numeric_grad(gelu, x)).abs() < 1e-8);
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 5.0, 9.0]];
        let (y, _) = layer_norm(x.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x = ndarray::array![[0.3, -1.2, 2.0, 0.7, 0.1]];
        let r = ndarray::array![[0.5, -0.3, 1.1, 0.2, -0.9]];
        let f = |x: &Mat| (layer_norm(x.view()).0 * &r).sum();
        let (y, inv) = layer_norm(x.view());
        let analytic = layer_norm_backward(y.view(), &inv, r.view());
        for k in 0..5 {
            let mut p = x.clone();
            p[[0, k]] += 1e-6;
            let mut m = x.clone();
            m[[0, k]] -= 1e-6;
            let n = (f(&p) - f(&m)) / 2e-6;
            assert!((analytic[[0, k]] - n).abs() < 1e-7);
        }
    }

    #[test]
    fn mlp_backward_matches_differences() {
        let mut rng = rng::seeded(4);
        let mlp = Mlp::new(&[3, 5, 2], 1.0, &mut rng);
        let x = Array2::from_shape_fn((2, 3), |(i, j)| (i as f64 - j as f64) * 0.4);
        let r = Array2::from_shape_fn((2, 2), |(i, j)| 1.0 + i as f64 - 0.5 * j as f64);
        let (_, cache) = mlp.forward_cached(x.view());
        let mut grad = mlp.zeros_like();
        mlp.backward(&cache, r.view(), &mut grad);
        let g = grad.named();
        let mut probe = mlp.clone();
        for (ti, (_, gt)) in g.iter().enumerate() {
            for idx in 0..gt.len() {
                let eval = |delta: f64, probe: &mut Mlp| {
                    let t = &mut probe.tensors_mut()[ti];
                    let v = t.as_slice_mut().unwrap();
                    v[idx] += delta;
                    let out = (probe.forward(x.view()) * &r).sum();
                    let t = &mut probe.tensors_mut()[ti];
                    t.as_slice_mut().unwrap()[idx] -= delta;
                    out
                };
                let n = (eval(1e-6, &mut probe) - eval(-1e-6, &mut probe)) / 2e-6;
                assert!((gt.as_slice().unwrap()[idx] - n).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Linear::zeros(2, 1);
        let mut g = Linear::zeros(2, 1);
        g.w[[0, 0]] = 3.0;
        g.w[[1, 0]] = -0.01;
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &g);
        assert!((p.w[[0, 0]] + 0.1).abs() < 1e-6);
        assert!((p.w[[1, 0]] - 0.1).abs() < 1e-5);
        assert_eq!(p.b[[0, 0]], 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let mut rng = rng::seeded(1);
        let mlp = Mlp::new(&[4, 3, 1], 1.0, &mut rng);
        let bytes = encode_checkpoint("mlp", &vec![4, 3, 1], serde_json::Value::Null, &mlp).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        ck.expect_kind("mlp").unwrap();
        let mut fresh = mlp.zeros_like();
        ck.load_into(&mut fresh).unwrap();
        for ((_, a), (_, b)) in mlp.named().iter().zip(fresh.named()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        let mut wrong = Mlp::new(&[4, 2, 1], 1.0, &mut rng);
        assert!(ck.load_into(&mut wrong).is_err());
        assert!(ck.expect_kind("pairformer").is_err());
    }
}
