//! Dense networks with manual backprop, Adam, input encodings and checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scenario::SimRng;

const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Self::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Self::Sigmoid => z.mapv_inplace(sigmoid),
            Self::Linear => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    fn backprop(self, out: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Self::Relu => grad.zip_mut_with(out, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Self::Sigmoid => grad.zip_mut_with(out, |g, &a| *g *= a * (1.0 - a)),
            Self::Linear => {}
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batch normalization in train mode uses batch statistics; eval mode uses
/// the running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub batch_norm: bool,
}

impl LayerSpec {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self { inputs, outputs, activation, batch_norm: false }
    }

    pub fn with_batch_norm(mut self) -> Self {
        self.batch_norm = true;
        self
    }
}

/// Stack of `hidden` equal-width layers followed by an output layer.
pub fn mlp(inputs: usize, hidden: &[usize], outputs: usize, hidden_act: Activation, out_act: Activation, batch_norm: bool) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = inputs;
    for &h in hidden {
        let s = LayerSpec::new(prev, h, hidden_act);
        specs.push(if batch_norm { s.with_batch_norm() } else { s });
        prev = h;
    }
    specs.push(LayerSpec::new(prev, outputs, out_act));
    specs
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    spec: LayerSpec,
    w: Array2<f64>,
    b: Array1<f64>,
    bn: Option<BatchNorm>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    /// normalized pre-activation, inverse std and mode (batch-norm layers only)
    norm: Option<(Array2<f64>, Array1<f64>, Mode)>,
    output: Array2<f64>,
}

/// Feed-forward network. Parameters are flattened layer by layer as
/// `W` (row-major, inputs x outputs), `b`, then `gamma`, `beta` when normalized.
#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<Dense>,
    cache: Option<Vec<LayerCache>>,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl DenseNet {
    /// Uniform fan-in initialization `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new(specs: &[LayerSpec], rng: &mut SimRng) -> Result<Self> {
        Self::check_specs(specs)?;
        let layers = specs
            .iter()
            .map(|&spec| {
                let bound = 1.0 / (spec.inputs as f64).sqrt();
                let w = Array2::from_shape_fn((spec.inputs, spec.outputs), |_| rng.random_range(-bound..bound));
                let b = Array1::from_shape_fn(spec.outputs, |_| rng.random_range(-bound..bound));
                Dense { spec, w, b, bn: spec.batch_norm.then(|| BatchNorm::identity(spec.outputs)) }
            })
            .collect();
        Ok(Self { layers, cache: None })
    }

    /// All-zero parameters (batch-norm scales stay at one).
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        Self::check_specs(specs)?;
        let layers = specs
            .iter()
            .map(|&spec| Dense {
                spec,
                w: Array2::zeros((spec.inputs, spec.outputs)),
                b: Array1::zeros(spec.outputs),
                bn: spec.batch_norm.then(|| BatchNorm::identity(spec.outputs)),
            })
            .collect();
        Ok(Self { layers, cache: None })
    }

    fn check_specs(specs: &[LayerSpec]) -> Result<()> {
        if specs.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        for pair in specs.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::DimensionMismatch { expected: pair[0].outputs, got: pair[1].inputs });
            }
        }
        if specs.iter().any(|s| s.inputs == 0 || s.outputs == 0) {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].spec.inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("nonempty").spec.outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len() + l.bn.as_ref().map_or(0, |bn| 2 * bn.gamma.len()))
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
            if let Some(bn) = &l.bn {
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch { expected: self.param_count(), got: params.len() });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|p| *p = it.next().expect("length checked"));
            l.b.iter_mut().for_each(|p| *p = it.next().expect("length checked"));
            if let Some(bn) = &mut l.bn {
                bn.gamma.iter_mut().for_each(|p| *p = it.next().expect("length checked"));
                bn.beta.iter_mut().for_each(|p| *p = it.next().expect("length checked"));
            }
        }
        self.cache = None;
        Ok(())
    }

    /// Non-trainable state: batch-norm running mean and variance.
    pub fn buffers(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for bn in self.layers.iter().filter_map(|l| l.bn.as_ref()) {
            out.extend(bn.running_mean.iter());
            out.extend(bn.running_var.iter());
        }
        out
    }

    pub fn set_buffers(&mut self, buffers: &[f64]) -> Result<()> {
        let expected: usize = self.layers.iter().filter_map(|l| l.bn.as_ref()).map(|bn| 2 * bn.gamma.len()).sum();
        if buffers.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: buffers.len() });
        }
        let mut it = buffers.iter().copied();
        for bn in self.layers.iter_mut().filter_map(|l| l.bn.as_mut()) {
            bn.running_mean.iter_mut().for_each(|p| *p = it.next().expect("length checked"));
            bn.running_var.iter_mut().for_each(|p| *p = it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().chain(self.buffers().iter()).all(|p| p.is_finite())
    }

    /// Forward pass over a batch (rows are samples), caching activations for [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &mut self.layers {
            let mut z = cur.dot(&l.w) + &l.b;
            let norm = match &mut l.bn {
                Some(bn) => Some(bn.forward(&mut z, mode)),
                None => None,
            };
            l.spec.activation.apply(&mut z);
            caches.push(LayerCache { input: cur, norm, output: z.clone() });
            cur = z;
        }
        self.cache = Some(caches);
        Ok(cur)
    }

    /// Eval-mode forward pass without touching the cache.
    pub fn infer(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for l in &self.layers {
            let mut z = cur.dot(&l.w) + &l.b;
            if let Some(bn) = &l.bn {
                bn.normalize_eval(&mut z);
            }
            l.spec.activation.apply(&mut z);
            cur = z;
        }
        Ok(cur)
    }

    pub fn infer_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let a = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| invalid(e.to_string()))?;
        Ok(self.infer(&a)?.into_raw_vec_and_offset().0)
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.inputs() {
            return Err(Error::DimensionMismatch { expected: self.inputs(), got: x.ncols() });
        }
        if x.nrows() == 0 {
            return Err(Error::Empty("input batch"));
        }
        Ok(())
    }

    /// Back-propagates `grad_out` (dL/d output) through the cached pass.
    /// Returns parameter gradients in [`params`](Self::params) order and dL/d input.
    pub fn backward(&self, grad_out: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let caches = self.cache.as_ref().ok_or(Error::MissingCache)?;
        let last = caches.last().expect("nonempty");
        if grad_out.dim() != last.output.dim() {
            return Err(Error::DimensionMismatch { expected: last.output.len(), got: grad_out.len() });
        }
        let mut per_layer: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (l, c) in self.layers.iter().zip(caches).rev() {
            l.spec.activation.backprop(&c.output, &mut g);
            let mut extra: Vec<f64> = Vec::new();
            if let (Some(bn), Some((xhat, inv_std, mode))) = (&l.bn, &c.norm) {
                let dgamma = (&g * xhat).sum_axis(Axis(0));
                let dbeta = g.sum_axis(Axis(0));
                let dxhat = &g * &bn.gamma;
                g = match mode {
                    Mode::Train => {
                        let n = xhat.nrows() as f64;
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                        ((&dxhat * n - &sum_d) - xhat * &sum_dx) * inv_std / n
                    }
                    Mode::Eval => dxhat * inv_std,
                };
                extra.extend(dgamma.iter());
                extra.extend(dbeta.iter());
            }
            let dw = c.input.t().dot(&g);
            let db = g.sum_axis(Axis(0));
            let mut flat = Vec::with_capacity(dw.len() + db.len() + extra.len());
            flat.extend(dw.iter());
            flat.extend(db.iter());
            flat.extend(extra);
            per_layer.push(flat);
            g = g.dot(&l.w.t());
        }
        per_layer.reverse();
        Ok((per_layer.concat(), g))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl BatchNorm {
    fn identity(n: usize) -> Self {
        Self { gamma: Array1::ones(n), beta: Array1::zeros(n), running_mean: Array1::zeros(n), running_var: Array1::ones(n) }
    }

    /// Normalizes `z` in place; returns the backward cache.
    fn forward(&mut self, z: &mut Array2<f64>, mode: Mode) -> (Array2<f64>, Array1<f64>, Mode) {
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
                let var = z.map_axis(Axis(0), |col| {
                    let m = col.mean().expect("nonempty");
                    col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64
                });
                self.running_mean = &self.running_mean * BN_MOMENTUM + &mean * (1.0 - BN_MOMENTUM);
                self.running_var = &self.running_var * BN_MOMENTUM + &var * (1.0 - BN_MOMENTUM);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = (&*z - &mean) * &inv_std;
        *z = &xhat * &self.gamma + &self.beta;
        (xhat, inv_std, mode)
    }

    fn normalize_eval(&self, z: &mut Array2<f64>) {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        *z = (&*z - &self.running_mean) * &inv_std * &self.gamma + &self.beta;
    }
}

/// Bias-corrected adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch { expected: self.m.len(), got: grads.len().min(params.len()) });
        }
        if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {i} is {g}")));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }

    /// One update of `net` from gradients in its parameter order.
    pub fn apply(&mut self, net: &mut DenseNet, grads: &[f64]) -> Result<()> {
        let mut p = net.params();
        self.step(&mut p, grads)?;
        net.set_params(&p)
    }
}

/// Interleaved `[sin(mu f_1), cos(mu f_1), ..., sin(mu f_{I/2}), cos(mu f_{I/2})]`
/// with `f_i = 1000^{-2i/I}`, `i = 1..I/2`.
pub fn sinusoidal_embedding(index: usize, dims: usize) -> Result<Vec<f64>> {
    if dims < 2 || dims % 2 != 0 {
        return Err(invalid(format!("embedding width must be even and >= 2, got {dims}")));
    }
    let mu = index as f64;
    let mut out = Vec::with_capacity(dims);
    for i in 1..=dims / 2 {
        let arg = mu / 1000f64.powf(2.0 * i as f64 / dims as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Rescaled sigmoid mapping `[0, 1]` onto itself with extra slope near zero.
pub fn variant_sigmoid(x: f64, b3: f64) -> f64 {
    let x = if (0.0..=1.0).contains(&x) {
        x
    } else {
        log::warn!("variant_sigmoid input {x} clamped to [0, 1]");
        x.clamp(0.0, 1.0)
    };
    (sigmoid(b3 * x) - 0.5) / (sigmoid(b3) - 0.5)
}

const MAGIC: &[u8; 4] = b"BTNN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetHeader {
    name: String,
    layers: Vec<LayerSpec>,
    params: usize,
    buffers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    nets: Vec<NetHeader>,
    meta: serde_json::Value,
}

/// A set of named networks plus free-form metadata, stored as
/// `BTNN | u32 version | u32 header length | JSON header | f64 LE payload`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub nets: Vec<(String, DenseNet)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn net(&self, name: &str) -> Result<&DenseNet> {
        self.nets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| Error::Config(format!("checkpoint has no network named {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            nets: self
                .nets
                .iter()
                .map(|(name, net)| NetHeader {
                    name: name.clone(),
                    layers: net.specs(),
                    params: net.param_count(),
                    buffers: net.buffers().len(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, net) in &self.nets {
            for v in net.params().into_iter().chain(net.buffers()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let mut r = bytes;
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| fail("truncated magic".into()))?;
        if &word != MAGIC {
            return Err(fail("bad magic".into()));
        }
        r.read_exact(&mut word).map_err(|_| fail("truncated version".into()))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        r.read_exact(&mut word).map_err(|_| fail("truncated header length".into()))?;
        let hlen = u32::from_le_bytes(word) as usize;
        if r.len() < hlen {
            return Err(fail("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen]).map_err(|e| fail(format!("header: {e}")))?;
        r = &r[hlen..];
        let mut nets = Vec::with_capacity(header.nets.len());
        for h in header.nets {
            let mut net = DenseNet::zeros(&h.layers).map_err(|e| fail(format!("{}: {e}", h.name)))?;
            if net.param_count() != h.params || net.buffers().len() != h.buffers {
                return Err(fail(format!("{}: declared sizes disagree with layer dims", h.name)));
            }
            let mut take = |n: usize| -> Result<Vec<f64>> {
                if r.len() < 8 * n {
                    return Err(fail(format!("{}: truncated payload", h.name)));
                }
                let vals = r[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                r = &r[8 * n..];
                Ok(vals)
            };
            let params = take(h.params)?;
            let buffers = take(h.buffers)?;
            net.set_params(&params)?;
            net.set_buffers(&buffers)?;
            nets.push((h.name, net));
        }
        if !r.is_empty() {
            return Err(fail(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { kind: header.kind, nets, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

/// Largest relative deviation between `analytic` and central differences of `f`,
/// with `max(|a|, |n|, floor)` in the denominator.
pub fn gradient_check(params: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64, h: f64, floor: f64) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let num = (up - down) / (2.0 * h);
        let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    fn random_batch(rows: usize, cols: usize, r: &mut SimRng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    fn sq_loss(out: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
        let d = out - target;
        let n = out.len() as f64;
        (d.mapv(|v| v * v).sum() / n, d * (2.0 / n))
    }

    #[test]
    fn zero_net_outputs_zero_and_identity_echoes() {
        let spec = [LayerSpec::new(3, 3, Activation::Linear)];
        let mut z = DenseNet::zeros(&spec).unwrap();
        let x = array![[1.0, -2.0, 3.0]];
        assert!(z.forward(&x, Mode::Eval).unwrap().iter().all(|&v| v == 0.0));
        let mut p = vec![0.0; 12];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        z.set_params(&p).unwrap();
        assert_eq!(z.infer(&x).unwrap(), x);
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let specs = mlp(4, &[8, 8], 2, Activation::Relu, Activation::Sigmoid, false);
        let a = DenseNet::new(&specs, &mut rng(1)).unwrap();
        let b = DenseNet::new(&specs, &mut rng(1)).unwrap();
        let x = random_batch(3, 4, &mut rng(2));
        let ya = a.infer(&x).unwrap();
        assert_eq!(ya.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.infer(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(matches!(a.infer(&random_batch(3, 5, &mut rng(2))), Err(Error::DimensionMismatch { .. })));
        assert!(DenseNet::new(&[LayerSpec::new(2, 3, Activation::Relu), LayerSpec::new(4, 1, Activation::Linear)], &mut rng(0)).is_err());
    }

    #[test]
    fn backward_requires_cache() {
        let net = DenseNet::new(&[LayerSpec::new(2, 1, Activation::Linear)], &mut rng(0)).unwrap();
        assert!(matches!(net.backward(&array![[1.0]]), Err(Error::MissingCache)));
    }

    #[test]
    fn linear_gradient_matches_normal_equation_residual() {
        let mut net = DenseNet::new(&[LayerSpec::new(3, 1, Activation::Linear)], &mut rng(5)).unwrap();
        let x = random_batch(6, 3, &mut rng(6));
        let y = random_batch(6, 1, &mut rng(7));
        let out = net.forward(&x, Mode::Train).unwrap();
        let (_, g) = sq_loss(&out, &y);
        let (grads, _) = net.backward(&g).unwrap();
        // d/dW (1/n)|XW + b - y|^2 = (2/n) X^T r
        let r = &out - &y;
        let want = x.t().dot(&r) * (2.0 / 6.0);
        for i in 0..3 {
            assert_relative_eq!(grads[i], want[[i, 0]], max_relative = 1e-12);
        }
        assert_relative_eq!(grads[3], r.sum() * 2.0 / 6.0, max_relative = 1e-12);
    }

    #[test]
    fn relu_blocks_negative_preactivations() {
        let mut net = DenseNet::zeros(&[LayerSpec::new(1, 1, Activation::Relu)]).unwrap();
        net.set_params(&[1.0, 0.0]).unwrap();
        net.forward(&array![[-2.0]], Mode::Train).unwrap();
        let (g, gi) = net.backward(&array![[1.0]]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert_eq!(gi[[0, 0]], 0.0);
    }

    fn check_net(specs: &[LayerSpec], mode: Mode, seed: u64) -> f64 {
        let mut r = rng(seed);
        let mut net = DenseNet::new(specs, &mut r).unwrap();
        let x = random_batch(5, specs[0].inputs, &mut r);
        let y = random_batch(5, specs.last().unwrap().outputs, &mut r);
        let out = net.forward(&x, mode).unwrap();
        let (_, g) = sq_loss(&out, &y);
        let (grads, gin) = net.backward(&g).unwrap();
        let base = net.clone();
        let p0 = net.params();
        let param_err = gradient_check(&p0, &grads, |p| {
            let mut n = base.clone();
            n.set_params(p).unwrap();
            sq_loss(&n.forward(&x, mode).unwrap(), &y).0
        }, 1e-5, 1e-6);
        let xf: Vec<f64> = x.iter().copied().collect();
        let gin_flat: Vec<f64> = gin.iter().copied().collect();
        let input_err = gradient_check(&xf, &gin_flat, |v| {
            let mut n = base.clone();
            let xx = Array2::from_shape_vec(x.dim(), v.to_vec()).unwrap();
            sq_loss(&n.forward(&xx, mode).unwrap(), &y).0
        }, 1e-5, 1e-6);
        param_err.max(input_err)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let plain = mlp(4, &[6, 5], 3, Activation::Relu, Activation::Linear, false);
        assert!(check_net(&plain, Mode::Train, 10) < 1e-4);
        let sig = mlp(3, &[5], 2, Activation::Sigmoid, Activation::Sigmoid, false);
        assert!(check_net(&sig, Mode::Train, 11) < 1e-4);
        let bn = mlp(3, &[6, 6], 1, Activation::Relu, Activation::Sigmoid, true);
        assert!(check_net(&bn, Mode::Train, 12) < 1e-4);
        assert!(check_net(&bn, Mode::Eval, 13) < 1e-4);
    }

    #[test]
    fn batch_norm_tracks_running_statistics() {
        let specs = [LayerSpec::new(1, 1, Activation::Linear).with_batch_norm()];
        let mut net = DenseNet::zeros(&specs).unwrap();
        net.set_params(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        let x = array![[1.0], [3.0]];
        let y = net.forward(&x, Mode::Train).unwrap();
        assert_relative_eq!(y[[0, 0]], -1.0, max_relative = 1e-4);
        let buf = net.buffers();
        assert_relative_eq!(buf[0], 0.2, max_relative = 1e-12);
        assert_relative_eq!(buf[1], 0.9 + 0.1, max_relative = 1e-12);
    }

    #[test]
    fn adam_examples() {
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999);
        let mut p = vec![1.0, -2.0];
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut opt = Adam::new(2, 0.1, 0.9, 0.999);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.5]).unwrap();
        assert_relative_eq!(p[0], -0.1, max_relative = 1e-6);
        assert_relative_eq!(p[1], 0.1, max_relative = 1e-6);

        let mut opt = Adam::new(1, 1e-2, 0.9, 0.999);
        let mut x = vec![1.0];
        for _ in 0..500 {
            let g = [2.0 * x[0]];
            opt.step(&mut x, &g).unwrap();
        }
        assert!(x[0].abs() < 1e-3, "x = {}", x[0]);

        assert!(matches!(opt.step(&mut x, &[f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn embedding_examples() {
        let e0 = sinusoidal_embedding(0, 16).unwrap();
        for pair in e0.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        let e1 = sinusoidal_embedding(1, 2).unwrap();
        assert_relative_eq!(e1[0], 0.000_999_999_833_333_341_7, max_relative = 1e-12);
        assert_relative_eq!(e1[1], 0.999_999_500_000_041_7, max_relative = 1e-12);
        for mu in [0, 1, 63, 1000, 1_000_000] {
            assert!(sinusoidal_embedding(mu, 16).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
        assert!(sinusoidal_embedding(1, 7).is_err());
    }

    #[test]
    fn variant_sigmoid_examples() {
        assert_eq!(variant_sigmoid(0.0, 5.0), 0.0);
        assert_relative_eq!(variant_sigmoid(1.0, 5.0), 1.0, max_relative = 1e-15);
        assert_relative_eq!(variant_sigmoid(0.1, 5.0), 0.248_241_549_775_429_92, max_relative = 1e-12);
        assert!(variant_sigmoid(0.1, 5.0) - variant_sigmoid(0.0, 5.0) > 0.1);
        assert_eq!(variant_sigmoid(1.5, 5.0), variant_sigmoid(1.0, 5.0));
        let mut prev = -1.0;
        for k in 0..=100 {
            let v = variant_sigmoid(k as f64 / 100.0, 5.0);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let mut r = rng(3);
        let specs = mlp(5, &[7], 2, Activation::Relu, Activation::Sigmoid, true);
        let mut net = DenseNet::new(&specs, &mut r).unwrap();
        net.forward(&random_batch(4, 5, &mut r), Mode::Train).unwrap();
        let ck = Checkpoint { kind: "test".into(), nets: vec![("g".into(), net.clone())], meta: serde_json::json!({"k": 1}) };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.btnn");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta["k"], 1);
        let loaded = back.net("g").unwrap();
        assert_eq!(loaded, &net);
        assert_eq!(loaded.buffers(), net.buffers());

        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes, &path), Err(Error::Checkpoint { .. })));
        let mut bad = ck.to_bytes();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, &path).is_err());
    }
}
