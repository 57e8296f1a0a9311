//! Small differentiable function approximators: MLPs and lookup tables over
//! flat parameter vectors, categorical and Gaussian output heads, Adam, and
//! finite-difference gradient checks.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{logsumexp, softmax};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Keeps the tanh change-of-variable term finite at the boundary.
pub const SQUASH_EPS: f64 = 1e-6;

const CHECKPOINT_MAGIC: &[u8; 8] = b"VMBPOPRM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Fixed multiplier on the final affine layer.
    pub output_scale: f64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, activation: Activation) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("MLP dimensions must be at least 1".into()));
        }
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
            activation,
            output_scale: 1.0,
        })
    }

    pub fn with_output_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("output scale must be positive, got {scale}")));
        }
        self.output_scale = scale;
        Ok(self)
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

/// One cell per combination of integer input coordinates, each holding
/// `output_dim` parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub dims: Vec<usize>,
    pub output_dim: usize,
}

impl TableSpec {
    pub fn new(dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) || output_dim == 0 {
            return Err(Error::InvalidArgument("table dimensions must be at least 1".into()));
        }
        Ok(Self { dims, output_dim })
    }

    pub fn n_cells(&self) -> usize {
        self.dims.iter().product()
    }

    fn cell(&self, input: &[f64]) -> Result<usize> {
        let mut cell = 0;
        for (&x, &d) in input.iter().zip(&self.dims) {
            let i = x.round();
            if !(i >= 0.0 && (i as usize) < d && (x - i).abs() < 1e-9) {
                return Err(Error::Shape(format!("table index {x} outside 0..{d}")));
            }
            cell = cell * d + i as usize;
        }
        Ok(cell)
    }
}

/// A named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    slots: Vec<Slot>,
}

impl Layout {
    fn from_shapes(shapes: Vec<(String, usize, usize)>) -> Self {
        let mut offset = 0;
        let slots = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let s = Slot { name, offset, rows, cols };
                offset += rows * cols;
                s
            })
            .collect();
        Self { slots }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Slots are contiguous, in order, and cover `0..len` exactly once.
    pub fn is_exact_cover(&self) -> bool {
        let mut next = 0;
        for s in &self.slots {
            if s.offset != next {
                return false;
            }
            next += s.len();
        }
        true
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, layout needs {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.slot(name).map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layout.slots.len() as u32).to_le_bytes());
        for s in &self.layout.slots {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.rows as u64).to_le_bytes());
            out.extend_from_slice(&(s.cols as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::InvalidArgument("not a parameter checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported checkpoint version {version}")));
        }
        let n_slots = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n_slots);
        for _ in 0..n_slots {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::InvalidArgument("slot name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            shapes.push((name, rows, cols));
        }
        let n = r.u64()? as usize;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidArgument("trailing bytes after checkpoint".into()));
        }
        Self::from_values(Layout::from_shapes(shapes), values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::InvalidArgument("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Intermediate values of one forward pass, consumed by [`Approximator::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// MLP: the input followed by every layer's output. Table: the output only.
    activations: Vec<Vec<f64>>,
    cell: usize,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace is never empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approximator {
    Mlp(MlpSpec),
    Table(TableSpec),
}

impl Approximator {
    pub fn input_dim(&self) -> usize {
        match self {
            Approximator::Mlp(s) => s.input_dim,
            Approximator::Table(t) => t.dims.len(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Approximator::Mlp(s) => s.output_dim,
            Approximator::Table(t) => t.output_dim,
        }
    }

    pub fn layout(&self) -> Layout {
        match self {
            Approximator::Mlp(s) => {
                let w = s.widths();
                let mut shapes = Vec::new();
                for l in 0..w.len() - 1 {
                    shapes.push((format!("layer{l}.weight"), w[l + 1], w[l]));
                    shapes.push((format!("layer{l}.bias"), w[l + 1], 1));
                }
                Layout::from_shapes(shapes)
            }
            Approximator::Table(t) => Layout::from_shapes(vec![("table".into(), t.n_cells(), t.output_dim)]),
        }
    }

    /// Glorot-uniform weights and zero biases for MLPs; zeros for tables.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout());
        if let Approximator::Mlp(spec) = self {
            let last = format!("layer{}.weight", spec.hidden.len());
            for s in p.layout.slots.clone() {
                if s.name.ends_with(".weight") {
                    // The final layer is shrunk by the output scale so that
                    // scaled and unscaled nets start with the same outputs.
                    let shrink = if s.name == last { spec.output_scale } else { 1.0 };
                    let limit = (6.0 / (s.rows + s.cols) as f64).sqrt() / shrink;
                    for v in &mut p.values[s.offset..s.offset + s.len()] {
                        *v = rng.random_range(-limit..limit);
                    }
                }
            }
        }
        p
    }

    fn check(&self, params: &ParamVector, input: &[f64]) -> Result<()> {
        if params.len() != self.layout().len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.layout().len(),
                params.len()
            )));
        }
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "expected input of width {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(params, input)?.activations.pop().expect("nonempty"))
    }

    pub fn forward_trace(&self, params: &ParamVector, input: &[f64]) -> Result<Trace> {
        self.check(params, input)?;
        let p = params.as_slice();
        match self {
            Approximator::Mlp(spec) => {
                let w = spec.widths();
                let mut acts = Vec::with_capacity(w.len());
                acts.push(input.to_vec());
                let mut offset = 0;
                for l in 0..w.len() - 1 {
                    let (n_in, n_out) = (w[l], w[l + 1]);
                    let weight = &p[offset..offset + n_in * n_out];
                    let bias = &p[offset + n_in * n_out..offset + n_in * n_out + n_out];
                    offset += n_in * n_out + n_out;
                    let a = acts.last().expect("nonempty");
                    let last = l == w.len() - 2;
                    let z: Vec<f64> = (0..n_out)
                        .map(|i| {
                            let row = &weight[i * n_in..(i + 1) * n_in];
                            let s = bias[i] + row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>();
                            if last {
                                spec.output_scale * s
                            } else {
                                spec.activation.apply(s)
                            }
                        })
                        .collect();
                    acts.push(z);
                }
                Ok(Trace {
                    activations: acts,
                    cell: 0,
                })
            }
            Approximator::Table(t) => {
                let cell = t.cell(input)?;
                let out = p[cell * t.output_dim..(cell + 1) * t.output_dim].to_vec();
                Ok(Trace {
                    activations: vec![out],
                    cell,
                })
            }
        }
    }

    /// Adds the gradient of `<output, cotangent>` to `grad` and returns the
    /// gradient with respect to the input (zero for tables).
    pub fn backward(&self, params: &ParamVector, trace: &Trace, cotangent: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let p = params.as_slice();
        match self {
            Approximator::Mlp(spec) => {
                let w = spec.widths();
                let n_layers = w.len() - 1;
                let mut offsets = Vec::with_capacity(n_layers);
                let mut off = 0;
                for l in 0..n_layers {
                    offsets.push(off);
                    off += w[l] * w[l + 1] + w[l + 1];
                }
                let mut delta: Vec<f64> = cotangent.iter().map(|c| c * spec.output_scale).collect();
                for l in (0..n_layers).rev() {
                    let (n_in, n_out) = (w[l], w[l + 1]);
                    let o = offsets[l];
                    let a = &trace.activations[l];
                    for i in 0..n_out {
                        let d = delta[i];
                        if d != 0.0 {
                            let g = &mut grad[o + i * n_in..o + (i + 1) * n_in];
                            for (gj, aj) in g.iter_mut().zip(a) {
                                *gj += d * aj;
                            }
                        }
                        grad[o + n_in * n_out + i] += d;
                    }
                    let weight = &p[o..o + n_in * n_out];
                    let mut down = vec![0.0; n_in];
                    for i in 0..n_out {
                        let d = delta[i];
                        if d != 0.0 {
                            for (dj, wij) in down.iter_mut().zip(&weight[i * n_in..(i + 1) * n_in]) {
                                *dj += d * wij;
                            }
                        }
                    }
                    if l > 0 {
                        for (dj, aj) in down.iter_mut().zip(a) {
                            *dj *= spec.activation.derivative_at_output(*aj);
                        }
                    }
                    delta = down;
                }
                delta
            }
            Approximator::Table(t) => {
                let base = trace.cell * t.output_dim;
                for (g, c) in grad[base..base + t.output_dim].iter_mut().zip(cotangent) {
                    *g += c;
                }
                vec![0.0; t.dims.len()]
            }
        }
    }

    /// Gradient of `<forward(params, input), cotangent>` with respect to the parameters.
    pub fn grad(&self, params: &ParamVector, input: &[f64], cotangent: &[f64]) -> Result<ParamVector> {
        let trace = self.forward_trace(params, input)?;
        if cotangent.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "expected cotangent of width {}, got {}",
                self.output_dim(),
                cotangent.len()
            )));
        }
        let mut g = ParamVector::zeros(self.layout());
        self.backward(params, &trace, cotangent, g.as_mut_slice());
        Ok(g)
    }
}

/// `log softmax(logits)[k]`.
pub fn categorical_log_prob(logits: &[f64], k: usize) -> f64 {
    logits[k] - logsumexp(logits)
}

/// Gradient of `categorical_log_prob(logits, k)` with respect to the logits.
pub fn categorical_log_prob_grad(logits: &[f64], k: usize) -> Vec<f64> {
    let mut g: Vec<f64> = softmax(logits).into_iter().map(|p| -p).collect();
    g[k] += 1.0;
    g
}

/// Diagonal Gaussian over `dim` coordinates, read from `2 * dim` network
/// outputs (means, then log standard deviations), optionally squashed by tanh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianHead {
    pub dim: usize,
    pub squash: bool,
    /// Lower clamp of the log standard deviation.
    pub min_log_std: f64,
}

/// Means and clamped log standard deviations read from a network output.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Whether each log standard deviation sat on a clamp bound (zero gradient).
    pub clamped: Vec<bool>,
}

/// `KL(a || b)` between diagonal Gaussians.
pub fn gaussian_kl(a: &GaussianParams, b: &GaussianParams) -> f64 {
    (0..a.mean.len())
        .map(|i| {
            let var_b = (2.0 * b.log_std[i]).exp();
            let num = (2.0 * a.log_std[i]).exp() + (a.mean[i] - b.mean[i]).powi(2);
            b.log_std[i] - a.log_std[i] + num / (2.0 * var_b) - 0.5
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSample {
    /// Pre-squash value `mean + std * eps`.
    pub u: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
}

impl GaussianHead {
    pub fn new(dim: usize, squash: bool) -> Self {
        Self {
            dim,
            squash,
            min_log_std: LOG_STD_MIN,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.dim
    }

    pub fn params(&self, out: &[f64]) -> GaussianParams {
        let mean = out[..self.dim].to_vec();
        let raw = &out[self.dim..2 * self.dim];
        let log_std = raw.iter().map(|&s| s.clamp(self.min_log_std, LOG_STD_MAX)).collect();
        let clamped = raw.iter().map(|&s| !(self.min_log_std..=LOG_STD_MAX).contains(&s)).collect();
        GaussianParams { mean, log_std, clamped }
    }

    fn squash_correction(&self, u: &[f64]) -> f64 {
        if self.squash {
            u.iter().map(|&x| (1.0 - x.tanh().powi(2) + SQUASH_EPS).ln()).sum()
        } else {
            0.0
        }
    }

    /// Log-density of the unsquashed Gaussian at `u`.
    pub fn base_log_prob(&self, gp: &GaussianParams, u: &[f64]) -> f64 {
        let mut lp = 0.0;
        for i in 0..self.dim {
            let z = (u[i] - gp.mean[i]) / gp.log_std[i].exp();
            lp += -0.5 * z * z - gp.log_std[i] - 0.5 * (2.0 * PI).ln();
        }
        lp
    }

    /// Log-density of the action with pre-squash value `u`.
    pub fn log_prob_u(&self, out: &[f64], u: &[f64]) -> f64 {
        self.base_log_prob(&self.params(out), u) - self.squash_correction(u)
    }

    /// Log-density of an action; with squashing the action must lie in `(-1, 1)`.
    pub fn log_prob(&self, out: &[f64], action: &[f64]) -> f64 {
        self.log_prob_u(out, &self.unsquash(action))
    }

    pub fn unsquash(&self, action: &[f64]) -> Vec<f64> {
        if self.squash {
            action.iter().map(|&a| a.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh()).collect()
        } else {
            action.to_vec()
        }
    }

    /// Reparameterized draw `squash(mean + std * eps)`.
    pub fn sample(&self, out: &[f64], eps: &[f64]) -> GaussianSample {
        let gp = self.params(out);
        let u: Vec<f64> = (0..self.dim).map(|i| gp.mean[i] + gp.log_std[i].exp() * eps[i]).collect();
        let action = if self.squash { u.iter().map(|x| x.tanh()).collect() } else { u.clone() };
        let log_prob = self.base_log_prob(&gp, &u) - self.squash_correction(&u);
        GaussianSample { u, action, log_prob }
    }

    /// Gradient of the base log-density at a fixed `u` with respect to the
    /// network output (means, then raw log standard deviations).
    pub fn base_log_prob_grad(&self, out: &[f64], u: &[f64]) -> Vec<f64> {
        let gp = self.params(out);
        let mut g = vec![0.0; 2 * self.dim];
        for i in 0..self.dim {
            let sd = gp.log_std[i].exp();
            let z = (u[i] - gp.mean[i]) / sd;
            g[i] = z / sd;
            g[self.dim + i] = if gp.clamped[i] { 0.0 } else { z * z - 1.0 };
        }
        g
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Central finite differences of `f` at `x`.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest per-coordinate relative error, with `floor` guarding near-zero entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp(input: usize, hidden: Vec<usize>, output: usize) -> Approximator {
        Approximator::Mlp(MlpSpec::new(input, hidden, output, Activation::Tanh).unwrap())
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let net = mlp(3, vec![4, 4], 2);
        let p = ParamVector::zeros(net.layout());
        assert_eq!(net.forward(&p, &[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_layer_is_a_matrix_product() {
        let net = mlp(2, vec![], 2);
        let p = ParamVector::from_values(net.layout(), vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        assert_eq!(net.forward(&p, &[1.0, 1.0]).unwrap(), vec![3.5, 6.5]);
        let g = net.grad(&p, &[2.0, 3.0], &[1.0, -1.0]).unwrap();
        assert_eq!(g.tensor("layer0.weight").unwrap(), &[2.0, 3.0, -2.0, -3.0]);
        assert_eq!(g.tensor("layer0.bias").unwrap(), &[1.0, -1.0]);
    }

    #[test]
    fn forward_is_deterministic_and_zero_cotangent_gives_zero_grad() {
        let net = mlp(3, vec![5, 5], 2);
        let p = net.init(&mut ChaCha8Rng::seed_from_u64(1));
        let x = [0.3, -0.1, 0.9];
        assert_eq!(net.forward(&p, &x).unwrap(), net.forward(&p, &x).unwrap());
        let g = net.grad(&p, &x, &[0.0, 0.0]).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = mlp(3, vec![4], 1);
        let p = ParamVector::zeros(net.layout());
        assert!(matches!(net.forward(&p, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (activation, scale) in [(Activation::Tanh, 1.0), (Activation::Relu, 1.0), (Activation::Tanh, 7.5)] {
            let spec = MlpSpec::new(3, vec![6, 5], 2, activation).unwrap();
            let net = Approximator::Mlp(spec.with_output_scale(scale).unwrap());
            let p = net.init(&mut rng);
            let x = [0.4, -0.7, 0.2];
            let cot = [0.3, -1.1];
            let g = net.grad(&p, &x, &cot).unwrap();
            let numeric = finite_difference(
                |v| {
                    let q = ParamVector::from_values(net.layout(), v.to_vec()).unwrap();
                    let y = net.forward(&q, &x).unwrap();
                    y[0] * cot[0] + y[1] * cot[1]
                },
                p.as_slice(),
                1e-5,
            );
            assert!(max_relative_error(g.as_slice(), &numeric, 1e-6) < 1e-4);
            let trace = net.forward_trace(&p, &x).unwrap();
            let mut sink = vec![0.0; p.len()];
            let gx = net.backward(&p, &trace, &cot, &mut sink);
            let nx = finite_difference(
                |v| {
                    let y = net.forward(&p, v).unwrap();
                    y[0] * cot[0] + y[1] * cot[1]
                },
                &x,
                1e-5,
            );
            assert!(max_relative_error(&gx, &nx, 1e-6) < 1e-4);
        }
    }

    #[test]
    fn table_reads_and_writes_one_cell() {
        let t = Approximator::Table(TableSpec::new(vec![3, 2], 2).unwrap());
        let values: Vec<f64> = (0..12).map(f64::from).collect();
        let p = ParamVector::from_values(t.layout(), values).unwrap();
        assert_eq!(t.forward(&p, &[2.0, 1.0]).unwrap(), vec![10.0, 11.0]);
        let g = t.grad(&p, &[1.0, 0.0], &[1.0, 2.0]).unwrap();
        let nonzero: Vec<usize> = (0..12).filter(|&i| g.as_slice()[i] != 0.0).collect();
        assert_eq!(nonzero, vec![4, 5]);
        assert!(t.forward(&p, &[3.0, 0.0]).is_err());
    }

    #[test]
    fn layout_covers_vector_exactly() {
        let net = mlp(4, vec![3, 2], 5);
        let l = net.layout();
        assert!(l.is_exact_cover());
        assert_eq!(l.len(), 4 * 3 + 3 + 3 * 2 + 2 + 2 * 5 + 5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = mlp(2, vec![3], 1);
        let p = net.init(&mut ChaCha8Rng::seed_from_u64(3));
        let q = ParamVector::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, q);
        let mut bad = p.to_bytes();
        bad[8] = 9;
        assert!(ParamVector::from_bytes(&bad).is_err());
        assert!(ParamVector::from_bytes(&p.to_bytes()[..20]).is_err());
    }

    #[test]
    fn categorical_gradient_matches_finite_differences() {
        let logits = [0.2, -1.0, 0.7];
        let g = categorical_log_prob_grad(&logits, 1);
        let n = finite_difference(|z| categorical_log_prob(z, 1), &logits, 1e-5);
        assert!(max_relative_error(&g, &n, 1e-6) < 1e-4);
    }

    #[test]
    fn gaussian_mode_log_density() {
        let head = GaussianHead::new(2, false);
        let out = [0.3, -0.2, 0.5, -1.0];
        let s = head.sample(&out, &[0.0, 0.0]);
        assert_eq!(s.action, vec![0.3, -0.2]);
        let expected = -(0.5 + 0.5 * (2.0 * PI).ln()) - (-1.0 + 0.5 * (2.0 * PI).ln());
        assert!((s.log_prob - expected).abs() < 1e-14);
    }

    #[test]
    fn squashed_density_concentrates_as_std_shrinks() {
        let head = GaussianHead::new(1, true);
        let wide = head.sample(&[0.0, 0.0], &[0.0]);
        let narrow = head.sample(&[0.0, -8.0], &[0.0]);
        assert_eq!(narrow.action[0], 0.0);
        assert!(narrow.log_prob > wide.log_prob + 7.0);
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        let head = GaussianHead::new(1, true);
        let out = [0.4, -0.3];
        let n = 200_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let a = -1.0 + (i as f64 + 0.5) * h;
                head.log_prob(&out, &[a]).exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 0.02, "{total}");
    }

    #[test]
    fn log_std_is_clamped() {
        let head = GaussianHead::new(1, false);
        let gp = head.params(&[0.0, 5.0]);
        assert_eq!(gp.log_std[0], LOG_STD_MAX);
        assert_eq!(head.base_log_prob_grad(&[0.0, 5.0], &[1.0])[1], 0.0);
    }

    #[test]
    fn gaussian_log_prob_gradient_matches_finite_differences() {
        let head = GaussianHead::new(2, false);
        let out = [0.1, -0.4, 0.3, -0.6];
        let u = [0.5, 0.2];
        let g = head.base_log_prob_grad(&out, &u);
        let n = finite_difference(|o| head.base_log_prob(&head.params(o), &u), &out, 1e-5);
        assert!(max_relative_error(&g, &n, 1e-6) < 1e-4);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut opt = Adam::new(3);
        let mut p = vec![1.0, 1.0, 1.0];
        opt.step(&mut p, &[0.5, -3.0, 1e-3], 0.01).unwrap();
        for (v, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - (1.0 + 0.01 * s)).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut opt = Adam::new(2);
        let mut p = vec![0.3, -0.2];
        for _ in 0..100 {
            opt.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        }
        assert_eq!(p, vec![0.3, -0.2]);
    }

    #[test]
    fn adam_minimizes_a_quadratic_bowl() {
        let mut opt = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g, 1e-2).unwrap();
        }
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "{norm}");
    }
}
