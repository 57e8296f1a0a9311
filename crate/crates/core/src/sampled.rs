//! Sample-based VMBPO and VMBPO-MFE: replay buffers, the eight parameterized
//! functions, every E-step/M-step update and the training loops.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approx::{
    categorical_log_prob, categorical_log_prob_grad, gaussian_kl, Activation, Adam, Approximator, GaussianHead, MlpSpec, LOG_STD_MAX, LOG_STD_MIN,
    ParamVector, TableSpec, Trace,
};
use crate::envs::{Environment, Space};
use crate::error::{Error, Result};
use crate::io::{fmt_real, CsvTable};
use crate::mdp::FiniteMdp;
use crate::util::{argmax, logsumexp, mean_sd, sample_index, softmax};

pub const METRICS_HEADER: [&str; 10] = [
    "wall_step",
    "env_steps",
    "mean_return",
    "return_sd",
    "elbo_estimate",
    "loss_dynamics",
    "loss_nu",
    "loss_q",
    "loss_v",
    "loss_actor",
];

pub const SYNTHETIC_PER_STEP_CHOICES: [usize; 3] = [128, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
}

/// States and actions use the network encoding: a one-element index vector
/// for discrete spaces, and for continuous actions the coordinates divided by
/// the action bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateAction {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

/// Bounded FIFO that only accepts transitions of one source.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
    source: Source,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, source: Source) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be at least 1".into()));
        }
        Ok(Self {
            items: VecDeque::new(),
            capacity,
            source,
        })
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.source != self.source {
            return Err(Error::InvalidArgument(format!(
                "{:?} transition pushed into a {:?} buffer",
                t.source, self.source
            )));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` uniform draws with replacement; empty if the buffer is empty.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
            .collect()
    }
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn non_finite(what: &str) -> Error {
    Error::NonFinite {
        what: what.to_string(),
        step: 0,
    }
}

fn clip(x: f64, c: f64) -> f64 {
    x.clamp(-c, c)
}

/// An approximator with its parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct Net {
    pub approx: Approximator,
    pub params: ParamVector,
    opt: Adam,
    last_grad: Vec<f64>,
}

impl Net {
    pub fn new<R: Rng + ?Sized>(approx: Approximator, rng: &mut R) -> Self {
        let params = approx.init(rng);
        let opt = Adam::new(params.len());
        Self {
            approx,
            params,
            opt,
            last_grad: Vec::new(),
        }
    }

    /// Loss gradient from the most recent update call (before its step).
    pub fn last_gradient(&self) -> &[f64] {
        &self.last_grad
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.approx
            .forward(&self.params, input)
            .expect("input width is fixed at construction")
    }

    fn trace(&self, input: &[f64]) -> Trace {
        self.approx
            .forward_trace(&self.params, input)
            .expect("input width is fixed at construction")
    }

    fn backward(&self, trace: &Trace, cot: &[f64], grad: &mut [f64]) -> Vec<f64> {
        self.approx.backward(&self.params, trace, cot, grad)
    }

    pub fn scalar(&self, input: &[f64]) -> f64 {
        self.forward(input)[0]
    }

    fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn apply(&mut self, grad: &[f64], lr: f64, what: &str) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(non_finite(what));
        }
        self.opt.step(self.params.as_mut_slice(), grad, lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyHead {
    Categorical(usize),
    Gaussian(GaussianHead),
}

/// Baseline or variational policy over the network action encoding.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub net: Net,
    pub head: PolicyHead,
}

impl PolicyNet {
    /// Action probabilities; discrete heads only.
    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.net.forward(x))
    }

    pub fn log_prob(&self, x: &[f64], a: &[f64]) -> f64 {
        let out = self.net.forward(x);
        match self.head {
            PolicyHead::Categorical(_) => categorical_log_prob(&out, a[0] as usize),
            PolicyHead::Gaussian(h) => h.log_prob(&out, a),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let out = self.net.forward(x);
        match self.head {
            PolicyHead::Categorical(_) => vec![sample_index(&softmax(&out), rng) as f64],
            PolicyHead::Gaussian(h) => {
                let eps: Vec<f64> = (0..h.dim).map(|_| rng.sample(StandardNormal)).collect();
                h.sample(&out, &eps).action
            }
        }
    }

    /// Reparameterized draw from externally supplied noise.
    pub fn sample_with_noise(&self, x: &[f64], eps: &[f64]) -> Vec<f64> {
        match self.head {
            PolicyHead::Categorical(_) => panic!("categorical policies are not reparameterized"),
            PolicyHead::Gaussian(h) => h.sample(&self.net.forward(x), eps).action,
        }
    }

    /// Most likely action (squashed mean for Gaussian heads).
    pub fn greedy(&self, x: &[f64]) -> Vec<f64> {
        let out = self.net.forward(x);
        match self.head {
            PolicyHead::Categorical(_) => vec![argmax(&out) as f64],
            PolicyHead::Gaussian(h) => {
                let mean = &out[..h.dim];
                if h.squash {
                    mean.iter().map(|m| m.tanh()).collect()
                } else {
                    mean.to_vec()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DynamicsHead {
    /// Logits over next-state indices.
    Categorical(usize),
    /// Diagonal Gaussian over `next_state - state`.
    GaussianDelta(GaussianHead),
}

#[derive(Debug, Clone)]
pub struct DynamicsNet {
    pub net: Net,
    pub head: DynamicsHead,
}

impl DynamicsNet {
    /// Next-state probabilities; discrete heads only.
    pub fn probs(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        softmax(&self.net.forward(&cat(&[x, a])))
    }

    pub fn log_prob(&self, x: &[f64], a: &[f64], y: &[f64]) -> f64 {
        let out = self.net.forward(&cat(&[x, a]));
        match self.head {
            DynamicsHead::Categorical(_) => categorical_log_prob(&out, y[0] as usize),
            DynamicsHead::GaussianDelta(h) => {
                let delta: Vec<f64> = y.iter().zip(x).map(|(y, x)| y - x).collect();
                h.log_prob(&out, &delta)
            }
        }
    }

    /// Adds `scale * d log q_d(y|x,a) / dθ` to `grad` and returns the log-density.
    fn accumulate_log_prob(&self, x: &[f64], a: &[f64], y: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        let trace = self.net.trace(&cat(&[x, a]));
        let out = trace.output();
        let (lp, mut g) = match self.head {
            DynamicsHead::Categorical(_) => {
                let k = y[0] as usize;
                (categorical_log_prob(out, k), categorical_log_prob_grad(out, k))
            }
            DynamicsHead::GaussianDelta(h) => {
                let delta: Vec<f64> = y.iter().zip(x).map(|(y, x)| y - x).collect();
                (h.log_prob(out, &delta), h.base_log_prob_grad(out, &delta))
            }
        };
        for v in &mut g {
            *v *= scale;
        }
        self.net.backward(&trace, &g, grad);
        lp
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], a: &[f64], rng: &mut R) -> Vec<f64> {
        let out = self.net.forward(&cat(&[x, a]));
        match self.head {
            DynamicsHead::Categorical(_) => vec![sample_index(&softmax(&out), rng) as f64],
            DynamicsHead::GaussianDelta(h) => {
                let eps: Vec<f64> = (0..h.dim).map(|_| rng.sample(StandardNormal)).collect();
                let d = h.sample(&out, &eps).action;
                x.iter().zip(&d).map(|(x, d)| x + d).collect()
            }
        }
    }
}

/// Shapes of the environment as seen by the networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NetKind {
    Tabular { n_states: usize, n_actions: usize },
    Neural { state_dim: usize, action_dim: usize, action_bound: f64 },
}

impl NetKind {
    pub fn from_env(env: &dyn Environment) -> Result<Self> {
        match (env.state_space(), env.action_space()) {
            (Space::Discrete(n_states), Space::Discrete(n_actions)) => Ok(NetKind::Tabular { n_states, n_actions }),
            (Space::Continuous { dim: state_dim, .. }, Space::Continuous { dim: action_dim, bound }) => {
                Ok(NetKind::Neural {
                    state_dim,
                    action_dim,
                    action_bound: bound,
                })
            }
            _ => Err(Error::InvalidArgument(
                "state and action spaces must be both discrete or both continuous".into(),
            )),
        }
    }

    /// Converts a network action to the environment's action.
    pub fn env_action(&self, a: &[f64]) -> Vec<f64> {
        match *self {
            NetKind::Tabular { .. } => a.to_vec(),
            NetKind::Neural { action_bound, .. } => a.iter().map(|v| v * action_bound).collect(),
        }
    }
}

/// The baseline policy, variational dynamics, variational policy, log-ratio,
/// value, action-value and the two target networks.
#[derive(Debug, Clone)]
pub struct VmbpoNets {
    pub kind: NetKind,
    pub policy: PolicyNet,
    pub dynamics: DynamicsNet,
    pub variational: PolicyNet,
    pub log_ratio: Net,
    pub value: Net,
    pub action_value: Net,
    pub target_value: Net,
    pub target_action_value: Net,
}

impl VmbpoNets {
    pub fn new<R: Rng + ?Sized>(kind: NetKind, hidden: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        Self::with_value_scale(kind, hidden, activation, 1.0, rng)
    }

    /// As [`VmbpoNets::new`], with the value and action-value MLPs' outputs
    /// multiplied by `value_scale` (tables are unaffected).
    pub fn with_value_scale<R: Rng + ?Sized>(
        kind: NetKind,
        hidden: &[usize],
        activation: Activation,
        value_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (pol, dynamics, nu, v, q, ph, dh) = match kind {
            NetKind::Tabular { n_states, n_actions } => (
                Approximator::Table(TableSpec::new(vec![n_states], n_actions)?),
                Approximator::Table(TableSpec::new(vec![n_states, n_actions], n_states)?),
                Approximator::Table(TableSpec::new(vec![n_states, n_actions, n_states], 1)?),
                Approximator::Table(TableSpec::new(vec![n_states], 1)?),
                Approximator::Table(TableSpec::new(vec![n_states, n_actions], 1)?),
                PolicyHead::Categorical(n_actions),
                DynamicsHead::Categorical(n_states),
            ),
            NetKind::Neural {
                state_dim, action_dim, ..
            } => {
                let mlp = |i, o| MlpSpec::new(i, hidden.to_vec(), o, activation).map(Approximator::Mlp);
                let scaled = |i| {
                    MlpSpec::new(i, hidden.to_vec(), 1, activation)?
                        .with_output_scale(value_scale)
                        .map(Approximator::Mlp)
                };
                (
                    mlp(state_dim, 2 * action_dim)?,
                    mlp(state_dim + action_dim, 2 * state_dim)?,
                    mlp(2 * state_dim + action_dim, 1)?,
                    scaled(state_dim)?,
                    scaled(state_dim + action_dim)?,
                    PolicyHead::Gaussian(GaussianHead::new(action_dim, true)),
                    DynamicsHead::GaussianDelta(GaussianHead::new(state_dim, false)),
                )
            }
        };
        let policy = PolicyNet {
            net: Net::new(pol, rng),
            head: ph,
        };
        let variational = policy.clone();
        let dynamics = DynamicsNet {
            net: Net::new(dynamics, rng),
            head: dh,
        };
        let log_ratio = Net::new(nu, rng);
        let value = Net::new(v, rng);
        let action_value = Net::new(q, rng);
        Ok(Self {
            kind,
            target_value: value.clone(),
            target_action_value: action_value.clone(),
            policy,
            dynamics,
            variational,
            log_ratio,
            value,
            action_value,
        })
    }

    /// Sets the log-std floor of the baseline and variational policy heads.
    pub fn set_policy_min_log_std(&mut self, min_log_std: f64) {
        for p in [&mut self.policy, &mut self.variational] {
            if let PolicyHead::Gaussian(h) = &mut p.head {
                h.min_log_std = min_log_std;
            }
        }
    }

    pub fn v(&self, x: &[f64]) -> f64 {
        self.value.scalar(x)
    }

    pub fn v_target(&self, x: &[f64]) -> f64 {
        self.target_value.scalar(x)
    }

    pub fn q(&self, x: &[f64], a: &[f64]) -> f64 {
        self.action_value.scalar(&cat(&[x, a]))
    }

    pub fn q_target(&self, x: &[f64], a: &[f64]) -> f64 {
        self.target_action_value.scalar(&cat(&[x, a]))
    }

    pub fn nu(&self, x: &[f64], a: &[f64], y: &[f64]) -> f64 {
        self.log_ratio.scalar(&cat(&[x, a, y]))
    }
}

/// Constants shared by the loss functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub eta: f64,
    /// Scales every bootstrapped term; 1 for stopping-time problems.
    pub discount: f64,
    /// Bound on every exponent.
    pub clip: f64,
    pub exp_td_temperature: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            eta: 1.0,
            discount: 1.0,
            clip: 20.0,
            exp_td_temperature: 1.0,
        }
    }
}

fn check_batch(op: &str, n: usize, weights: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{op}: empty batch")));
    }
    if n != weights {
        return Err(Error::Shape(format!("{op}: {n} samples but {weights} weights")));
    }
    Ok(())
}

fn check_source(op: &str, batch: &[Transition], source: Source) -> Result<()> {
    if batch.iter().any(|t| t.source != source) {
        return Err(Error::InvalidArgument(format!("{op}: expected only {source:?} transitions")));
    }
    Ok(())
}

/// Runs `steps` descent steps of a loss given as `eval(grad) -> loss`; with
/// `steps = 0` the loss is evaluated once and nothing changes.
fn descend<F>(net: &mut Net, steps: usize, lr: f64, what: &str, mut eval: F) -> Result<f64>
where
    F: FnMut(&Net, &mut [f64]) -> f64,
{
    let mut loss = f64::NAN;
    for i in 0..steps.max(1) {
        let mut g = net.zero_grad();
        loss = eval(net, &mut g);
        if !loss.is_finite() {
            return Err(non_finite(what));
        }
        if i < steps {
            net.apply(&g, lr, what)?;
        }
        net.last_grad = g;
    }
    Ok(loss)
}

/// Exponentially weighted log-likelihood step for the variational dynamics.
/// The weights `exp(eta r + V'(x') - Q'(x,a))` use the target networks,
/// are normalized over the batch and stay fixed over the `steps`.
pub fn update_dynamics(
    nets: &mut VmbpoNets,
    batch: &[Transition],
    weights: &[f64],
    s: &LossSettings,
    lr: f64,
    steps: usize,
) -> Result<f64> {
    check_batch("update_dynamics", batch.len(), weights.len())?;
    check_source("update_dynamics", batch, Source::Real)?;
    // Self-normalized so the weights average to the supplied ones; the
    // optimum is unchanged and the loss keeps the scale of a log-likelihood.
    let args: Vec<f64> = batch.iter().map(|t| importance_log_weight(nets, t, s)).collect();
    let top = args.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = args.iter().zip(weights).map(|(a, w)| w * (a - top).exp()).collect();
    let scale = weights.iter().sum::<f64>() / raw.iter().sum::<f64>();
    let iw: Vec<f64> = raw.iter().map(|r| r * scale).collect();
    let net = nets.dynamics.clone();
    let mut dynamics = nets.dynamics.clone();
    let loss = descend(&mut dynamics.net, steps, lr, "dynamics loss", |n, g| {
        let d = DynamicsNet {
            net: n.clone(),
            head: net.head,
        };
        batch
            .iter()
            .zip(&iw)
            .map(|(t, w)| -w * d.accumulate_log_prob(&t.state, &t.action, &t.next_state, -w, g))
            .sum()
    })?;
    nets.dynamics = dynamics;
    Ok(loss)
}

/// Clipped `eta r + discount V'(x') - Q'(x,a)`, always in `[-clip, clip]`.
pub fn importance_log_weight(nets: &VmbpoNets, t: &Transition, s: &LossSettings) -> f64 {
    let v_next = if t.terminal { 0.0 } else { nets.v_target(&t.next_state) };
    let arg = s.eta * t.reward + s.discount * v_next - nets.q_target(&t.state, &t.action);
    clip(arg, s.clip)
}

/// `exp` of [`importance_log_weight`], always in `[e^-clip, e^clip]`.
pub fn importance_weight(nets: &VmbpoNets, t: &Transition, s: &LossSettings) -> f64 {
    importance_log_weight(nets, t, s).exp()
}

/// Dual step for `nu ≈ log(q_d / p)`: ascends
/// `Σ_syn w ν(x,a,x'') - Σ_real w exp(ν(x,a,x'))`.
#[allow(clippy::too_many_arguments)]
pub fn update_log_ratio(
    nets: &mut VmbpoNets,
    real: &[Transition],
    real_weights: &[f64],
    synthetic: &[Transition],
    synthetic_weights: &[f64],
    s: &LossSettings,
    lr: f64,
    steps: usize,
) -> Result<f64> {
    check_batch("update_log_ratio", real.len(), real_weights.len())?;
    check_batch("update_log_ratio", synthetic.len(), synthetic_weights.len())?;
    check_source("update_log_ratio", real, Source::Real)?;
    check_source("update_log_ratio", synthetic, Source::Synthetic)?;
    descend(&mut nets.log_ratio, steps, lr, "log-ratio loss", |n, g| {
        let mut loss = 0.0;
        for (t, w) in synthetic.iter().zip(synthetic_weights) {
            let tr = n.trace(&cat(&[&t.state, &t.action, &t.next_state]));
            loss -= w * tr.output()[0];
            n.backward(&tr, &[-w], g);
        }
        for (t, w) in real.iter().zip(real_weights) {
            let tr = n.trace(&cat(&[&t.state, &t.action, &t.next_state]));
            // The clipped exponential also serves as the derivative so that
            // the penalty keeps pushing back beyond the clip.
            let e = clip(tr.output()[0], s.clip).exp();
            loss += w * e;
            n.backward(&tr, &[w * e], g);
        }
        loss
    })
}

/// Regression of `Q(x,a)` onto `eta r + discount (V'(x') - ν(x,a,x'))` over
/// model-generated transitions.
pub fn update_q(
    nets: &mut VmbpoNets,
    batch: &[Transition],
    weights: &[f64],
    s: &LossSettings,
    lr: f64,
    steps: usize,
) -> Result<f64> {
    check_batch("update_q", batch.len(), weights.len())?;
    check_source("update_q", batch, Source::Synthetic)?;
    let targets: Vec<f64> = batch
        .iter()
        .map(|t| {
            let v_next = if t.terminal { 0.0 } else { nets.v_target(&t.next_state) };
            let nu = clip(nets.nu(&t.state, &t.action, &t.next_state), s.clip);
            s.eta * t.reward + s.discount * (v_next - nu)
        })
        .collect();
    squared_regression(&mut nets.action_value, batch.iter().map(|t| cat(&[&t.state, &t.action])), &targets, weights, lr, steps, "q loss")
}

fn squared_regression<I>(
    net: &mut Net,
    inputs: I,
    targets: &[f64],
    weights: &[f64],
    lr: f64,
    steps: usize,
    what: &str,
) -> Result<f64>
where
    I: Iterator<Item = Vec<f64>>,
{
    let inputs: Vec<Vec<f64>> = inputs.collect();
    descend(net, steps, lr, what, |n, g| {
        let mut loss = 0.0;
        for ((x, y), w) in inputs.iter().zip(targets).zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let tr = n.trace(x);
            let r = tr.output()[0] - y;
            loss += w * r * r;
            n.backward(&tr, &[2.0 * w * r], g);
        }
        loss
    })
}

/// Regression of `V(x)` onto `Q(x,a) - log q_c(a|x) + log π(a|x)` for actions
/// drawn from `q_c`. Pairs where `π(a|x) = 0` are skipped. For Gaussian heads
/// the log-ratio is replaced by its mean, the closed-form `KL(q_c || π)`.
pub fn update_v(nets: &mut VmbpoNets, pairs: &[StateAction], weights: &[f64], lr: f64, steps: usize) -> Result<f64> {
    check_batch("update_v", pairs.len(), weights.len())?;
    let mut targets = Vec::with_capacity(pairs.len());
    let mut w = weights.to_vec();
    for (i, p) in pairs.iter().enumerate() {
        if let PolicyHead::Gaussian(h) = nets.variational.head {
            let qc = h.params(&nets.variational.net.forward(&p.state));
            let pi = h.params(&nets.policy.net.forward(&p.state));
            targets.push(nets.q(&p.state, &p.action) - gaussian_kl(&qc, &pi));
            continue;
        }
        let log_pi = nets.policy.log_prob(&p.state, &p.action);
        if log_pi.is_finite() {
            targets.push(nets.q(&p.state, &p.action) - nets.variational.log_prob(&p.state, &p.action) + log_pi);
        } else {
            targets.push(0.0);
            w[i] = 0.0;
        }
    }
    squared_regression(&mut nets.value, pairs.iter().map(|p| p.state.clone()), &targets, &w, lr, steps, "v loss")
}

/// Regression of `V(x)` onto `E_{a~q_c}[Q(x,a) - log(q_c/π)]`: exact for
/// discrete actions, one reparameterized draw per state otherwise.
pub fn update_v_expected(
    nets: &mut VmbpoNets,
    states: &[Vec<f64>],
    weights: &[f64],
    noise: &[Vec<f64>],
    lr: f64,
    steps: usize,
) -> Result<f64> {
    check_batch("update_v_expected", states.len(), weights.len())?;
    let targets: Vec<f64> = match nets.variational.head {
        PolicyHead::Categorical(n_actions) => states
            .iter()
            .map(|x| {
                let qc = nets.variational.probs(x);
                let pi = nets.policy.probs(x);
                (0..n_actions)
                    .filter(|&a| qc[a] > 0.0)
                    .map(|a| qc[a] * (nets.q(x, &[a as f64]) - (qc[a] / pi[a]).ln()))
                    .sum()
            })
            .collect(),
        PolicyHead::Gaussian(_) => {
            if noise.len() != states.len() {
                return Err(Error::Shape("update_v_expected: one noise vector per state".into()));
            }
            states
                .iter()
                .zip(noise)
                .map(|(x, e)| {
                    let a = nets.variational.sample_with_noise(x, e);
                    nets.q(x, &a) - nets.variational.log_prob(x, &a) + nets.policy.log_prob(x, &a)
                })
                .collect()
        }
    };
    squared_regression(&mut nets.value, states.iter().cloned(), &targets, weights, lr, steps, "v loss")
}

/// Reverse-KL actor step toward `π exp(Q) / Z`: exact per-state gradient for
/// discrete actions, pathwise gradient through `a = tanh(μ + σ ε)` otherwise.
pub fn update_actor(
    nets: &mut VmbpoNets,
    states: &[Vec<f64>],
    weights: &[f64],
    noise: &[Vec<f64>],
    mean_penalty: f64,
    lr: f64,
    steps: usize,
) -> Result<f64> {
    check_batch("update_actor", states.len(), weights.len())?;
    let policy = nets.policy.clone();
    let action_value = nets.action_value.clone();
    let head = nets.variational.head;
    match head {
        PolicyHead::Categorical(n_actions) => {
            let rows: Vec<(Vec<f64>, Vec<f64>)> = states
                .iter()
                .map(|x| {
                    let log_pi: Vec<f64> = {
                        let out = policy.net.forward(x);
                        let z = logsumexp(&out);
                        out.iter().map(|o| o - z).collect()
                    };
                    let q = (0..n_actions)
                        .map(|a| action_value.scalar(&cat(&[x, &[a as f64]])))
                        .collect();
                    (log_pi, q)
                })
                .collect();
            descend(&mut nets.variational.net, steps, lr, "actor loss", |n, g| {
                let mut loss = 0.0;
                for ((x, w), (log_pi, q)) in states.iter().zip(weights).zip(&rows) {
                    let tr = n.trace(x);
                    let z = logsumexp(tr.output());
                    let log_qc: Vec<f64> = tr.output().iter().map(|o| o - z).collect();
                    let f: Vec<f64> = (0..n_actions).map(|a| log_qc[a] - log_pi[a] - q[a]).collect();
                    let l: f64 = (0..n_actions).map(|a| log_qc[a].exp() * f[a]).sum();
                    loss += w * l;
                    let cot: Vec<f64> = (0..n_actions).map(|a| w * log_qc[a].exp() * (f[a] - l)).collect();
                    n.backward(&tr, &cot, g);
                }
                loss
            })
        }
        PolicyHead::Gaussian(h) => {
            if noise.len() != states.len() {
                return Err(Error::Shape("update_actor: one noise vector per state".into()));
            }
            let pi_params: Vec<_> = states.iter().map(|x| h.params(&policy.net.forward(x))).collect();
            descend(&mut nets.variational.net, steps, lr, "actor loss", |n, g| {
                let mut loss = 0.0;
                let mut qgrad = vec![0.0; action_value.params.len()];
                for (((x, w), eps), pp) in states.iter().zip(weights).zip(noise).zip(&pi_params) {
                    let tr = n.trace(x);
                    let gp = h.params(tr.output());
                    let s = h.sample(tr.output(), eps);
                    // Both densities share the tanh correction at the same u, so
                    // log q_c - log π reduces to the difference of base densities.
                    let base_c = h.base_log_prob(&gp, &s.u);
                    let base_pi = h.base_log_prob(pp, &s.u);
                    let qtr = action_value.trace(&cat(&[x, &s.action]));
                    let qv = qtr.output()[0];
                    loss += w * (base_c - base_pi - qv);
                    loss += w * 0.5 * mean_penalty * gp.mean.iter().map(|m| m * m).sum::<f64>();
                    let dq = action_value.backward(&qtr, &[1.0], &mut qgrad);
                    let mut cot = vec![0.0; 2 * h.dim];
                    for i in 0..h.dim {
                        let t = s.action[i];
                        let sd_pi = pp.log_std[i].exp();
                        let g_u = (s.u[i] - pp.mean[i]) / (sd_pi * sd_pi) - dq[x.len() + i] * (1.0 - t * t);
                        cot[i] = w * (g_u + mean_penalty * gp.mean[i]);
                        if !gp.clamped[i] {
                            cot[h.dim + i] = w * (-1.0 + g_u * gp.log_std[i].exp() * eps[i]);
                        }
                    }
                    n.backward(&tr, &cot, g);
                }
                loss
            })
        }
    }
}

/// Exponential-TD critic step: drives `exp((Q(x,a) - eta r - V'(x')) / temperature)`
/// toward 1 on real transitions.
pub fn update_q_exp_td(
    nets: &mut VmbpoNets,
    batch: &[Transition],
    weights: &[f64],
    s: &LossSettings,
    lr: f64,
    steps: usize,
) -> Result<f64> {
    check_batch("update_q_exp_td", batch.len(), weights.len())?;
    check_source("update_q_exp_td", batch, Source::Real)?;
    let anchors: Vec<f64> = batch
        .iter()
        .map(|t| {
            let v_next = if t.terminal { 0.0 } else { nets.v_target(&t.next_state) };
            s.eta * t.reward + s.discount * v_next
        })
        .collect();
    let tau = s.exp_td_temperature;
    descend(&mut nets.action_value, steps, lr, "q loss", |n, g| {
        let mut loss = 0.0;
        for ((t, w), y) in batch.iter().zip(weights).zip(&anchors) {
            let tr = n.trace(&cat(&[&t.state, &t.action]));
            let e = clip((tr.output()[0] - y) / tau, s.clip).exp();
            loss += w * (e - 1.0) * (e - 1.0);
            n.backward(&tr, &[w * 2.0 * (e - 1.0) * e / tau], g);
        }
        loss
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MStepMode {
    /// `θ_π ← θ_c`.
    #[default]
    Copy,
    /// Weighted maximum likelihood of model-generated actions with a KL
    /// penalty toward the previous baseline.
    Map,
}

/// M-step. In `Map` mode ascends `Σ w log π(a|x) - λ Σ w KL(π_old(.|x) || π(.|x))`
/// over model-generated state-action pairs; Gaussian KLs are taken before the squash.
pub fn m_step_update(
    nets: &mut VmbpoNets,
    mode: MStepMode,
    pairs: &[StateAction],
    weights: &[f64],
    lambda: f64,
    lr: f64,
    steps: usize,
) -> Result<f64> {
    match mode {
        MStepMode::Copy => {
            nets.policy.net.params = nets.variational.net.params.clone();
            Ok(0.0)
        }
        MStepMode::Map => {
            let previous = nets.policy.clone();
            m_step_map(nets, &previous, pairs, weights, lambda, lr, steps)
        }
    }
}

/// MAP M-step against an explicit previous baseline `previous`.
pub fn m_step_map(
    nets: &mut VmbpoNets,
    previous: &PolicyNet,
    pairs: &[StateAction],
    weights: &[f64],
    lambda: f64,
    lr: f64,
    steps: usize,
) -> Result<f64> {
    check_batch("m_step_update", pairs.len(), weights.len())?;
    if !(lambda >= 0.0) || lambda.is_infinite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let head = nets.policy.head;
    let old_out: Vec<Vec<f64>> = pairs.iter().map(|p| previous.net.forward(&p.state)).collect();
    descend(&mut nets.policy.net, steps, lr, "m-step loss", |n, g| {
        let mut loss = 0.0;
        for ((p, w), oo) in pairs.iter().zip(weights).zip(&old_out) {
            let tr = n.trace(&p.state);
            let out = tr.output();
            let cot = match head {
                PolicyHead::Categorical(_) => {
                    let k = p.action[0] as usize;
                    let pi = softmax(out);
                    let pi_old = softmax(oo);
                    let kl: f64 = pi_old
                        .iter()
                        .zip(&pi)
                        .filter(|(o, _)| **o > 0.0)
                        .map(|(o, q)| o * (o / q).ln())
                        .sum();
                    loss += w * (-categorical_log_prob(out, k) + lambda * kl);
                    let mut c: Vec<f64> = categorical_log_prob_grad(out, k).iter().map(|d| -w * d).collect();
                    for j in 0..c.len() {
                        c[j] += w * lambda * (pi[j] - pi_old[j]);
                    }
                    c
                }
                PolicyHead::Gaussian(h) => {
                    let u = h.unsquash(&p.action);
                    let gp = h.params(out);
                    let go = h.params(oo);
                    let mut c: Vec<f64> = h.base_log_prob_grad(out, &u).iter().map(|d| -w * d).collect();
                    let mut kl = 0.0;
                    for i in 0..h.dim {
                        let var = (2.0 * gp.log_std[i]).exp();
                        let num = (2.0 * go.log_std[i]).exp() + (go.mean[i] - gp.mean[i]).powi(2);
                        kl += gp.log_std[i] - go.log_std[i] + num / (2.0 * var) - 0.5;
                        c[i] += w * lambda * (gp.mean[i] - go.mean[i]) / var;
                        if !gp.clamped[i] {
                            c[h.dim + i] += w * lambda * (1.0 - num / var);
                        }
                    }
                    loss += w * (-h.log_prob(out, &p.action) + lambda * kl);
                    c
                }
            };
            n.backward(&tr, &cot, g);
        }
        loss
    })
}

/// `θ' ← τ θ + (1 - τ) θ'` for the value and action-value targets.
pub fn soft_target_update(nets: &mut VmbpoNets, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1], got {tau}")));
    }
    for (target, online) in [
        (&mut nets.target_value, &nets.value),
        (&mut nets.target_action_value, &nets.action_value),
    ] {
        for (t, o) in target.params.as_mut_slice().iter_mut().zip(online.params.as_slice()) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
    Ok(())
}

/// Current episode of a collecting environment.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    state: Option<Vec<f64>>,
}

/// Appends `n` real transitions gathered with the baseline policy, resetting
/// the environment whenever an episode terminates or is truncated.
pub fn collect_steps(
    env: &mut dyn Environment,
    kind: &NetKind,
    policy: &PolicyNet,
    buffer: &mut ReplayBuffer,
    n: usize,
    rollout: &mut Rollout,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for _ in 0..n {
        let x = match rollout.state.take() {
            Some(x) => x,
            None => env.reset(rng),
        };
        let a = policy.sample(&x, rng);
        let out = env.step(&kind.env_action(&a), rng);
        if !out.reward.is_finite() || out.next_state.iter().any(|v| !v.is_finite()) {
            return Err(non_finite("environment step"));
        }
        if !(out.terminal || out.truncated) {
            rollout.state = Some(out.next_state.clone());
        }
        buffer.push(Transition {
            state: x,
            action: a,
            reward: out.reward,
            next_state: out.next_state,
            terminal: out.terminal,
            source: Source::Real,
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Vmbpo,
    VmbpoMfe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub total_steps: usize,
    /// Real environment steps collected before each E-step.
    pub steps_per_iteration: usize,
    /// E-step update rounds per iteration (K).
    pub inner_iterations: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub eta: f64,
    pub discount: f64,
    pub tau: f64,
    pub buffer_capacity: usize,
    /// Capacity of the model-generated buffer; older imagined transitions are evicted first.
    pub synthetic_capacity: usize,
    pub batch_size: usize,
    pub model_batch_size: usize,
    pub lr_model: f64,
    /// Log-ratio learning rate; `lr_model` when absent.
    pub lr_log_ratio: Option<f64>,
    pub lr_critic: f64,
    pub lr_actor: f64,
    /// Coefficient of `0.5 * mean^2` on the pre-squash actor mean (Gaussian heads).
    pub actor_mean_penalty: f64,
    /// Log-std floor of Gaussian policy heads.
    pub policy_min_log_std: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub synthetic_per_step: usize,
    pub m_step: MStepMode,
    pub m_step_lambda: f64,
    pub m_step_steps: usize,
    pub lr_policy: f64,
    /// Output multiplier of the value and action-value MLPs.
    pub value_scale: f64,
    pub exp_clip: f64,
    pub exp_td_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Vmbpo,
            total_steps: 50_000,
            steps_per_iteration: 50,
            inner_iterations: 20,
            eval_interval: 1000,
            eval_episodes: 5,
            eta: 1.0,
            discount: 0.99,
            tau: 0.005,
            buffer_capacity: 1_000_000,
            synthetic_capacity: 100_000,
            batch_size: 64,
            model_batch_size: 256,
            lr_model: 3e-4,
            lr_log_ratio: None,
            lr_critic: 5e-4,
            lr_actor: 2e-4,
            actor_mean_penalty: 0.0,
            policy_min_log_std: LOG_STD_MIN,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            synthetic_per_step: 256,
            m_step: MStepMode::Copy,
            m_step_lambda: 1.0,
            m_step_steps: 1,
            lr_policy: 2e-4,
            value_scale: 1.0,
            exp_clip: 20.0,
            exp_td_temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, field: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, "must be a positive real"))
            }
        };
        let at_least_one = |v: usize, field: &str| {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::config(field, "must be at least 1"))
            }
        };
        at_least_one(self.steps_per_iteration, "train.steps_per_iteration")?;
        at_least_one(self.inner_iterations, "train.inner_iterations")?;
        at_least_one(self.eval_interval, "train.eval_interval")?;
        at_least_one(self.eval_episodes, "train.eval_episodes")?;
        at_least_one(self.buffer_capacity, "train.buffer_capacity")?;
        at_least_one(self.synthetic_capacity, "train.synthetic_capacity")?;
        at_least_one(self.batch_size, "train.batch_size")?;
        at_least_one(self.model_batch_size, "train.model_batch_size")?;
        at_least_one(self.m_step_steps, "train.m_step_steps")?;
        pos(self.eta, "train.eta")?;
        pos(self.lr_model, "train.lr_model")?;
        if let Some(lr) = self.lr_log_ratio {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config("train.lr_log_ratio", "must be a finite real >= 0"));
            }
        }
        pos(self.lr_critic, "train.lr_critic")?;
        pos(self.lr_actor, "train.lr_actor")?;
        if !(self.actor_mean_penalty >= 0.0 && self.actor_mean_penalty.is_finite()) {
            return Err(Error::config("train.actor_mean_penalty", "must be a finite real >= 0"));
        }
        pos(self.lr_policy, "train.lr_policy")?;
        if !(self.policy_min_log_std >= LOG_STD_MIN && self.policy_min_log_std < LOG_STD_MAX) {
            return Err(Error::config(
                "train.policy_min_log_std",
                format!("must lie in [{LOG_STD_MIN}, {LOG_STD_MAX})"),
            ));
        }
        pos(self.value_scale, "train.value_scale")?;
        pos(self.exp_clip, "train.exp_clip")?;
        pos(self.exp_td_temperature, "train.exp_td_temperature")?;
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::config("train.discount", "must lie in (0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("train.tau", "must lie in (0, 1]"));
        }
        if !(self.m_step_lambda >= 0.0 && self.m_step_lambda.is_finite()) {
            return Err(Error::config("train.m_step_lambda", "must be a finite real >= 0"));
        }
        if !SYNTHETIC_PER_STEP_CHOICES.contains(&self.synthetic_per_step) {
            return Err(Error::config("train.synthetic_per_step", "must be one of 128, 256, 512"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("train.hidden", "needs at least one layer, all of width >= 1"));
        }
        if self.algorithm == Algorithm::VmbpoMfe && self.m_step != MStepMode::Copy {
            return Err(Error::config("train.m_step", "vmbpo_mfe supports only the copy M-step"));
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            eta: self.eta,
            discount: self.discount,
            clip: self.exp_clip,
            exp_td_temperature: self.exp_td_temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Completed E-step update rounds.
    pub wall_step: u64,
    pub env_steps: u64,
    pub mean_return: f64,
    pub return_sd: f64,
    /// Mean of `V(x0)` over the evaluation episodes' start states.
    pub elbo_estimate: f64,
    pub loss_dynamics: f64,
    pub loss_nu: f64,
    pub loss_q: f64,
    pub loss_v: f64,
    pub loss_actor: f64,
}

impl MetricsRow {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.wall_step.to_string(),
            self.env_steps.to_string(),
            fmt_real(self.mean_return),
            fmt_real(self.return_sd),
            fmt_real(self.elbo_estimate),
            fmt_real(self.loss_dynamics),
            fmt_real(self.loss_nu),
            fmt_real(self.loss_q),
            fmt_real(self.loss_v),
            fmt_real(self.loss_actor),
        ]
    }
}

/// Rows with `env_steps > 0` as a CSV table.
pub fn metrics_table(rows: &[MetricsRow]) -> CsvTable {
    let mut t = CsvTable::new(&METRICS_HEADER);
    for r in rows.iter().filter(|r| r.env_steps > 0) {
        t.push(r.to_record());
    }
    t
}

/// Mean of the last (up to) three evaluation returns.
pub fn final_return(rows: &[MetricsRow]) -> f64 {
    let tail = &rows[rows.len().saturating_sub(3)..];
    tail.iter().map(|r| r.mean_return).sum::<f64>() / tail.len() as f64
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The initial evaluation followed by one row per evaluation interval.
    pub metrics: Vec<MetricsRow>,
    pub nets: VmbpoNets,
}

#[derive(Default)]
struct LossMeans {
    sums: [f64; 5],
    counts: [u32; 5],
}

impl LossMeans {
    fn add(&mut self, i: usize, v: f64) {
        self.sums[i] += v;
        self.counts[i] += 1;
    }

    fn take(&mut self) -> [f64; 5] {
        let out = std::array::from_fn(|i| {
            if self.counts[i] == 0 {
                f64::NAN
            } else {
                self.sums[i] / f64::from(self.counts[i])
            }
        });
        *self = Self::default();
        out
    }
}

/// Greedy rollouts of the baseline policy on a fresh copy of `env`.
pub fn evaluate(env: &dyn Environment, nets: &VmbpoNets, episodes: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = env.boxed_clone();
    let mut returns = Vec::with_capacity(episodes);
    let mut v0 = 0.0;
    for _ in 0..episodes {
        let mut x = env.reset(&mut rng);
        v0 += nets.v(&x);
        let mut total = 0.0;
        loop {
            let a = nets.policy.greedy(&x);
            let out = env.step(&nets.kind.env_action(&a), &mut rng);
            total += out.reward;
            if out.terminal || out.truncated {
                break;
            }
            x = out.next_state;
        }
        returns.push(total);
    }
    let (mean, sd) = mean_sd(&returns);
    (mean, if episodes > 1 { sd } else { 0.0 }, v0 / episodes as f64)
}

/// Mean and standard deviation of episode returns under uniformly random
/// actions.
pub fn random_policy_returns(env: &dyn Environment, episodes: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = env.boxed_clone();
    let space = env.action_space();
    let returns: Vec<f64> = (0..episodes)
        .map(|_| {
            env.reset(&mut rng);
            let mut total = 0.0;
            loop {
                let a = match space {
                    Space::Discrete(n) => vec![rng.random_range(0..n) as f64],
                    Space::Continuous { dim, bound } => (0..dim).map(|_| rng.random_range(-bound..=bound)).collect(),
                };
                let out = env.step(&a, &mut rng);
                total += out.reward;
                if out.terminal || out.truncated {
                    return total;
                }
            }
        })
        .collect();
    mean_sd(&returns)
}

fn eval_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index.wrapping_add(1)).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn standard_noise<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step: step as usize },
        other => other,
    }
}

pub fn train_vmbpo(env: &dyn Environment, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.algorithm = Algorithm::Vmbpo;
    train(env, &cfg, seed)
}

pub fn train_vmbpo_mfe(env: &dyn Environment, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.algorithm = Algorithm::VmbpoMfe;
    train(env, &cfg, seed)
}

/// Runs the algorithm named in `cfg`.
pub fn train(env: &dyn Environment, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let kind = NetKind::from_env(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nets = VmbpoNets::with_value_scale(kind, &cfg.hidden, cfg.activation, cfg.value_scale, &mut rng)?;
    nets.set_policy_min_log_std(cfg.policy_min_log_std);
    let mut real = ReplayBuffer::new(cfg.buffer_capacity, Source::Real)?;
    let mut synthetic = ReplayBuffer::new(cfg.synthetic_capacity, Source::Synthetic)?;
    let mut collector = env.boxed_clone();
    let mut rollout = Rollout::default();
    let mut losses = LossMeans::default();
    let s = cfg.loss_settings();
    let total = cfg.total_steps as u64;
    let mut env_steps = 0u64;
    let mut rounds = 0u64;
    let mut n_evals = 0u64;
    let eval_row = |nets: &VmbpoNets, env_steps, rounds, n_evals, losses: [f64; 5]| {
        let (mean_return, return_sd, elbo_estimate) = evaluate(env, nets, cfg.eval_episodes, eval_seed(seed, n_evals));
        MetricsRow {
            wall_step: rounds,
            env_steps,
            mean_return,
            return_sd,
            elbo_estimate,
            loss_dynamics: losses[0],
            loss_nu: losses[1],
            loss_q: losses[2],
            loss_v: losses[3],
            loss_actor: losses[4],
        }
    };
    let mut metrics = vec![eval_row(&nets, 0, 0, n_evals, [f64::NAN; 5])];
    n_evals += 1;
    let mut next_eval = cfg.eval_interval as u64;
    while env_steps < total {
        let n = (cfg.steps_per_iteration as u64).min(total - env_steps);
        collect_steps(collector.as_mut(), &kind, &nets.policy, &mut real, n as usize, &mut rollout, &mut rng)
            .map_err(|e| with_step(e, env_steps))?;
        env_steps += n;
        for _ in 0..cfg.inner_iterations {
            let r = match cfg.algorithm {
                Algorithm::Vmbpo => vmbpo_round(env, &mut nets, &real, &mut synthetic, cfg, &s, &mut rng),
                Algorithm::VmbpoMfe => mfe_round(&mut nets, &real, cfg, &s, &mut rng),
            };
            for (i, v) in r.map_err(|e| with_step(e, env_steps))?.into_iter().enumerate() {
                if let Some(v) = v {
                    losses.add(i, v);
                }
            }
            soft_target_update(&mut nets, cfg.tau)?;
            rounds += 1;
        }
        m_step(env, &mut nets, &real, cfg, &mut rng).map_err(|e| with_step(e, env_steps))?;
        while env_steps >= next_eval {
            metrics.push(eval_row(&nets, env_steps, rounds, n_evals, losses.take()));
            n_evals += 1;
            next_eval += cfg.eval_interval as u64;
        }
    }
    Ok(TrainOutcome { metrics, nets })
}

fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Steps 1-4 of one E-step round.
fn vmbpo_round(
    env: &dyn Environment,
    nets: &mut VmbpoNets,
    real: &ReplayBuffer,
    synthetic: &mut ReplayBuffer,
    cfg: &TrainConfig,
    s: &LossSettings,
    rng: &mut ChaCha8Rng,
) -> Result<[Option<f64>; 5]> {
    let model_batch = real.sample(cfg.model_batch_size, rng);
    let w_model = uniform_weights(model_batch.len());
    let l_dyn = update_dynamics(nets, &model_batch, &w_model, s, cfg.lr_model, 1)?;

    let ratio_batch = real.sample(cfg.model_batch_size, rng);
    let imagined: Vec<Transition> = ratio_batch
        .iter()
        .map(|t| {
            let y = nets.dynamics.sample(&t.state, &t.action, rng);
            Transition {
                terminal: env.is_terminal(&y),
                next_state: y,
                source: Source::Synthetic,
                ..t.clone()
            }
        })
        .collect();
    let w_ratio = uniform_weights(ratio_batch.len());
    let lr_nu = cfg.lr_log_ratio.unwrap_or(cfg.lr_model);
    let l_nu = update_log_ratio(nets, &ratio_batch, &w_ratio, &imagined, &w_ratio, s, lr_nu, 1)?;

    for t in real.sample(cfg.synthetic_per_step, rng) {
        let a = nets.variational.sample(&t.state, rng);
        let y = nets.dynamics.sample(&t.state, &a, rng);
        let reward = env.reward(&t.state, &nets.kind.env_action(&a));
        synthetic.push(Transition {
            terminal: env.is_terminal(&y),
            state: t.state,
            action: a,
            reward,
            next_state: y,
            source: Source::Synthetic,
        })?;
    }
    let q_batch = synthetic.sample(cfg.batch_size, rng);
    let w_ac = uniform_weights(q_batch.len());
    let l_q = update_q(nets, &q_batch, &w_ac, s, cfg.lr_critic, 1)?;

    let v_pairs: Vec<StateAction> = synthetic
        .sample(cfg.batch_size, rng)
        .into_iter()
        .map(|t| StateAction {
            action: nets.variational.sample(&t.state, rng),
            state: t.state,
        })
        .collect();
    let l_v = update_v(nets, &v_pairs, &w_ac, cfg.lr_critic, 1)?;

    let states: Vec<Vec<f64>> = synthetic.sample(cfg.batch_size, rng).into_iter().map(|t| t.state).collect();
    let noise = actor_noise(nets, states.len(), rng);
    let l_actor = update_actor(nets, &states, &w_ac, &noise, cfg.actor_mean_penalty, cfg.lr_actor, 1)?;
    Ok([Some(l_dyn), Some(l_nu), Some(l_q), Some(l_v), Some(l_actor)])
}

fn actor_noise(nets: &VmbpoNets, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    match nets.variational.head {
        PolicyHead::Categorical(_) => Vec::new(),
        PolicyHead::Gaussian(h) => standard_noise(n, h.dim, rng),
    }
}

/// Critic and actor steps of one model-free E-step round.
fn mfe_round(
    nets: &mut VmbpoNets,
    real: &ReplayBuffer,
    cfg: &TrainConfig,
    s: &LossSettings,
    rng: &mut ChaCha8Rng,
) -> Result<[Option<f64>; 5]> {
    let batch = real.sample(cfg.batch_size, rng);
    let w = uniform_weights(batch.len());
    let l_q = update_q_exp_td(nets, &batch, &w, s, cfg.lr_critic, 1)?;
    let states: Vec<Vec<f64>> = real.sample(cfg.batch_size, rng).into_iter().map(|t| t.state).collect();
    let noise = actor_noise(nets, states.len(), rng);
    let l_v = update_v_expected(nets, &states, &w, &noise, cfg.lr_critic, 1)?;
    let states: Vec<Vec<f64>> = real.sample(cfg.batch_size, rng).into_iter().map(|t| t.state).collect();
    let noise = actor_noise(nets, states.len(), rng);
    let l_actor = update_actor(nets, &states, &w, &noise, cfg.actor_mean_penalty, cfg.lr_actor, 1)?;
    Ok([None, None, Some(l_q), Some(l_v), Some(l_actor)])
}

fn m_step(
    env: &dyn Environment,
    nets: &mut VmbpoNets,
    real: &ReplayBuffer,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    match cfg.m_step {
        MStepMode::Copy => {
            m_step_update(nets, MStepMode::Copy, &[], &[], 0.0, 0.0, 0)?;
        }
        MStepMode::Map => {
            // States come from the model: one step of q_d from replayed states.
            let pairs: Vec<StateAction> = real
                .sample(cfg.batch_size, rng)
                .into_iter()
                .map(|t| {
                    let a0 = nets.variational.sample(&t.state, rng);
                    let mut x = nets.dynamics.sample(&t.state, &a0, rng);
                    if env.is_terminal(&x) {
                        x = t.state;
                    }
                    StateAction {
                        action: nets.variational.sample(&x, rng),
                        state: x,
                    }
                })
                .collect();
            let w = uniform_weights(pairs.len());
            m_step_update(nets, MStepMode::Map, &pairs, &w, cfg.m_step_lambda, cfg.lr_policy, cfg.m_step_steps)?;
        }
    }
    Ok(())
}

/// Every `(x, a, y)` of `mdp` with `x` nonterminal and `kernel(x, a, y) > 0`,
/// weighted by `state_weight(x) * action_weight(x, a) * kernel(x, a, y)`.
pub fn exhaustive_batch(
    mdp: &FiniteMdp,
    source: Source,
    state_weight: impl Fn(usize) -> f64,
    action_weight: impl Fn(usize, usize) -> f64,
    kernel: impl Fn(usize, usize, usize) -> f64,
) -> (Vec<Transition>, Vec<f64>) {
    let mut batch = Vec::new();
    let mut weights = Vec::new();
    for x in mdp.nonterminal_states() {
        for a in 0..mdp.n_actions() {
            for y in 0..mdp.n_states() {
                let w = state_weight(x) * action_weight(x, a) * kernel(x, a, y);
                if w > 0.0 {
                    batch.push(Transition {
                        state: vec![x as f64],
                        action: vec![a as f64],
                        reward: mdp.reward(x, a),
                        next_state: vec![y as f64],
                        terminal: mdp.is_terminal(y),
                        source,
                    });
                    weights.push(w);
                }
            }
        }
    }
    (batch, weights)
}

/// Overwrites one cell of a tabular network.
pub fn set_table_cell(net: &mut Net, index: &[usize], values: &[f64]) -> Result<()> {
    let Approximator::Table(spec) = &net.approx else {
        return Err(Error::InvalidArgument("not a tabular network".into()));
    };
    if index.len() != spec.dims.len() || values.len() != spec.output_dim {
        return Err(Error::Shape("cell index or value width mismatch".into()));
    }
    let mut cell = 0;
    for (&i, &d) in index.iter().zip(&spec.dims) {
        if i >= d {
            return Err(Error::Shape(format!("table index {i} outside 0..{d}")));
        }
        cell = cell * d + i;
    }
    let out = spec.output_dim;
    net.params.as_mut_slice()[cell * out..(cell + 1) * out].copy_from_slice(values);
    Ok(())
}
