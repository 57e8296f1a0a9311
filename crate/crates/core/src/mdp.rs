//! Finite stopping-time MDPs, trajectories and the enumeration oracles that
//! ground-truth the solvers.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tables::TabularPolicy;
use crate::util::sample_index;

const STOCHASTIC_TOLERANCE: f64 = 1e-12;

/// Default node budget for trajectory enumeration.
pub const ENUMERATION_BUDGET: usize = 10_000_000;

/// Step cap for sampled trajectories; hitting it means the chain is not transient.
pub const SAMPLE_STEP_CAP: usize = 1_000_000;

/// A violated [`FiniteMdp`] invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    RowNotStochastic { state: usize, action: usize, sum: f64 },
    NegativeProbability { state: usize, action: usize, next: usize },
    InitialNotStochastic { sum: f64 },
    NonFiniteReward { state: usize, action: usize },
    NoTerminal,
    NotTransient { state: usize },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::RowNotStochastic { state, action, sum } => {
                write!(f, "row not stochastic: p(.|{state},{action}) sums to {sum}")
            }
            Diagnostic::NegativeProbability { state, action, next } => {
                write!(f, "negative probability p({next}|{state},{action})")
            }
            Diagnostic::InitialNotStochastic { sum } => {
                write!(f, "initial distribution not stochastic: sums to {sum}")
            }
            Diagnostic::NonFiniteReward { state, action } => {
                write!(f, "non-finite reward r({state},{action})")
            }
            Diagnostic::NoTerminal => f.write_str("not transient: no terminal state"),
            Diagnostic::NotTransient { state } => {
                write!(f, "not transient: no terminal reachable from state {state}")
            }
        }
    }
}

/// A finite MDP whose episodes stop on entering a terminal state.
///
/// Tables are dense and row-major: `reward[x * |A| + a]` and
/// `transition[(x * |A| + a) * |X| + y]`. Rows of terminal states are stored
/// but never read by any algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    state_names: Vec<String>,
    action_names: Vec<String>,
    terminal: Vec<bool>,
    reward: Vec<f64>,
    transition: Vec<f64>,
    initial: Vec<f64>,
}

impl FiniteMdp {
    /// Shape-checked constructor. Probabilistic invariants are reported by
    /// [`FiniteMdp::validate`] instead, so malformed models can still be inspected.
    pub fn new(
        state_names: Vec<String>,
        action_names: Vec<String>,
        terminals: &[usize],
        reward: Vec<Vec<f64>>,
        transition: Vec<Vec<Vec<f64>>>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let n = state_names.len();
        let m = action_names.len();
        if n == 0 || m == 0 {
            return Err(Error::Shape("MDP needs at least one state and one action".into()));
        }
        if reward.len() != n || reward.iter().any(|r| r.len() != m) {
            return Err(Error::Shape(format!("reward must be {n}x{m}")));
        }
        if transition.len() != n
            || transition
                .iter()
                .any(|r| r.len() != m || r.iter().any(|row| row.len() != n))
        {
            return Err(Error::Shape(format!("transition must be {n}x{m}x{n}")));
        }
        if initial.len() != n {
            return Err(Error::Shape(format!("initial must have {n} entries")));
        }
        let mut terminal = vec![false; n];
        for &t in terminals {
            if t >= n {
                return Err(Error::Shape(format!("terminal index {t} out of range")));
            }
            terminal[t] = true;
        }
        Ok(Self {
            state_names,
            action_names,
            terminal,
            reward: reward.into_iter().flatten().collect(),
            transition: transition.into_iter().flatten().flatten().collect(),
            initial,
        })
    }

    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn n_actions(&self) -> usize {
        self.action_names.len()
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn action_names(&self) -> &[String] {
        &self.action_names
    }

    pub fn is_terminal(&self, x: usize) -> bool {
        self.terminal[x]
    }

    pub fn terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states()).filter(|&x| self.terminal[x])
    }

    pub fn nonterminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states()).filter(|&x| !self.terminal[x])
    }

    pub fn reward(&self, x: usize, a: usize) -> f64 {
        self.reward[x * self.n_actions() + a]
    }

    pub fn transition(&self, x: usize, a: usize, y: usize) -> f64 {
        self.transition[(x * self.n_actions() + a) * self.n_states() + y]
    }

    pub fn next_row(&self, x: usize, a: usize) -> &[f64] {
        let n = self.n_states();
        let start = (x * self.n_actions() + a) * n;
        &self.transition[start..start + n]
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub(crate) fn transition_table(&self) -> &[f64] {
        &self.transition
    }

    #[cfg(test)]
    pub(crate) fn set_reward(&mut self, x: usize, a: usize, r: f64) {
        let m = self.n_actions();
        self.reward[x * m + a] = r;
    }

    pub(crate) fn next_row_mut(&mut self, x: usize, a: usize) -> &mut [f64] {
        let n = self.n_states();
        let start = (x * self.n_actions() + a) * n;
        &mut self.transition[start..start + n]
    }

    /// Lists every violated invariant; empty means the model is valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = self.stochastic_diagnostics();
        if !self.terminal.iter().any(|&t| t) {
            out.push(Diagnostic::NoTerminal);
            return out;
        }
        let reach = self.reaches_terminal(|_, _| true);
        for x in self.nonterminal_states() {
            if !reach[x] {
                out.push(Diagnostic::NotTransient { state: x });
            }
        }
        out
    }

    /// Returns `Err(InvalidMdp)` unless [`validate`](Self::validate) is clean.
    pub fn ensure_valid(&self) -> Result<()> {
        let d = self.validate();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidMdp(d))
        }
    }

    fn stochastic_diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        for x in self.nonterminal_states() {
            for a in 0..self.n_actions() {
                if !self.reward(x, a).is_finite() {
                    out.push(Diagnostic::NonFiniteReward { state: x, action: a });
                }
                let row = self.next_row(x, a);
                for (y, &p) in row.iter().enumerate() {
                    if !(p >= 0.0) {
                        out.push(Diagnostic::NegativeProbability {
                            state: x,
                            action: a,
                            next: y,
                        });
                    }
                }
                let sum: f64 = row.iter().sum();
                if !((sum - 1.0).abs() <= STOCHASTIC_TOLERANCE) {
                    out.push(Diagnostic::RowNotStochastic {
                        state: x,
                        action: a,
                        sum,
                    });
                }
            }
        }
        let s: f64 = self.initial.iter().sum();
        if self.initial.iter().any(|&p| !(p >= 0.0))
            || !((s - 1.0).abs() <= STOCHASTIC_TOLERANCE)
        {
            out.push(Diagnostic::InitialNotStochastic { sum: s });
        }
        out
    }

    /// Backward reachability of the terminal set over the support graph,
    /// restricted to the actions admitted by `allowed`.
    pub(crate) fn reaches_terminal(&self, allowed: impl Fn(usize, usize) -> bool) -> Vec<bool> {
        let n = self.n_states();
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for x in self.nonterminal_states() {
            for a in 0..self.n_actions() {
                if !allowed(x, a) {
                    continue;
                }
                for (y, &p) in self.next_row(x, a).iter().enumerate() {
                    if p > 0.0 {
                        preds[y].push(x);
                    }
                }
            }
        }
        let mut seen = self.terminal.clone();
        let mut queue: VecDeque<usize> = self.terminal_states().collect();
        while let Some(y) = queue.pop_front() {
            for &x in &preds[y] {
                if !seen[x] {
                    seen[x] = true;
                    queue.push_back(x);
                }
            }
        }
        seen
    }

    /// True when the support graph restricted to nonterminal states has no cycle,
    /// so every trajectory has at most `n_states - 1` steps.
    pub fn is_acyclic(&self) -> bool {
        let n = self.n_states();
        // Kahn's algorithm over nonterminal states.
        let mut indeg = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for x in self.nonterminal_states() {
            for y in self.nonterminal_states() {
                if (0..self.n_actions()).any(|a| self.transition(x, a, y) > 0.0) {
                    succ[x].push(y);
                    indeg[y] += 1;
                }
            }
        }
        let mut queue: VecDeque<usize> = self.nonterminal_states().filter(|&x| indeg[x] == 0).collect();
        let mut removed = 0;
        while let Some(x) = queue.pop_front() {
            removed += 1;
            for &y in &succ[x] {
                indeg[y] -= 1;
                if indeg[y] == 0 {
                    queue.push_back(y);
                }
            }
        }
        removed == self.nonterminal_states().count()
    }

    /// Checks that every nonterminal state reaches a terminal under the support of `policy`.
    pub(crate) fn ensure_transient_under(&self, policy: &TabularPolicy) -> Result<()> {
        let reach = self.reaches_terminal(|x, a| policy.prob(x, a) > 0.0);
        match self.nonterminal_states().find(|&x| !reach[x]) {
            Some(x) => Err(Error::NonTransient(format!(
                "state {} cannot reach a terminal under the policy",
                self.state_names[x]
            ))),
            None => Ok(()),
        }
    }

    pub(crate) fn check_policy_shape(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states() != self.n_states() || policy.n_actions() != self.n_actions() {
            return Err(Error::Shape(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states(),
                self.n_actions()
            )));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        doc.into_mdp()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Serializes to the JSON MDP document; reals carry 17 significant digits.
    pub fn to_json_string(&self) -> Result<String> {
        let doc = MdpDocument::from_mdp(self);
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, crate::io::FullPrecision);
        doc.serialize(&mut ser)?;
        Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MdpDocument {
    states: Vec<String>,
    terminals: Vec<String>,
    actions: Vec<String>,
    reward: Vec<Vec<f64>>,
    transition: Vec<Vec<Vec<f64>>>,
    initial: Vec<f64>,
}

impl MdpDocument {
    fn from_mdp(mdp: &FiniteMdp) -> Self {
        let n = mdp.n_states();
        let m = mdp.n_actions();
        Self {
            states: mdp.state_names.clone(),
            terminals: mdp
                .terminal_states()
                .map(|x| mdp.state_names[x].clone())
                .collect(),
            actions: mdp.action_names.clone(),
            reward: (0..n)
                .map(|x| (0..m).map(|a| mdp.reward(x, a)).collect())
                .collect(),
            transition: (0..n)
                .map(|x| (0..m).map(|a| mdp.next_row(x, a).to_vec()).collect())
                .collect(),
            initial: mdp.initial.clone(),
        }
    }

    fn into_mdp(self) -> Result<FiniteMdp> {
        let mut terminals = Vec::with_capacity(self.terminals.len());
        for name in &self.terminals {
            let idx = self
                .states
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| Error::Shape(format!("terminal `{name}` is not a state")))?;
            terminals.push(idx);
        }
        FiniteMdp::new(
            self.states,
            self.actions,
            &terminals,
            self.reward,
            self.transition,
            self.initial,
        )
    }
}

/// Emulates discounting: every nonterminal row is scaled by `gamma` and the
/// remaining `1 - gamma` goes to an absorbing terminal (the first existing
/// terminal, or a new `discount_exit` state when there is none).
pub fn discount_transform(mdp: &FiniteMdp, gamma: f64) -> Result<FiniteMdp> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "discount must lie in (0,1), got {gamma}"
        )));
    }
    let structural = mdp.stochastic_diagnostics();
    if !structural.is_empty() {
        return Err(Error::InvalidMdp(structural));
    }
    let mut out = mdp.clone();
    let exit = match mdp.terminal_states().next() {
        Some(t) => t,
        None => {
            let n = mdp.n_states();
            let m = mdp.n_actions();
            let old = mdp;
            let mut names = old.state_names.clone();
            names.push("discount_exit".to_string());
            let reward = (0..=n)
                .map(|x| {
                    (0..m)
                        .map(|a| if x < n { old.reward(x, a) } else { 0.0 })
                        .collect()
                })
                .collect();
            let transition = (0..=n)
                .map(|x| {
                    (0..m)
                        .map(|a| {
                            let mut row = vec![0.0; n + 1];
                            if x < n {
                                row[..n].copy_from_slice(old.next_row(x, a));
                            } else {
                                row[n] = 1.0;
                            }
                            row
                        })
                        .collect()
                })
                .collect();
            let mut initial = old.initial.clone();
            initial.push(0.0);
            let terminals: Vec<usize> = old.terminal_states().chain(std::iter::once(n)).collect();
            out = FiniteMdp::new(names, old.action_names.clone(), &terminals, reward, transition, initial)?;
            n
        }
    };
    let nonterminal: Vec<usize> = out.nonterminal_states().collect();
    for x in nonterminal {
        for a in 0..out.n_actions() {
            let row = out.next_row_mut(x, a);
            for p in row.iter_mut() {
                *p *= gamma;
            }
            row[exit] += 1.0 - gamma;
        }
    }
    Ok(out)
}

/// A complete or partial episode `x_0, a_0, r_0, ..., x_T`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    /// The stopping time `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn final_state(&self) -> usize {
        *self.states.last().expect("trajectory has an initial state")
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Depth-first walk over all trajectories that terminate within `max_len`
/// steps. `action_ok` prunes actions and `next_prob` decides which successors
/// exist (only those with positive mass are followed).
pub(crate) fn walk_trajectories(
    mdp: &FiniteMdp,
    max_len: usize,
    budget: usize,
    action_ok: &dyn Fn(usize, usize) -> bool,
    next_prob: &dyn Fn(usize, usize, usize) -> f64,
    visit: &mut dyn FnMut(&Trajectory),
) -> Result<()> {
    struct Walker<'a> {
        mdp: &'a FiniteMdp,
        max_len: usize,
        budget: usize,
        nodes: usize,
        action_ok: &'a dyn Fn(usize, usize) -> bool,
        next_prob: &'a dyn Fn(usize, usize, usize) -> f64,
        visit: &'a mut dyn FnMut(&Trajectory),
        traj: Trajectory,
    }

    impl Walker<'_> {
        fn descend(&mut self) -> Result<()> {
            self.nodes += 1;
            if self.nodes > self.budget {
                return Err(Error::EnumerationBudget {
                    budget: self.budget,
                });
            }
            let x = self.traj.final_state();
            if self.mdp.is_terminal(x) {
                (self.visit)(&self.traj);
                return Ok(());
            }
            if self.traj.len() == self.max_len {
                return Ok(());
            }
            for a in 0..self.mdp.n_actions() {
                if !(self.action_ok)(x, a) {
                    continue;
                }
                for y in 0..self.mdp.n_states() {
                    if self.mdp.transition(x, a, y) <= 0.0 || (self.next_prob)(x, a, y) <= 0.0 {
                        continue;
                    }
                    self.traj.actions.push(a);
                    self.traj.rewards.push(self.mdp.reward(x, a));
                    self.traj.states.push(y);
                    let r = self.descend();
                    self.traj.actions.pop();
                    self.traj.rewards.pop();
                    self.traj.states.pop();
                    r?;
                }
            }
            Ok(())
        }
    }

    let mut w = Walker {
        mdp,
        max_len,
        budget,
        nodes: 0,
        action_ok,
        next_prob,
        visit,
        traj: Trajectory::default(),
    };
    for x0 in 0..mdp.n_states() {
        if mdp.initial()[x0] <= 0.0 {
            continue;
        }
        w.traj.states.push(x0);
        let r = w.descend();
        w.traj.states.pop();
        r?;
    }
    Ok(())
}

/// Every trajectory of length `<= max_len` that ends at a terminal, following
/// all actions and all positive-probability transitions.
pub fn enumerate_trajectories(mdp: &FiniteMdp, max_len: usize) -> Result<Vec<Trajectory>> {
    enumerate_trajectories_with_budget(mdp, max_len, ENUMERATION_BUDGET)
}

pub fn enumerate_trajectories_with_budget(
    mdp: &FiniteMdp,
    max_len: usize,
    budget: usize,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    walk_trajectories(
        mdp,
        max_len,
        budget,
        &|_, _| true,
        &|x, a, y| mdp.transition(x, a, y),
        &mut |t| out.push(t.clone()),
    )?;
    Ok(out)
}

/// `log p_pi(xi)`; a zero-probability step yields `-inf`.
pub fn trajectory_log_prob(mdp: &FiniteMdp, policy: &TabularPolicy, traj: &Trajectory) -> f64 {
    let mut lp = mdp.initial()[traj.states[0]].ln();
    for t in 0..traj.len() {
        let (x, a, y) = (traj.states[t], traj.actions[t], traj.states[t + 1]);
        lp += policy.prob(x, a).ln() + mdp.transition(x, a, y).ln();
    }
    if lp.is_nan() {
        f64::NEG_INFINITY
    } else {
        lp
    }
}

/// Exact `J(pi)` from the linear policy-evaluation system over nonterminal states.
pub fn expected_return(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<f64> {
    let v = policy_return_values(mdp, policy)?;
    Ok(mdp.initial().iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Per-state expected return of `policy` (zero on terminals).
pub fn policy_return_values(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.check_policy_shape(policy)?;
    mdp.ensure_transient_under(policy)?;
    let rewards: Vec<f64> = (0..mdp.n_states())
        .map(|x| {
            if mdp.is_terminal(x) {
                0.0
            } else {
                (0..mdp.n_actions())
                    .filter(|&a| policy.prob(x, a) > 0.0)
                    .map(|a| policy.prob(x, a) * mdp.reward(x, a))
                    .sum()
            }
        })
        .collect();
    solve_chain(mdp, |x, a| policy.prob(x, a), |x, a, y| mdp.transition(x, a, y), &rewards)
}

/// Solves `v = c + P v` on nonterminal states for the chain induced by
/// (`policy`, `kernel`); terminal entries are zero.
pub(crate) fn solve_chain(
    mdp: &FiniteMdp,
    policy: impl Fn(usize, usize) -> f64,
    kernel: impl Fn(usize, usize, usize) -> f64,
    per_state: &[f64],
) -> Result<Vec<f64>> {
    ensure_chain_transient(mdp, &policy, &kernel)?;
    let idx: Vec<usize> = mdp.nonterminal_states().collect();
    let mut pos = vec![usize::MAX; mdp.n_states()];
    for (i, &x) in idx.iter().enumerate() {
        pos[x] = i;
    }
    let k = idx.len();
    let mut a_mat = DMatrix::<f64>::identity(k, k);
    let mut b = DVector::<f64>::zeros(k);
    for (i, &x) in idx.iter().enumerate() {
        b[i] = per_state[x];
        for a in 0..mdp.n_actions() {
            let pa = policy(x, a);
            if pa <= 0.0 {
                continue;
            }
            for y in 0..mdp.n_states() {
                if mdp.is_terminal(y) {
                    continue;
                }
                let py = kernel(x, a, y);
                if py > 0.0 {
                    a_mat[(i, pos[y])] -= pa * py;
                }
            }
        }
    }
    let sol = a_mat
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NonTransient("policy-evaluation system is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonTransient("policy-evaluation system is singular".into()));
    }
    let mut out = vec![0.0; mdp.n_states()];
    for (i, &x) in idx.iter().enumerate() {
        out[x] = sol[i];
    }
    Ok(out)
}

/// Every nonterminal state must reach the terminal set in the chain's support graph.
fn ensure_chain_transient(
    mdp: &FiniteMdp,
    policy: &impl Fn(usize, usize) -> f64,
    kernel: &impl Fn(usize, usize, usize) -> f64,
) -> Result<()> {
    let n = mdp.n_states();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for x in mdp.nonterminal_states() {
        for a in 0..mdp.n_actions() {
            if policy(x, a) <= 0.0 {
                continue;
            }
            for (y, pred) in preds.iter_mut().enumerate() {
                if kernel(x, a, y) > 0.0 {
                    pred.push(x);
                }
            }
        }
    }
    let mut seen: Vec<bool> = (0..n).map(|x| mdp.is_terminal(x)).collect();
    let mut queue: VecDeque<usize> = mdp.terminal_states().collect();
    while let Some(y) = queue.pop_front() {
        for &x in &preds[y] {
            if !seen[x] {
                seen[x] = true;
                queue.push_back(x);
            }
        }
    }
    match mdp.nonterminal_states().find(|&x| !seen[x]) {
        Some(x) => Err(Error::NonTransient(format!(
            "state {} never reaches a terminal in the induced chain",
            mdp.state_names()[x]
        ))),
        None => Ok(()),
    }
}

/// Expected number of visits to each state under (`p0`, `kernel`, `policy`).
pub(crate) fn occupancy(
    mdp: &FiniteMdp,
    policy: impl Fn(usize, usize) -> f64,
    kernel: impl Fn(usize, usize, usize) -> f64,
) -> Result<Vec<f64>> {
    ensure_chain_transient(mdp, &policy, &kernel)?;
    // d = p0 + P^T d on nonterminal states.
    let idx: Vec<usize> = mdp.nonterminal_states().collect();
    let mut pos = vec![usize::MAX; mdp.n_states()];
    for (i, &x) in idx.iter().enumerate() {
        pos[x] = i;
    }
    let k = idx.len();
    let mut a_mat = DMatrix::<f64>::identity(k, k);
    let mut b = DVector::<f64>::zeros(k);
    for (i, &x) in idx.iter().enumerate() {
        b[i] = mdp.initial()[x];
        for a in 0..mdp.n_actions() {
            let pa = policy(x, a);
            if pa <= 0.0 {
                continue;
            }
            for y in mdp.nonterminal_states() {
                let py = kernel(x, a, y);
                if py > 0.0 {
                    a_mat[(pos[y], i)] -= pa * py;
                }
            }
        }
    }
    let sol = a_mat
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NonTransient("occupancy system is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite() || *v < -1e-9) {
        return Err(Error::NonTransient("occupancy system is singular".into()));
    }
    let mut out = vec![0.0; mdp.n_states()];
    for (i, &x) in idx.iter().enumerate() {
        out[x] = sol[i].max(0.0);
    }
    Ok(out)
}

/// Draws one episode from `p_pi`, deterministically for a given seed.
pub fn sample_trajectory(mdp: &FiniteMdp, policy: &TabularPolicy, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_trajectory_with(mdp, policy, &mut rng)
}

pub fn sample_trajectory_with<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    rng: &mut R,
) -> Result<Trajectory> {
    mdp.check_policy_shape(policy)?;
    let mut traj = Trajectory {
        states: vec![sample_index(mdp.initial(), rng)],
        ..Trajectory::default()
    };
    while !mdp.is_terminal(traj.final_state()) {
        if traj.len() >= SAMPLE_STEP_CAP {
            return Err(Error::NonTransient(format!(
                "no terminal reached within {SAMPLE_STEP_CAP} steps"
            )));
        }
        let x = traj.final_state();
        let a = sample_index(policy.row(x), rng);
        let y = sample_index(mdp.next_row(x, a), rng);
        traj.actions.push(a);
        traj.rewards.push(mdp.reward(x, a));
        traj.states.push(y);
    }
    Ok(traj)
}

/// Risk-neutral optimal values `max_pi E[sum r]` and a greedy policy, by
/// standard (hard-max) value iteration. Used as the reference optimum for the
/// learning benchmarks.
pub fn optimal_return(mdp: &FiniteMdp, tolerance: f64, max_sweeps: usize) -> Result<(f64, TabularPolicy)> {
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let mut v = vec![0.0; n];
    let q_of = |v: &[f64], x: usize, a: usize| {
        mdp.reward(x, a)
            + mdp
                .next_row(x, a)
                .iter()
                .zip(v)
                .map(|(p, vy)| p * vy)
                .sum::<f64>()
    };
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while residual > tolerance {
        if sweeps >= max_sweeps {
            return Err(Error::NonConvergence {
                what: "optimal value iteration",
                iterations: sweeps,
                residual,
            });
        }
        let mut next = vec![0.0; n];
        for x in mdp.nonterminal_states() {
            next[x] = (0..m).map(|a| q_of(&v, x, a)).fold(f64::NEG_INFINITY, f64::max);
        }
        residual = crate::util::max_abs_diff(&next, &v);
        v = next;
        sweeps += 1;
    }
    let choice: Vec<usize> = (0..n)
        .map(|x| {
            if mdp.is_terminal(x) {
                0
            } else {
                let qs: Vec<f64> = (0..m).map(|a| q_of(&v, x, a)).collect();
                crate::util::argmax(&qs)
            }
        })
        .collect();
    let greedy = TabularPolicy::deterministic(m, &choice);
    let j = mdp.initial().iter().zip(&v).map(|(p, v)| p * v).sum();
    Ok((j, greedy))
}
