//! Tabular value functions, policies and kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;

const ROW_TOLERANCE: f64 = 1e-12;

/// Inverse-reward-units temperature of the optimality likelihood `exp(eta * r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(eta: f64) -> Result<Self> {
        if eta.is_finite() && eta > 0.0 {
            Ok(Self(eta))
        } else {
            Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {eta}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// State values on the log-likelihood scale; terminal entries are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    values: Vec<f64>,
}

impl ValueFunction {
    pub fn zeros(n_states: usize) -> Self {
        Self {
            values: vec![0.0; n_states],
        }
    }

    /// Builds a value function for `mdp`, forcing terminal entries to zero.
    pub fn new(mdp: &FiniteMdp, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != mdp.n_states() {
            return Err(Error::Shape(format!(
                "value function has {} entries, MDP has {} states",
                values.len(),
                mdp.n_states()
            )));
        }
        for x in mdp.terminal_states() {
            values[x] = 0.0;
        }
        Ok(Self { values })
    }

    pub fn get(&self, x: usize) -> f64 {
        self.values[x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionValueFunction {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl ActionValueFunction {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::Shape("ragged action-value rows".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, x: usize, a: usize) -> f64 {
        self.values[x * self.n_actions + a]
    }

    pub fn set(&mut self, x: usize, a: usize, v: f64) {
        self.values[x * self.n_actions + a] = v;
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Row-stochastic action distribution per state: a baseline policy or a variational one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Point-mass policy choosing `choice[x]` in state `x`.
    pub fn deterministic(n_actions: usize, choice: &[usize]) -> Self {
        let mut probs = vec![0.0; choice.len() * n_actions];
        for (x, &a) in choice.iter().enumerate() {
            probs[x * n_actions + a] = 1.0;
        }
        Self {
            n_states: choice.len(),
            n_actions,
            probs,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::Shape("ragged policy rows".into()));
        }
        let p = Self {
            n_states,
            n_actions,
            probs: rows.into_iter().flatten().collect(),
        };
        p.check()?;
        Ok(p)
    }

    pub(crate) fn from_flat(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), n_states * n_actions);
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn check(&self) -> Result<()> {
        for x in 0..self.n_states {
            check_row(self.row(x), || format!("policy row for state {x}"))?;
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.probs[x * self.n_actions + a]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn row_mut(&mut self, x: usize) -> &mut [f64] {
        &mut self.probs[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_states).map(|x| self.row(x).to_vec()).collect()
    }
}

/// Variational transition kernel `q_d(x'|x,a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDynamics {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularDynamics {
    /// The true kernel of `mdp`, i.e. the identity twist.
    pub fn from_mdp(mdp: &FiniteMdp) -> Self {
        Self {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            probs: mdp.transition_table().to_vec(),
        }
    }

    pub(crate) fn from_flat(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), n_states * n_actions * n_states);
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    /// Checks row-stochasticity and `support(q_d) ⊆ support(p)` against `mdp`.
    pub fn check_against(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::Shape("dynamics table does not match MDP".into()));
        }
        for x in mdp.nonterminal_states() {
            for a in 0..self.n_actions {
                let row = self.row(x, a);
                check_row(row, || format!("dynamics row ({x},{a})"))?;
                for (y, (&q, &p)) in row.iter().zip(mdp.next_row(x, a)).enumerate() {
                    if q > 0.0 && p == 0.0 {
                        return Err(Error::SupportViolation(format!(
                            "q_d({y}|{x},{a}) > 0 where p = 0"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, x: usize, a: usize, y: usize) -> f64 {
        self.probs[(x * self.n_actions + a) * self.n_states + y]
    }

    pub fn row(&self, x: usize, a: usize) -> &[f64] {
        let start = (x * self.n_actions + a) * self.n_states;
        &self.probs[start..start + self.n_states]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

fn check_row(row: &[f64], what: impl Fn() -> String) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument(format!("{} has a negative entry", what())));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::InvalidArgument(format!("{} sums to {s}", what())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
        assert_eq!(Temperature::new(2.0).unwrap().get(), 2.0);
    }

    #[test]
    fn policy_rows_are_checked() {
        assert!(TabularPolicy::from_rows(vec![vec![0.5, 0.4]]).is_err());
        assert!(TabularPolicy::from_rows(vec![vec![1.2, -0.2]]).is_err());
        let p = TabularPolicy::from_rows(vec![vec![0.25, 0.75]]).unwrap();
        assert_eq!(p.prob(0, 1), 0.75);
    }

    #[test]
    fn deterministic_policy_is_point_mass() {
        let p = TabularPolicy::deterministic(3, &[2, 0]);
        assert_eq!(p.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(p.row(1), &[1.0, 0.0, 0.0]);
    }
}
