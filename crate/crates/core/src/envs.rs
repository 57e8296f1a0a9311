//! Problem generators (finite MDP fixtures) and the pendulum swing-up task.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::util::sample_index;

/// Largest random MDP we generate; keeps enumeration inside the default budget.
pub const MAX_RANDOM_STATES: usize = 12;
const MAX_SUCCESSORS: usize = 3;

/// CHAIN2: `s0 -> term` under both actions, `r(s0,a0)=1`, `r(s0,a1)=0`.
pub fn make_chain() -> FiniteMdp {
    FiniteMdp::new(
        vec!["s0".into(), "term".into()],
        vec!["a0".into(), "a1".into()],
        &[1],
        vec![vec![1.0, 0.0], vec![0.0, 0.0]],
        vec![
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ],
        vec![1.0, 0.0],
    )
    .expect("CHAIN2 is well formed")
}

/// TWIST2: a single `(x, a)` with successors `g` and `b` at probability ½ each,
/// both of which step to the terminal. All rewards are zero.
pub fn make_twist2() -> FiniteMdp {
    FiniteMdp::new(
        vec!["x".into(), "g".into(), "b".into(), "term".into()],
        vec!["a".into()],
        &[3],
        vec![vec![0.0]; 4],
        vec![
            vec![vec![0.0, 0.5, 0.5, 0.0]],
            vec![vec![0.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0, 0.0, 0.0, 1.0]],
        ],
        vec![1.0, 0.0, 0.0, 0.0],
    )
    .expect("TWIST2 is well formed")
}

/// Goal-reaching `size x size` grid. Start top-left, goal (terminal) bottom-right,
/// actions up/down/left/right, walls leave the agent in place. Each step
/// costs 0.01 and entering the goal pays 1.
pub fn make_gridworld(size: usize) -> Result<FiniteMdp> {
    if size < 2 {
        return Err(Error::InvalidArgument("gridworld size must be at least 2".into()));
    }
    let n = size * size;
    let goal = n - 1;
    let moves: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    let mut names = Vec::with_capacity(n);
    let mut reward = vec![vec![0.0; 4]; n];
    let mut transition = vec![vec![vec![0.0; n]; 4]; n];
    for x in 0..n {
        let (r, c) = ((x / size) as isize, (x % size) as isize);
        names.push(format!("r{r}c{c}"));
        for (a, (dr, dc)) in moves.iter().enumerate() {
            if x == goal {
                transition[x][a][x] = 1.0;
                continue;
            }
            let (nr, nc) = (r + dr, c + dc);
            let y = if nr < 0 || nc < 0 || nr >= size as isize || nc >= size as isize {
                x
            } else {
                (nr as usize) * size + nc as usize
            };
            transition[x][a][y] = 1.0;
            reward[x][a] = -0.01 + if y == goal { 1.0 } else { 0.0 };
        }
    }
    let mut initial = vec![0.0; n];
    initial[0] = 1.0;
    FiniteMdp::new(
        names,
        vec!["up".into(), "down".into(), "left".into(), "right".into()],
        &[goal],
        reward,
        transition,
        initial,
    )
}

/// Random layered-acyclic MDP starting in state 0. The last state is the single terminal; the
/// other `n_states - 1` states are split over `layers` layers, every
/// transition moves one layer forward or to the terminal (the last layer
/// always terminates), each `(x, a)` has at most three successors, and
/// rewards are uniform in `[-1, 1]`.
pub fn make_random_mdp(n_states: usize, n_actions: usize, layers: usize, seed: u64) -> Result<FiniteMdp> {
    if !(2..=MAX_RANDOM_STATES).contains(&n_states) {
        return Err(Error::InvalidArgument(format!(
            "random MDPs have 2..={MAX_RANDOM_STATES} states, got {n_states}"
        )));
    }
    if n_actions == 0 {
        return Err(Error::InvalidArgument("need at least one action".into()));
    }
    let inner = n_states - 1;
    if layers == 0 || layers > inner {
        return Err(Error::InvalidArgument(format!(
            "layers must be in 1..={inner}, got {layers}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terminal = n_states - 1;

    // One state per layer, the rest spread at random; states stay sorted by layer.
    let mut layer_of: Vec<usize> = (0..layers).collect();
    for _ in layers..inner {
        layer_of.push(rng.random_range(0..layers));
    }
    layer_of.sort_unstable();
    let members = |l: usize| -> Vec<usize> { (0..inner).filter(|&x| layer_of[x] == l).collect() };

    let mut reward = vec![vec![0.0; n_actions]; n_states];
    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    for x in 0..inner {
        let mut candidates = if layer_of[x] + 1 < layers {
            members(layer_of[x] + 1)
        } else {
            Vec::new()
        };
        candidates.push(terminal);
        for a in 0..n_actions {
            reward[x][a] = rng.random_range(-1.0..=1.0);
            let k = rng.random_range(1..=MAX_SUCCESSORS.min(candidates.len()));
            let picked = sample_indices(&mut rng, candidates.len(), k);
            let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (i, w) in picked.iter().zip(&weights) {
                transition[x][a][candidates[i]] = w / total;
            }
            // Exact stochasticity after floating-point normalization.
            let s: f64 = transition[x][a].iter().sum();
            let last = candidates[picked.index(k - 1)];
            transition[x][a][last] += 1.0 - s;
        }
    }
    transition[terminal] = vec![vec![0.0; n_states]; n_actions];
    for row in &mut transition[terminal] {
        row[terminal] = 1.0;
    }
    // A point-mass start keeps `Σ p0 V` equal to the log-likelihood.
    let mut initial = vec![0.0; n_states];
    initial[0] = 1.0;

    FiniteMdp::new(
        (0..n_states)
            .map(|x| if x == terminal { "term".to_string() } else { format!("x{x}") })
            .collect(),
        (0..n_actions).map(|a| format!("a{a}")).collect(),
        &[terminal],
        reward,
        transition,
        initial,
    )
}

/// Observation or action space of an [`Environment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Space {
    /// Indices `0..n`, carried as a one-element vector.
    Discrete(usize),
    /// Real vectors; for actions every coordinate lies in `[-bound, bound]`.
    Continuous { dim: usize, bound: f64 },
}

impl Space {
    /// Width of the vector encoding.
    pub fn width(&self) -> usize {
        match *self {
            Space::Discrete(_) => 1,
            Space::Continuous { dim, .. } => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True termination; values are not bootstrapped through it.
    pub terminal: bool,
    /// Time-limit cut; the episode restarts but the transition still bootstraps.
    pub truncated: bool,
}

/// Episodic environment with a known reward function.
pub trait Environment: Send {
    fn state_space(&self) -> Space;
    fn action_space(&self) -> Space;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&mut self, action: &[f64], rng: &mut dyn RngCore) -> StepOutcome;
    fn reward(&self, state: &[f64], action: &[f64]) -> f64;
    fn is_terminal(&self, state: &[f64]) -> bool;
    fn boxed_clone(&self) -> Box<dyn Environment>;
}

/// A [`FiniteMdp`] exposed as an episodic environment.
#[derive(Debug, Clone)]
pub struct FiniteMdpEnv {
    mdp: FiniteMdp,
    state: usize,
    steps: usize,
    step_cap: usize,
}

impl FiniteMdpEnv {
    pub fn new(mdp: FiniteMdp, step_cap: usize) -> Self {
        Self {
            mdp,
            state: 0,
            steps: 0,
            step_cap,
        }
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }
}

impl Environment for FiniteMdpEnv {
    fn state_space(&self) -> Space {
        Space::Discrete(self.mdp.n_states())
    }

    fn action_space(&self) -> Space {
        Space::Discrete(self.mdp.n_actions())
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = sample_index(self.mdp.initial(), rng);
        self.steps = 0;
        vec![self.state as f64]
    }

    fn step(&mut self, action: &[f64], rng: &mut dyn RngCore) -> StepOutcome {
        let a = action[0] as usize;
        let x = self.state;
        let reward = self.mdp.reward(x, a);
        let y = sample_index(self.mdp.next_row(x, a), rng);
        self.state = y;
        self.steps += 1;
        let terminal = self.mdp.is_terminal(y);
        StepOutcome {
            next_state: vec![y as f64],
            reward,
            terminal,
            truncated: !terminal && self.steps >= self.step_cap,
        }
    }

    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        self.mdp.reward(state[0] as usize, action[0] as usize)
    }

    fn is_terminal(&self, state: &[f64]) -> bool {
        self.mdp.is_terminal(state[0] as usize)
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Physical constants of the swing-up pendulum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub episode_cap: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            max_speed: 8.0,
            episode_cap: 200,
        }
    }
}

/// Angle measured from upright, angular velocity and elapsed steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
    pub t: usize,
}

impl PendulumState {
    pub fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

pub fn pendulum_reward(theta: f64, theta_dot: f64, torque: f64) -> f64 {
    let th = wrap_angle(theta);
    -(th * th + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque)
}

/// One semi-implicit Euler step. Returns the next state, the reward of the
/// applied (clipped) torque at the current state, and whether the episode cap
/// has been reached.
pub fn pendulum_step(p: &PendulumParams, s: PendulumState, action: f64) -> (PendulumState, f64, bool) {
    let u = action.clamp(-p.max_torque, p.max_torque);
    let reward = pendulum_reward(s.theta, s.theta_dot, u);
    let accel = 3.0 * p.gravity / (2.0 * p.length) * s.theta.sin() + 3.0 / (p.mass * p.length * p.length) * u;
    let theta_dot = (s.theta_dot + accel * p.dt).clamp(-p.max_speed, p.max_speed);
    let theta = wrap_angle(s.theta + theta_dot * p.dt);
    let t = s.t + 1;
    (PendulumState { theta, theta_dot, t }, reward, t >= p.episode_cap)
}

#[derive(Debug, Clone)]
pub struct PendulumEnv {
    pub params: PendulumParams,
    state: PendulumState,
}

impl Default for PendulumEnv {
    fn default() -> Self {
        Self::new(PendulumParams::default())
    }
}

impl PendulumEnv {
    pub fn new(params: PendulumParams) -> Self {
        Self {
            params,
            state: PendulumState {
                theta: PI,
                theta_dot: 0.0,
                t: 0,
            },
        }
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }
}

impl Environment for PendulumEnv {
    fn state_space(&self) -> Space {
        Space::Continuous { dim: 3, bound: f64::INFINITY }
    }

    fn action_space(&self) -> Space {
        Space::Continuous {
            dim: 1,
            bound: self.params.max_torque,
        }
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = PendulumState {
            theta: rng.random_range(-PI..PI),
            theta_dot: rng.random_range(-1.0..1.0),
            t: 0,
        };
        self.state.observation()
    }

    fn step(&mut self, action: &[f64], _rng: &mut dyn RngCore) -> StepOutcome {
        let (next, reward, done) = pendulum_step(&self.params, self.state, action[0]);
        self.state = next;
        StepOutcome {
            next_state: next.observation(),
            reward,
            terminal: false,
            truncated: done,
        }
    }

    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        let theta = state[1].atan2(state[0]);
        let u = action[0].clamp(-self.params.max_torque, self.params.max_torque);
        pendulum_reward(theta, state[2], u)
    }

    fn is_terminal(&self, _state: &[f64]) -> bool {
        false
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{enumerate_trajectories, optimal_return};

    #[test]
    fn random_mdps_are_reproducible_and_valid() {
        for seed in 0..100 {
            let a = make_random_mdp(8, 4, 5, seed).unwrap();
            assert!(a.validate().is_empty(), "seed {seed}: {:?}", a.validate());
            assert_eq!(a, make_random_mdp(8, 4, 5, seed).unwrap());
        }
    }

    #[test]
    fn one_layer_terminates_immediately() {
        let mdp = make_random_mdp(5, 3, 1, 4).unwrap();
        for x in mdp.nonterminal_states() {
            for a in 0..3 {
                assert_eq!(mdp.transition(x, a, 4), 1.0);
            }
        }
    }

    #[test]
    fn random_mdp_rejects_bad_sizes() {
        assert!(make_random_mdp(13, 2, 2, 0).is_err());
        assert!(make_random_mdp(4, 2, 4, 0).is_err());
        assert!(make_random_mdp(4, 0, 1, 0).is_err());
    }

    #[test]
    fn largest_documented_instance_is_enumerable() {
        for seed in 0..5 {
            let mdp = make_random_mdp(MAX_RANDOM_STATES, 4, 5, seed).unwrap();
            assert!(enumerate_trajectories(&mdp, 5).is_ok());
        }
    }

    #[test]
    fn gridworld_is_valid_and_optimum_follows_shortest_path() {
        let mdp = make_gridworld(3).unwrap();
        assert!(mdp.validate().is_empty());
        let (j, _) = optimal_return(&mdp, 1e-12, 10_000).unwrap();
        // Manhattan distance from corner to corner is 4.
        assert!((j - (1.0 - 0.01 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn upright_rest_is_an_equilibrium() {
        let p = PendulumParams::default();
        let s = PendulumState { theta: 0.0, theta_dot: 0.0, t: 0 };
        let (next, r, done) = pendulum_step(&p, s, 0.0);
        assert_eq!(r, 0.0);
        assert_eq!(next.theta, 0.0);
        assert_eq!(next.theta_dot, 0.0);
        assert!(!done);
    }

    #[test]
    fn unforced_step_matches_hand_euler() {
        let p = PendulumParams::default();
        let s = PendulumState { theta: 0.3, theta_dot: -0.2, t: 0 };
        let (next, _, _) = pendulum_step(&p, s, 0.0);
        let thdot = -0.2 + 15.0 * 0.3f64.sin() * 0.05;
        assert!((next.theta_dot - thdot).abs() < 1e-15);
        assert!((next.theta - (0.3 + thdot * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn episode_ends_at_cap() {
        let p = PendulumParams::default();
        let mut s = PendulumState { theta: 1.0, theta_dot: 0.0, t: 0 };
        for i in 0..200 {
            let (next, r, done) = pendulum_step(&p, s, 5.0);
            assert!(r <= 0.0);
            assert_eq!(done, i == 199);
            assert!(next.theta > -PI && next.theta <= PI);
            s = next;
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn reward_from_observation_matches_internal() {
        let env = PendulumEnv::default();
        let s = PendulumState { theta: 2.5, theta_dot: 1.5, t: 0 };
        let r = env.reward(&s.observation(), &[3.0]);
        assert!((r - pendulum_reward(2.5, 1.5, 2.0)).abs() < 1e-12);
    }
}
