//! Named invariant suites run by the `check` command: closed-form twisting
//! against a numerical optimizer, operator and solver agreement, monotone
//! improvement, the ELBO bound, EM ascent, gradient integrity and the tabular
//! sanity chain of the sampled updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::approx::{
    categorical_log_prob, categorical_log_prob_grad, finite_difference, max_relative_error, Activation, Approximator,
    GaussianHead, MlpSpec, ParamVector, TableSpec,
};
use crate::dp::{
    em_solve, model_based_pi, model_free_pi, policy_iteration, value_iteration, EStepMethod, EStepSolution,
    ImprovementMode, SolverConfig,
};
use crate::envs::{make_chain, make_random_mdp, make_twist2};
use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::oracle::{brute_force_log_likelihood, max_entropy_regularized};
use crate::sampled::{
    exhaustive_batch, m_step_map, m_step_update, set_table_cell, update_actor, update_dynamics, update_log_ratio, update_q,
    update_q_exp_td, update_v, update_v_expected, LossSettings, MStepMode, NetKind, Source, StateAction, Transition,
    VmbpoNets,
};
use crate::tables::{ActionValueFunction, TabularDynamics, TabularPolicy, Temperature, ValueFunction};
use crate::util::{max_abs_diff, total_variation};
use crate::variational::{
    apply_induced_operator, apply_optimal_operator, elbo_exact, log_partition, q_from_v, softmax_value,
    twist_dynamics, twist_policy, OperatorMode,
};

pub const CHECK_NAMES: [&str; 11] = [
    "lemma6_policy",
    "lemma6_dynamics",
    "operator_modes_agree",
    "monotonicity",
    "fixed_point",
    "pi_vi_agreement",
    "elbo_bound",
    "oracle_equality",
    "em_ascent",
    "gradient_fd",
    "tabular_chain",
];

/// Implementations under test; swapped out to inject faults.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub twist_policy: fn(&TabularPolicy, &ActionValueFunction) -> TabularPolicy,
    pub twist_dynamics: fn(&FiniteMdp, &ValueFunction) -> TabularDynamics,
}

impl Default for Hooks {
    fn default() -> Self {
        Self {
            twist_policy,
            twist_dynamics,
        }
    }
}

fn corrupted_twist_policy(baseline: &TabularPolicy, q: &ActionValueFunction) -> TabularPolicy {
    // Twists with Q/2 instead of Q.
    let halved: Vec<Vec<f64>> = (0..q.n_states()).map(|x| q.row(x).iter().map(|v| 0.5 * v).collect()).collect();
    twist_policy(baseline, &ActionValueFunction::from_rows(halved).expect("same shape"))
}

fn corrupted_twist_dynamics(mdp: &FiniteMdp, _v: &ValueFunction) -> TabularDynamics {
    TabularDynamics::from_mdp(mdp)
}

impl Hooks {
    /// Hooks with one implementation replaced by a deliberately wrong one.
    pub fn with_fault(fault: &str) -> Result<Self> {
        let mut h = Self::default();
        match fault {
            "twist_policy" => h.twist_policy = corrupted_twist_policy,
            "twist_dynamics" => h.twist_dynamics = corrupted_twist_dynamics,
            other => {
                return Err(Error::config(
                    "check.inject_fault",
                    format!("unknown fault {other:?}; expected twist_policy or twist_dynamics"),
                ))
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSettings {
    pub seed: u64,
    /// Random instances per suite.
    pub instances: usize,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self { seed: 0, instances: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn run_checks(names: &[String], settings: &CheckSettings, hooks: &Hooks) -> Result<Vec<CheckReport>> {
    names.iter().map(|n| run_check(n, settings, hooks)).collect()
}

pub fn run_check(name: &str, s: &CheckSettings, hooks: &Hooks) -> Result<CheckReport> {
    let (passed, detail) = match name {
        "lemma6_policy" => within(lemma6_policy(s, hooks)?, 1e-6),
        "lemma6_dynamics" => within(lemma6_dynamics(s, hooks)?, 1e-6),
        "operator_modes_agree" => within(operator_modes_agree(s)?, 1e-10),
        "monotonicity" => {
            let worst = monotonicity(s)?;
            (worst >= -1e-10, format!("smallest per-iteration value change {worst:e}"))
        }
        "fixed_point" => within(fixed_point(s)?, 1e-9),
        "pi_vi_agreement" => within(pi_vi_agreement(s)?, 1e-8),
        "elbo_bound" => {
            let (slack, gap) = elbo_bound(s)?;
            (
                slack <= 1e-10 && gap <= 1e-8,
                format!("max ELBO - log-likelihood {slack:e}, gap at optimum {gap:e}"),
            )
        }
        "oracle_equality" => within(oracle_equality(s)?, 1e-8),
        "em_ascent" => {
            let (drop, gap) = em_ascent(s)?;
            (
                drop <= 1e-9 && gap < 1e-8,
                format!("largest log-likelihood drop {drop:e}, largest E-step gap {gap:e}"),
            )
        }
        "gradient_fd" => within(gradient_fd(s)?, 1e-4),
        "tabular_chain" => {
            let results = tabular_chain()?;
            let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
            let detail = results
                .iter()
                .map(|(n, e)| format!("{n}={e:.2e}"))
                .collect::<Vec<_>>()
                .join(" ");
            (worst <= 1e-3, detail)
        }
        other => return Err(Error::config("check.names", format!("unknown check {other:?}"))),
    };
    Ok(CheckReport {
        name: name.to_string(),
        passed,
        detail,
    })
}

fn within(err: f64, tol: f64) -> (bool, String) {
    (err <= tol, format!("max error {err:e} (tolerance {tol:e})"))
}

fn eta1() -> Temperature {
    Temperature::new(1.0).expect("positive")
}

/// Random MDP with 3..=8 states, 1..=4 actions and up to 5 layers.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Result<FiniteMdp> {
    let n_states = rng.random_range(3..=8);
    let n_actions = rng.random_range(1..=4);
    let layers = rng.random_range(1..=(n_states - 1).min(5));
    make_random_mdp(n_states, n_actions, layers, rng.random())
}

/// Random policy; with `sparse`, some actions get zero mass (never all).
pub fn random_policy(n_states: usize, n_actions: usize, sparse: bool, rng: &mut ChaCha8Rng) -> TabularPolicy {
    let rows = (0..n_states)
        .map(|_| {
            let keep = rng.random_range(0..n_actions);
            let mut row: Vec<f64> = (0..n_actions)
                .map(|a| {
                    if sparse && a != keep && rng.random_bool(0.3) {
                        0.0
                    } else {
                        rng.random_range(0.05..1.0)
                    }
                })
                .collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
        .collect();
    TabularPolicy::from_rows(rows).expect("rows are normalized")
}

/// Random policy supported inside the support of `baseline`.
pub fn random_sub_policy(baseline: &TabularPolicy, rng: &mut ChaCha8Rng) -> TabularPolicy {
    let rows = (0..baseline.n_states())
        .map(|x| {
            let mut row: Vec<f64> = baseline
                .row(x)
                .iter()
                .map(|&p| if p > 0.0 { rng.random_range(0.05..1.0) } else { 0.0 })
                .collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
        .collect();
    TabularPolicy::from_rows(rows).expect("rows are normalized")
}

/// Random dynamics supported inside the support of `mdp`'s kernel.
pub fn random_sub_dynamics(mdp: &FiniteMdp, rng: &mut ChaCha8Rng) -> TabularDynamics {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let mut probs = Vec::with_capacity(n * m * n);
    for x in 0..n {
        for a in 0..m {
            let mut row: Vec<f64> = mdp
                .next_row(x, a)
                .iter()
                .map(|&p| if p > 0.0 { rng.random_range(0.05..1.0) } else { 0.0 })
                .collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            probs.extend(row);
        }
    }
    TabularDynamics::from_flat(n, m, probs)
}

fn random_values(mdp: &FiniteMdp, rng: &mut ChaCha8Rng) -> ValueFunction {
    let v = (0..mdp.n_states()).map(|_| rng.random_range(-3.0..3.0)).collect();
    ValueFunction::new(mdp, v).expect("length matches")
}

fn instance_rng(s: &CheckSettings, suite: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(s.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ suite)
}

/// Twisted policy and its log-partition against the numerically maximized
/// `E_q[Q] - KL(q || π)`.
pub fn lemma6_policy(s: &CheckSettings, hooks: &Hooks) -> Result<f64> {
    let mut rng = instance_rng(s, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..s.instances {
        let mdp = random_instance(&mut rng)?;
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), true, &mut rng);
        let rows = (0..mdp.n_states())
            .map(|_| (0..mdp.n_actions()).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let q = ActionValueFunction::from_rows(rows)?;
        let qc = (hooks.twist_policy)(&pi, &q);
        let v = softmax_value(&mdp, &pi, &q);
        for x in mdp.nonterminal_states() {
            let best = max_entropy_regularized(pi.row(x), q.row(x))?;
            worst = worst.max(max_abs_diff(qc.row(x), &best.argmax));
            worst = worst.max((v.get(x) - best.value).abs());
        }
    }
    Ok(worst)
}

/// Twisted dynamics and `log E_p exp V` against the numerically maximized
/// `E_q[V] - KL(q || p)`.
pub fn lemma6_dynamics(s: &CheckSettings, hooks: &Hooks) -> Result<f64> {
    let mut rng = instance_rng(s, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..s.instances {
        let mdp = random_instance(&mut rng)?;
        let v = random_values(&mdp, &mut rng);
        let qd = (hooks.twist_dynamics)(&mdp, &v);
        for x in mdp.nonterminal_states() {
            for a in 0..mdp.n_actions() {
                let best = max_entropy_regularized(mdp.next_row(x, a), v.as_slice())?;
                worst = worst.max(max_abs_diff(qd.row(x, a), &best.argmax));
                worst = worst.max((log_partition(mdp.next_row(x, a), v.as_slice()) - best.value).abs());
            }
        }
    }
    Ok(worst)
}

/// Model-based and model-free forms of the induced and optimal operators.
pub fn operator_modes_agree(s: &CheckSettings) -> Result<f64> {
    let mut rng = instance_rng(s, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..s.instances {
        let mdp = random_instance(&mut rng)?;
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), true, &mut rng);
        let qc = random_sub_policy(&pi, &mut rng);
        let v = random_values(&mdp, &mut rng);
        let eta = Temperature::new(rng.random_range(0.2..3.0))?;
        let mb = apply_induced_operator(&mdp, eta, &pi, &qc, &v, OperatorMode::ModelBased)?;
        let mf = apply_induced_operator(&mdp, eta, &pi, &qc, &v, OperatorMode::ModelFree)?;
        worst = worst.max(max_abs_diff(mb.as_slice(), mf.as_slice()));
        let ob = apply_optimal_operator(&mdp, eta, &pi, &v, OperatorMode::ModelBased);
        let of = apply_optimal_operator(&mdp, eta, &pi, &v, OperatorMode::ModelFree);
        worst = worst.max(max_abs_diff(ob.as_slice(), of.as_slice()));
    }
    Ok(worst)
}

/// Smallest `V_{k+1}(x) - V_k(x)` over all policy-iteration traces, for both
/// operator modes and both improvement modes.
pub fn monotonicity(s: &CheckSettings) -> Result<f64> {
    let mut rng = instance_rng(s, 4);
    let mut worst = f64::INFINITY;
    for _ in 0..s.instances {
        let mdp = random_instance(&mut rng)?;
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), true, &mut rng);
        for improvement in [ImprovementMode::ClosedForm, ImprovementMode::KlProjection] {
            for mode in [OperatorMode::ModelBased, OperatorMode::ModelFree] {
                let cfg = SolverConfig {
                    improvement,
                    ..Default::default()
                };
                let sol = policy_iteration(&mdp, eta1(), &pi, mode, &cfg)?;
                worst = worst.min(min_step(&sol));
            }
        }
    }
    Ok(if worst.is_finite() { worst } else { 0.0 })
}

/// Smallest per-state increase between consecutive PI value iterates.
pub fn min_step(sol: &EStepSolution) -> f64 {
    sol.value_trace
        .windows(2)
        .flat_map(|w| w[1].as_slice().iter().zip(w[0].as_slice()).map(|(b, a)| b - a).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min)
}

/// `T[V_π] = V_π` and `q_c* = twist(Q_π)` at the value-iteration solution.
pub fn fixed_point(s: &CheckSettings) -> Result<f64> {
    let mut rng = instance_rng(s, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..s.instances {
        let mdp = random_instance(&mut rng)?;
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), true, &mut rng);
        let sol = value_iteration(&mdp, eta1(), &pi, OperatorMode::ModelFree, &SolverConfig::default())?;
        for mode in [OperatorMode::ModelBased, OperatorMode::ModelFree] {
            let t = apply_optimal_operator(&mdp, eta1(), &pi, &sol.v_pi, mode);
            worst = worst.max(max_abs_diff(t.as_slice(), sol.v_pi.as_slice()));
        }
        let q = q_from_v(&mdp, eta1(), &sol.v_pi);
        worst = worst.max(max_abs_diff(twist_policy(&pi, &q).as_slice(), sol.q_c_star.as_slice()));
    }
    Ok(worst)
}

/// Pairwise differences of `V_π`, `q_c*`, `q_d*` between the four exact solvers.
pub fn solver_disagreement(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<f64> {
    let cfg = SolverConfig::default();
    let sols = [
        model_based_pi(mdp, eta1(), pi, &cfg)?,
        model_free_pi(mdp, eta1(), pi, &cfg)?,
        value_iteration(mdp, eta1(), pi, OperatorMode::ModelBased, &cfg)?,
        value_iteration(mdp, eta1(), pi, OperatorMode::ModelFree, &cfg)?,
    ];
    let mut worst: f64 = 0.0;
    for i in 0..sols.len() {
        for j in i + 1..sols.len() {
            let (a, b) = (&sols[i], &sols[j]);
            worst = worst
                .max(max_abs_diff(a.v_pi.as_slice(), b.v_pi.as_slice()))
                .max(max_abs_diff(a.q_c_star.as_slice(), b.q_c_star.as_slice()))
                .max(max_abs_diff(a.q_d_star.as_slice(), b.q_d_star.as_slice()));
        }
    }
    Ok(worst)
}

pub fn pi_vi_agreement(s: &CheckSettings) -> Result<f64> {
    let mut rng = instance_rng(s, 6);
    let mut worst: f64 = 0.0;
    for _ in 0..s.instances {
        let mdp = random_instance(&mut rng)?;
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), true, &mut rng);
        worst = worst.max(solver_disagreement(&mdp, &pi)?);
    }
    Ok(worst)
}

/// `(max ELBO(q) - log-likelihood over random q, |ELBO(q*) - log-likelihood|)`.
pub fn elbo_bound(s: &CheckSettings) -> Result<(f64, f64)> {
    let mut rng = instance_rng(s, 7);
    let mut slack = f64::NEG_INFINITY;
    let mut gap: f64 = 0.0;
    for _ in 0..s.instances {
        let mdp = random_instance(&mut rng)?;
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), true, &mut rng);
        let sol = value_iteration(&mdp, eta1(), &pi, OperatorMode::ModelFree, &SolverConfig::default())?;
        let ll = sol.log_likelihood(&mdp);
        for _ in 0..5 {
            let qc = random_sub_policy(&pi, &mut rng);
            let qd = random_sub_dynamics(&mdp, &mut rng);
            slack = slack.max(elbo_exact(&mdp, eta1(), &qc, &qd, &pi)? - ll);
        }
        gap = gap.max((elbo_exact(&mdp, eta1(), &sol.q_c_star, &sol.q_d_star, &pi)? - ll).abs());
    }
    Ok((slack, gap))
}

/// `Σ p0 V_π` from value iteration against brute-force trajectory enumeration.
pub fn oracle_equality(s: &CheckSettings) -> Result<f64> {
    let mut rng = instance_rng(s, 8);
    let mut worst: f64 = 0.0;
    for _ in 0..s.instances {
        let mdp = random_instance(&mut rng)?;
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), true, &mut rng);
        let sol = value_iteration(&mdp, eta1(), &pi, OperatorMode::ModelFree, &SolverConfig::default())?;
        worst = worst.max((sol.log_likelihood(&mdp) - brute_force_log_likelihood(&mdp, eta1(), &pi)?).abs());
    }
    Ok(worst)
}

/// `(largest log-likelihood decrease, largest |log-likelihood - ELBO(q*)|)`
/// over five-iteration EM runs with `λ = 0`.
pub fn em_ascent(s: &CheckSettings) -> Result<(f64, f64)> {
    let mut rng = instance_rng(s, 9);
    let mut drop = f64::NEG_INFINITY;
    let mut gap: f64 = 0.0;
    for _ in 0..s.instances {
        let mdp = random_instance(&mut rng)?;
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), false, &mut rng);
        let recs = em_solve(
            &mdp,
            eta1(),
            &pi,
            5,
            0.0,
            &SolverConfig::default(),
            EStepMethod::ModelBasedPi,
            OperatorMode::ModelBased,
        )?;
        for w in recs.windows(2) {
            drop = drop.max(w[0].log_likelihood - w[1].log_likelihood);
        }
        for r in &recs {
            gap = gap.max((r.log_likelihood - r.elbo).abs());
        }
    }
    Ok((drop, gap))
}

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

fn fd_error(analytic: &[f64], f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> f64 {
    max_relative_error(analytic, &finite_difference(f, x, FD_STEP), FD_FLOOR)
}

/// Largest relative finite-difference error over every differentiable path:
/// raw approximators, output heads and each sampled loss.
pub fn gradient_fd(s: &CheckSettings) -> Result<f64> {
    let mut rng = instance_rng(s, 10);
    let mut worst: f64 = 0.0;
    for _ in 0..s.instances {
        worst = worst.max(fd_approximators(&mut rng)?);
        worst = worst.max(fd_heads(&mut rng));
        worst = worst.max(fd_losses(&mut rng)?);
    }
    Ok(worst)
}

fn fd_approximators(rng: &mut ChaCha8Rng) -> Result<f64> {
    let input_dim = rng.random_range(1..=4);
    let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=6)).collect();
    let output_dim = rng.random_range(1..=3);
    let scale = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(1.0..50.0) };
    let net = Approximator::Mlp(MlpSpec::new(input_dim, hidden, output_dim, Activation::Tanh)?.with_output_scale(scale)?);
    let p = net.init(rng);
    let x: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cot: Vec<f64> = (0..output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dot = |y: Vec<f64>| y.iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>();
    let g = net.grad(&p, &x, &cot)?;
    let layout = net.layout();
    let mut worst = fd_error(
        g.as_slice(),
        |v| dot(net.forward(&ParamVector::from_values(layout.clone(), v.to_vec()).expect("len"), &x).expect("shape")),
        p.as_slice(),
    );
    let trace = net.forward_trace(&p, &x)?;
    let gx = net.backward(&p, &trace, &cot, &mut vec![0.0; p.len()]);
    worst = worst.max(fd_error(&gx, |v| dot(net.forward(&p, v).expect("shape")), &x));

    let table = Approximator::Table(TableSpec::new(vec![3, 2], output_dim)?);
    let mut tp = ParamVector::zeros(table.layout());
    tp.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let cell = [rng.random_range(0..3) as f64, rng.random_range(0..2) as f64];
    let tg = table.grad(&tp, &cell, &cot)?;
    let tl = table.layout();
    worst = worst.max(fd_error(
        tg.as_slice(),
        |v| dot(table.forward(&ParamVector::from_values(tl.clone(), v.to_vec()).expect("len"), &cell).expect("shape")),
        tp.as_slice(),
    ));
    Ok(worst)
}

fn fd_heads(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(2..=5);
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let j = rng.random_range(0..k);
    let mut worst = fd_error(&categorical_log_prob_grad(&logits, j), |z| categorical_log_prob(z, j), &logits);
    let dim = rng.random_range(1..=3);
    let head = GaussianHead::new(dim, false);
    let out: Vec<f64> = (0..2 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    worst = worst.max(fd_error(
        &head.base_log_prob_grad(&out, &u),
        |o| head.base_log_prob(&head.params(o), &u),
        &out,
    ));
    worst
}

fn small_neural_nets(rng: &mut ChaCha8Rng) -> Result<VmbpoNets> {
    let kind = NetKind::Neural {
        state_dim: 2,
        action_dim: 1,
        action_bound: 2.0,
    };
    VmbpoNets::new(kind, &[4], Activation::Tanh, rng)
}

fn random_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Which network an update trains.
#[derive(Clone, Copy)]
enum Trained {
    Dynamics,
    LogRatio,
    ActionValue,
    Value,
    Variational,
    Policy,
}

fn trained_params(nets: &mut VmbpoNets, which: Trained) -> &mut ParamVector {
    match which {
        Trained::Dynamics => &mut nets.dynamics.net.params,
        Trained::LogRatio => &mut nets.log_ratio.params,
        Trained::ActionValue => &mut nets.action_value.params,
        Trained::Value => &mut nets.value.params,
        Trained::Variational => &mut nets.variational.net.params,
        Trained::Policy => &mut nets.policy.net.params,
    }
}

fn trained_gradient(nets: &VmbpoNets, which: Trained) -> Vec<f64> {
    match which {
        Trained::Dynamics => nets.dynamics.net.last_gradient().to_vec(),
        Trained::LogRatio => nets.log_ratio.last_gradient().to_vec(),
        Trained::ActionValue => nets.action_value.last_gradient().to_vec(),
        Trained::Value => nets.value.last_gradient().to_vec(),
        Trained::Variational => nets.variational.net.last_gradient().to_vec(),
        Trained::Policy => nets.policy.net.last_gradient().to_vec(),
    }
}

/// Compares the gradient recorded by a zero-step update with finite
/// differences of the loss it reports.
fn fd_update<F>(nets: &VmbpoNets, which: Trained, update: F) -> Result<f64>
where
    F: Fn(&mut VmbpoNets) -> Result<f64>,
{
    let mut probe = nets.clone();
    update(&mut probe)?;
    let analytic = trained_gradient(&probe, which);
    let x0 = trained_params(&mut probe, which).as_slice().to_vec();
    let numeric = finite_difference(
        |v| {
            let mut n = nets.clone();
            trained_params(&mut n, which).as_mut_slice().copy_from_slice(v);
            update(&mut n).expect("loss stays finite near the probe point")
        },
        &x0,
        FD_STEP,
    );
    Ok(max_relative_error(&analytic, &numeric, FD_FLOOR))
}

fn fd_losses(rng: &mut ChaCha8Rng) -> Result<f64> {
    let nets = small_neural_nets(rng)?;
    let n = 4;
    let real: Vec<Transition> = (0..n)
        .map(|_| Transition {
            state: random_vec(2, -1.0, 1.0, rng),
            action: random_vec(1, -0.9, 0.9, rng),
            reward: rng.random_range(-1.0..1.0),
            next_state: random_vec(2, -1.0, 1.0, rng),
            terminal: rng.random_bool(0.2),
            source: Source::Real,
        })
        .collect();
    let synthetic: Vec<Transition> = real
        .iter()
        .map(|t| Transition {
            next_state: random_vec(2, -1.0, 1.0, rng),
            source: Source::Synthetic,
            ..t.clone()
        })
        .collect();
    let w = random_vec(n, 0.1, 1.0, rng);
    let pairs: Vec<StateAction> = real
        .iter()
        .map(|t| StateAction {
            state: t.state.clone(),
            action: t.action.clone(),
        })
        .collect();
    let states: Vec<Vec<f64>> = real.iter().map(|t| t.state.clone()).collect();
    let noise: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal)]).collect();
    let s = LossSettings {
        eta: 0.7,
        discount: 0.95,
        ..Default::default()
    };
    let lambda = rng.random_range(0.0..2.0);
    let penalty = rng.random_range(0.0..0.5);

    let mut worst: f64 = 0.0;
    worst = worst.max(fd_update(&nets, Trained::Dynamics, |m| update_dynamics(m, &real, &w, &s, 0.0, 0))?);
    worst = worst.max(fd_update(&nets, Trained::LogRatio, |m| {
        update_log_ratio(m, &real, &w, &synthetic, &w, &s, 0.0, 0)
    })?);
    worst = worst.max(fd_update(&nets, Trained::ActionValue, |m| update_q(m, &synthetic, &w, &s, 0.0, 0))?);
    worst = worst.max(fd_update(&nets, Trained::ActionValue, |m| update_q_exp_td(m, &real, &w, &s, 0.0, 0))?);
    worst = worst.max(fd_update(&nets, Trained::Value, |m| update_v(m, &pairs, &w, 0.0, 0))?);
    worst = worst.max(fd_update(&nets, Trained::Value, |m| update_v_expected(m, &states, &w, &noise, 0.0, 0))?);
    worst = worst.max(fd_update(&nets, Trained::Variational, |m| update_actor(m, &states, &w, &noise, penalty, 0.0, 0))?);
    // The KL anchor is a perturbed copy so the penalty has a nonzero gradient.
    let mut previous = nets.policy.clone();
    for v in previous.net.params.as_mut_slice() {
        *v += rng.random_range(-0.2..0.2);
    }
    worst = worst.max(fd_update(&nets, Trained::Policy, |m| m_step_map(m, &previous, &pairs, &w, lambda, 0.0, 0))?);

    let twist = make_twist2();
    let tab = random_tabular_nets(&twist, rng)?;
    let (batch, bw) = exhaustive_batch(&twist, Source::Real, |_| 1.0, |_, _| 1.0, |x, a, y| twist.transition(x, a, y));
    worst = worst.max(fd_update(&tab, Trained::Dynamics, |m| update_dynamics(m, &batch, &bw, &s, 0.0, 0))?);

    let chain = make_chain();
    let tab = random_tabular_nets(&chain, rng)?;
    let states = vec![vec![0.0]];
    let one = vec![1.0];
    let chain_pairs: Vec<StateAction> = (0..2)
        .map(|a| StateAction {
            state: vec![0.0],
            action: vec![a as f64],
        })
        .collect();
    let pw = vec![0.3, 0.7];
    worst = worst.max(fd_update(&tab, Trained::Variational, |m| update_actor(m, &states, &one, &[], 0.0, 0.0, 0))?);
    worst = worst.max(fd_update(&tab, Trained::Value, |m| update_v_expected(m, &states, &one, &[], 0.0, 0))?);
    let mut previous = tab.policy.clone();
    previous.net.params.as_mut_slice().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    worst = worst.max(fd_update(&tab, Trained::Policy, |m| {
        m_step_map(m, &previous, &chain_pairs, &pw, lambda, 0.0, 0)
    })?);
    Ok(worst)
}

fn tabular_nets(mdp: &FiniteMdp, rng: &mut ChaCha8Rng) -> Result<VmbpoNets> {
    let kind = NetKind::Tabular {
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
    };
    VmbpoNets::new(kind, &[], Activation::Tanh, rng)
}

fn random_tabular_nets(mdp: &FiniteMdp, rng: &mut ChaCha8Rng) -> Result<VmbpoNets> {
    let mut nets = tabular_nets(mdp, rng)?;
    for net in [
        &mut nets.dynamics.net,
        &mut nets.variational.net,
        &mut nets.policy.net,
        &mut nets.log_ratio,
        &mut nets.value,
        &mut nets.action_value,
        &mut nets.target_value,
        &mut nets.target_action_value,
    ] {
        net.params.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    Ok(nets)
}

/// Steps and learning rate for each tabular sanity case.
const CHAIN_STEPS: usize = 4000;
const CHAIN_LR: f64 = 0.02;

/// `ln(e/2 + 1/2)`: the soft value of a uniform choice between returns 1 and 0.
pub fn soft_value_one_zero() -> f64 {
    (0.5 * std::f64::consts::E + 0.5).ln()
}

/// `e / (1 + e)`: the twisted probability of the rewarded branch.
pub fn twisted_one_zero() -> f64 {
    std::f64::consts::E / (1.0 + std::f64::consts::E)
}

/// Each sampled update run alone on exhaustive batches of TWIST2 or CHAIN2
/// with its inputs fixed at their exact values; returns `(case, error)` with
/// total variation for distributions and absolute error for values.
pub fn tabular_chain() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = LossSettings::default();
    let soft = soft_value_one_zero();
    let tw = twisted_one_zero();
    let mut out = Vec::new();

    // TWIST2: V'(g) = 1, V'(b) = 0, so q_d(g) = e/(1+e).
    let twist = make_twist2();
    let qd_row = [0.0, tw, 1.0 - tw, 0.0];
    let twist_nets = |rng: &mut ChaCha8Rng| -> Result<VmbpoNets> {
        let mut n = tabular_nets(&twist, rng)?;
        set_table_cell(&mut n.target_value, &[1], &[1.0])?;
        set_table_cell(&mut n.value, &[1], &[1.0])?;
        set_table_cell(&mut n.target_action_value, &[0, 0], &[soft])?;
        Ok(n)
    };
    let qd = |x: usize, a: usize, y: usize| if x == 0 { qd_row[y] } else { twist.transition(x, a, y) };
    let only_x = |x: usize| if x == 0 { 1.0 } else { 0.0 };

    let mut n = twist_nets(&mut rng)?;
    let (real, rw) = exhaustive_batch(&twist, Source::Real, only_x, |_, _| 1.0, |x, a, y| twist.transition(x, a, y));
    update_dynamics(&mut n, &real, &rw, &s, CHAIN_LR, CHAIN_STEPS)?;
    out.push(("twist2_dynamics", total_variation(&n.dynamics.probs(&[0.0], &[0.0]), &qd_row)));

    let mut n = twist_nets(&mut rng)?;
    let (syn, sw) = exhaustive_batch(&twist, Source::Synthetic, only_x, |_, _| 1.0, qd);
    update_log_ratio(&mut n, &real, &rw, &syn, &sw, &s, CHAIN_LR, CHAIN_STEPS)?;
    let nu_g = n.nu(&[0.0], &[0.0], &[1.0]);
    let nu_b = n.nu(&[0.0], &[0.0], &[2.0]);
    out.push((
        "twist2_log_ratio",
        (nu_g - (tw / 0.5).ln()).abs().max((nu_b - ((1.0 - tw) / 0.5).ln()).abs()),
    ));

    let mut n = twist_nets(&mut rng)?;
    set_table_cell(&mut n.log_ratio, &[0, 0, 1], &[(tw / 0.5).ln()])?;
    set_table_cell(&mut n.log_ratio, &[0, 0, 2], &[((1.0 - tw) / 0.5).ln()])?;
    update_q(&mut n, &syn, &sw, &s, CHAIN_LR, CHAIN_STEPS)?;
    out.push(("twist2_q", (n.q(&[0.0], &[0.0]) - soft).abs()));

    // CHAIN2 with Q = (1, 0) and a uniform baseline.
    let chain = make_chain();
    let chain_nets = |rng: &mut ChaCha8Rng| -> Result<VmbpoNets> {
        let mut n = tabular_nets(&chain, rng)?;
        set_table_cell(&mut n.action_value, &[0, 0], &[1.0])?;
        set_table_cell(&mut n.action_value, &[0, 1], &[0.0])?;
        Ok(n)
    };
    let twisted = [tw, 1.0 - tw];
    let states = vec![vec![0.0]];
    let one = vec![1.0];
    let pairs: Vec<StateAction> = (0..2)
        .map(|a| StateAction {
            state: vec![0.0],
            action: vec![a as f64],
        })
        .collect();

    let mut n = chain_nets(&mut rng)?;
    set_table_cell(&mut n.variational.net, &[0], &[1.0, 0.0])?;
    update_v(&mut n, &pairs, &twisted, CHAIN_LR, CHAIN_STEPS)?;
    out.push(("chain2_v", (n.v(&[0.0]) - soft).abs()));

    let mut n = chain_nets(&mut rng)?;
    set_table_cell(&mut n.variational.net, &[0], &[1.0, 0.0])?;
    update_v_expected(&mut n, &states, &one, &[], CHAIN_LR, CHAIN_STEPS)?;
    out.push(("chain2_v_expected", (n.v(&[0.0]) - soft).abs()));

    let mut n = chain_nets(&mut rng)?;
    update_actor(&mut n, &states, &one, &[], 0.0, CHAIN_LR, CHAIN_STEPS)?;
    out.push(("chain2_actor", total_variation(&n.variational.probs(&[0.0]), &twisted)));

    let mut n = tabular_nets(&chain, &mut rng)?;
    let (real, rw) = exhaustive_batch(&chain, Source::Real, |_| 1.0, |_, _| 1.0, |x, a, y| chain.transition(x, a, y));
    update_q_exp_td(&mut n, &real, &rw, &s, CHAIN_LR, CHAIN_STEPS)?;
    out.push((
        "chain2_exp_td",
        (n.q(&[0.0], &[0.0]) - 1.0).abs().max(n.q(&[0.0], &[1.0]).abs()),
    ));

    let mut n = tabular_nets(&chain, &mut rng)?;
    m_step_update(&mut n, MStepMode::Map, &pairs, &twisted, 0.0, CHAIN_LR, CHAIN_STEPS)?;
    out.push(("chain2_m_step", total_variation(&n.policy.probs(&[0.0]), &twisted)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> CheckSettings {
        CheckSettings { seed: 3, instances: 4 }
    }

    #[test]
    fn every_named_check_passes() {
        let names: Vec<String> = CHECK_NAMES.iter().map(|s| s.to_string()).collect();
        for r in run_checks(&names, &quick(), &Hooks::default()).unwrap() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn injected_faults_are_caught() {
        for (fault, check) in [("twist_policy", "lemma6_policy"), ("twist_dynamics", "lemma6_dynamics")] {
            let hooks = Hooks::with_fault(fault).unwrap();
            let r = run_check(check, &quick(), &hooks).unwrap();
            assert!(!r.passed, "{fault} went unnoticed: {}", r.detail);
        }
        assert!(Hooks::with_fault("nothing").is_err());
    }

    #[test]
    fn unknown_check_is_a_config_error() {
        assert!(matches!(
            run_check("bogus", &quick(), &Hooks::default()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn closed_forms() {
        assert!((soft_value_one_zero() - 0.620115).abs() < 1e-6);
        assert!((twisted_one_zero() - 0.731059).abs() < 1e-6);
    }
}
