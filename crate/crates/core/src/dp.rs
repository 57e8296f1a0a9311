//! Exact E-step solvers (model-based/model-free policy and value iteration),
//! the exact M-step and the EM outer loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{occupancy, FiniteMdp};
use crate::tables::{ActionValueFunction, TabularDynamics, TabularPolicy, Temperature, ValueFunction};
use crate::util::{log_weighted_sum_exp, logsumexp, max_abs_diff};
use crate::variational::{
    apply_optimal_operator, check_absolute_continuity, elbo_exact, induced_operator_unchecked, q_from_v,
    twist_dynamics, twist_policy, OperatorMode,
};

/// How policy improvement computes the next variational policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImprovementMode {
    /// The twisted policy, in closed form.
    #[default]
    ClosedForm,
    /// Iterative minimization of `KL(q_c || q_c^Q)` over the simplex.
    KlProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub improvement: ImprovementMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_sweeps: 100_000,
            improvement: ImprovementMode::ClosedForm,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::config("solver.tolerance", "must be a positive real"));
        }
        if self.max_sweeps == 0 {
            return Err(Error::config("solver.max_sweeps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Fixed point of a `q_c`-induced operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub v: ValueFunction,
    pub q: ActionValueFunction,
    pub sweeps: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepSolution {
    pub q_c_star: TabularPolicy,
    pub q_d_star: TabularDynamics,
    pub v_pi: ValueFunction,
    pub q_pi: ActionValueFunction,
    /// PI outer iterations or VI sweeps.
    pub iterations: usize,
    /// `max_x |T[v_pi](x) - v_pi(x)|`.
    pub residual: f64,
    /// Value of each evaluated variational policy, in PI order (empty for VI).
    pub value_trace: Vec<ValueFunction>,
}

impl EStepSolution {
    fn from_value(
        mdp: &FiniteMdp,
        eta: Temperature,
        baseline: &TabularPolicy,
        v_pi: ValueFunction,
        iterations: usize,
        value_trace: Vec<ValueFunction>,
    ) -> Self {
        let q_pi = q_from_v(mdp, eta, &v_pi);
        let t = apply_optimal_operator(mdp, eta, baseline, &v_pi, OperatorMode::ModelFree);
        let residual = max_abs_diff(t.as_slice(), v_pi.as_slice());
        Self {
            q_c_star: twist_policy(baseline, &q_pi),
            q_d_star: twist_dynamics(mdp, &v_pi),
            v_pi,
            q_pi,
            iterations,
            residual,
            value_trace,
        }
    }

    /// `Σ_x p0(x) V_pi(x)`, the optimality log-likelihood of the baseline.
    /// `log Σ_x p0(x) exp V_π(x)`.
    pub fn log_likelihood(&self, mdp: &FiniteMdp) -> f64 {
        log_weighted_sum_exp(mdp.initial(), self.v_pi.as_slice())
    }

    /// `Σ_x p0(x) V_π(x)`, the ELBO at `q*`; equal to the log-likelihood when
    /// `p0` is a point mass.
    pub fn elbo(&self, mdp: &FiniteMdp) -> f64 {
        mdp.initial().iter().zip(self.v_pi.as_slice()).map(|(p, v)| p * v).sum()
    }
}

fn check_inputs(mdp: &FiniteMdp, baseline: &TabularPolicy, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    mdp.ensure_valid()?;
    mdp.check_policy_shape(baseline)?;
    baseline.check()
}

/// Value of `q_c` under the induced operator, by Jacobi sweeps from `V = 0`.
pub fn policy_evaluation(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    q_c: &TabularPolicy,
    mode: OperatorMode,
    cfg: &SolverConfig,
) -> Result<Evaluation> {
    check_inputs(mdp, baseline, cfg)?;
    mdp.check_policy_shape(q_c)?;
    check_absolute_continuity(mdp, baseline, q_c)?;
    mdp.ensure_transient_under(q_c)?;
    evaluate_from(mdp, eta, baseline, q_c, mode, cfg, ValueFunction::zeros(mdp.n_states()))
}

fn evaluate_from(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    q_c: &TabularPolicy,
    mode: OperatorMode,
    cfg: &SolverConfig,
    mut v: ValueFunction,
) -> Result<Evaluation> {
    let mut residual = f64::INFINITY;
    for sweep in 1..=cfg.max_sweeps {
        let next = induced_operator_unchecked(mdp, eta, baseline, q_c, &v, mode);
        residual = max_abs_diff(next.as_slice(), v.as_slice());
        v = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= cfg.tolerance {
            let q = q_from_v(mdp, eta, &v);
            return Ok(Evaluation {
                v,
                q,
                sweeps: sweep,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "policy evaluation",
        iterations: cfg.max_sweeps,
        residual,
    })
}

/// Next variational policy from the action values of the current one.
pub fn policy_improvement(baseline: &TabularPolicy, q: &ActionValueFunction, cfg: &SolverConfig) -> TabularPolicy {
    match cfg.improvement {
        ImprovementMode::ClosedForm => twist_policy(baseline, q),
        ImprovementMode::KlProjection => kl_projection(baseline, q),
    }
}

/// Entropic mirror descent on `KL(q || pi exp(Q) / Z)` per state, started at
/// `pi`. Each step halves the log-space distance to the minimizer.
fn kl_projection(baseline: &TabularPolicy, q: &ActionValueFunction) -> TabularPolicy {
    const STEP: f64 = 0.5;
    const MAX_STEPS: usize = 500;
    let n = baseline.n_states();
    let m = baseline.n_actions();
    let mut probs = Vec::with_capacity(n * m);
    for x in 0..n {
        let pi = baseline.row(x);
        let support: Vec<usize> = (0..m).filter(|&a| pi[a] > 0.0).collect();
        let target: Vec<f64> = support.iter().map(|&a| pi[a].ln() + q.get(x, a)).collect();
        let mut logq: Vec<f64> = support.iter().map(|&a| pi[a].ln()).collect();
        for _ in 0..MAX_STEPS {
            let mut next: Vec<f64> = logq
                .iter()
                .zip(&target)
                .map(|(l, t)| (1.0 - STEP) * l + STEP * t)
                .collect();
            let z = logsumexp(&next);
            for l in &mut next {
                *l -= z;
            }
            let delta = max_abs_diff(&next, &logq);
            logq = next;
            if delta < 1e-15 {
                break;
            }
        }
        let mut row = vec![0.0; m];
        for (&a, l) in support.iter().zip(&logq) {
            row[a] = l.exp();
        }
        let s: f64 = row.iter().sum();
        probs.extend(row.into_iter().map(|p| p / s));
    }
    TabularPolicy::from_flat(n, m, probs)
}

/// Policy iteration with the twisted-dynamics (model-based) induced operator.
pub fn model_based_pi(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    cfg: &SolverConfig,
) -> Result<EStepSolution> {
    policy_iteration(mdp, eta, baseline, OperatorMode::ModelBased, cfg)
}

/// Policy iteration with the log-sum-exp (model-free) induced operator;
/// `q_d` is only formed at the end.
pub fn model_free_pi(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    cfg: &SolverConfig,
) -> Result<EStepSolution> {
    policy_iteration(mdp, eta, baseline, OperatorMode::ModelFree, cfg)
}

pub fn policy_iteration(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    mode: OperatorMode,
    cfg: &SolverConfig,
) -> Result<EStepSolution> {
    check_inputs(mdp, baseline, cfg)?;
    mdp.ensure_transient_under(baseline)?;
    let mut q_c = baseline.clone();
    let mut v = ValueFunction::zeros(mdp.n_states());
    let mut trace = Vec::new();
    let mut change = f64::INFINITY;
    for k in 1..=cfg.max_sweeps {
        let ev = evaluate_from(mdp, eta, baseline, &q_c, mode, cfg, v)?;
        trace.push(ev.v.clone());
        let next = policy_improvement(baseline, &ev.q, cfg);
        change = max_abs_diff(next.as_slice(), q_c.as_slice());
        v = ev.v;
        q_c = next;
        if change < cfg.tolerance {
            return Ok(EStepSolution::from_value(mdp, eta, baseline, v, k, trace));
        }
    }
    Err(Error::NonConvergence {
        what: "policy iteration",
        iterations: cfg.max_sweeps,
        residual: change,
    })
}

/// Value iteration from `V = 0`.
pub fn value_iteration(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    mode: OperatorMode,
    cfg: &SolverConfig,
) -> Result<EStepSolution> {
    value_iteration_from(mdp, eta, baseline, mode, cfg, &ValueFunction::zeros(mdp.n_states()))
}

/// Value iteration from an arbitrary start (terminal entries are reset to 0).
pub fn value_iteration_from(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    mode: OperatorMode,
    cfg: &SolverConfig,
    v0: &ValueFunction,
) -> Result<EStepSolution> {
    check_inputs(mdp, baseline, cfg)?;
    mdp.ensure_transient_under(baseline)?;
    let mut v = ValueFunction::new(mdp, v0.as_slice().to_vec())?;
    let mut residual = f64::INFINITY;
    for sweep in 1..=cfg.max_sweeps {
        let next = apply_optimal_operator(mdp, eta, baseline, &v, mode);
        residual = max_abs_diff(next.as_slice(), v.as_slice());
        v = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= cfg.tolerance {
            return Ok(EStepSolution::from_value(mdp, eta, baseline, v, sweep, Vec::new()));
        }
    }
    Err(Error::NonConvergence {
        what: "value iteration",
        iterations: cfg.max_sweeps,
        residual,
    })
}

/// Exact M-step in the tabular class. With `lambda = 0` this is `q_c*`; with
/// `lambda > 0` each visited state gets the maximizer of
/// `Σ_a q_c*(a|x) log pi(a) - lambda KL(pi_old(.|x) || pi)`, which is the
/// mixture `(q_c* + lambda pi_old) / (1 + lambda)`. Unvisited states keep
/// `pi_old`.
pub fn m_step_exact(
    mdp: &FiniteMdp,
    e_sol: &EStepSolution,
    baseline: &TabularPolicy,
    lambda: f64,
) -> Result<TabularPolicy> {
    if !(lambda >= 0.0) || lambda.is_infinite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(e_sol.q_c_star.clone());
    }
    let q_c = &e_sol.q_c_star;
    let q_d = &e_sol.q_d_star;
    let visits = occupancy(mdp, |x, a| q_c.prob(x, a), |x, a, y| q_d.prob(x, a, y))?;
    let mut out = baseline.clone();
    for x in mdp.nonterminal_states() {
        if visits[x] <= 0.0 {
            continue;
        }
        for (a, p) in out.row_mut(x).iter_mut().enumerate() {
            *p = (q_c.prob(x, a) + lambda * baseline.prob(x, a)) / (1.0 + lambda);
        }
    }
    Ok(out)
}

/// Which exact solver runs the E-step inside [`em_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EStepMethod {
    ValueIteration,
    ModelBasedPi,
    ModelFreePi,
}

impl EStepMethod {
    pub fn solve(
        self,
        mdp: &FiniteMdp,
        eta: Temperature,
        baseline: &TabularPolicy,
        mode: OperatorMode,
        cfg: &SolverConfig,
    ) -> Result<EStepSolution> {
        match self {
            EStepMethod::ValueIteration => value_iteration(mdp, eta, baseline, mode, cfg),
            EStepMethod::ModelBasedPi => model_based_pi(mdp, eta, baseline, cfg),
            EStepMethod::ModelFreePi => model_free_pi(mdp, eta, baseline, cfg),
        }
    }
}

/// One EM iteration: the baseline going in, its E-step solution, the ELBO at
/// that solution and the baseline's optimality log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct EmRecord {
    pub iteration: usize,
    pub baseline: TabularPolicy,
    pub solution: EStepSolution,
    pub elbo: f64,
    pub log_likelihood: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn em_solve(
    mdp: &FiniteMdp,
    eta: Temperature,
    pi0: &TabularPolicy,
    n_em_iters: usize,
    lambda: f64,
    cfg: &SolverConfig,
    method: EStepMethod,
    mode: OperatorMode,
) -> Result<Vec<EmRecord>> {
    let mut pi = pi0.clone();
    let mut out = Vec::with_capacity(n_em_iters);
    for iteration in 0..n_em_iters {
        let solution = method.solve(mdp, eta, &pi, mode, cfg)?;
        let elbo = elbo_exact(mdp, eta, &solution.q_c_star, &solution.q_d_star, &pi)?;
        let log_likelihood = solution.log_likelihood(mdp);
        let next = m_step_exact(mdp, &solution, &pi, lambda)?;
        out.push(EmRecord {
            iteration,
            baseline: pi,
            solution,
            elbo,
            log_likelihood,
        });
        pi = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_chain, make_gridworld};

    const E_TWIST: f64 = 0.731_058_578_630_004_9;

    fn eta1() -> Temperature {
        Temperature::new(1.0).unwrap()
    }

    fn lse_half() -> f64 {
        (0.5 * 1f64.exp() + 0.5).ln()
    }

    #[test]
    fn chain2_policy_evaluation() {
        let mdp = make_chain();
        let pi = TabularPolicy::uniform(2, 2);
        let cfg = SolverConfig::default();
        for mode in [OperatorMode::ModelBased, OperatorMode::ModelFree] {
            let ev = policy_evaluation(&mdp, eta1(), &pi, &pi, mode, &cfg).unwrap();
            assert!((ev.v.get(0) - 0.5).abs() < 1e-15);
            let det = TabularPolicy::deterministic(2, &[0, 0]);
            let ev = policy_evaluation(&mdp, eta1(), &pi, &det, mode, &cfg).unwrap();
            assert!((ev.v.get(0) - (1.0 - 2f64.ln())).abs() < 1e-15);
        }
    }

    #[test]
    fn improvement_modes() {
        let pi = TabularPolicy::uniform(1, 2);
        let q = ActionValueFunction::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        for improvement in [ImprovementMode::ClosedForm, ImprovementMode::KlProjection] {
            let cfg = SolverConfig { improvement, ..Default::default() };
            let qc = policy_improvement(&pi, &q, &cfg);
            assert!((qc.prob(0, 0) - E_TWIST).abs() < 1e-12);
            let flat = ActionValueFunction::from_rows(vec![vec![3.0, 3.0]]).unwrap();
            assert!((policy_improvement(&pi, &flat, &cfg).prob(0, 0) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn chain2_fixed_point() {
        let mdp = make_chain();
        let pi = TabularPolicy::uniform(2, 2);
        let cfg = SolverConfig::default();
        for sol in [
            model_based_pi(&mdp, eta1(), &pi, &cfg).unwrap(),
            model_free_pi(&mdp, eta1(), &pi, &cfg).unwrap(),
            value_iteration(&mdp, eta1(), &pi, OperatorMode::ModelFree, &cfg).unwrap(),
            value_iteration(&mdp, eta1(), &pi, OperatorMode::ModelBased, &cfg).unwrap(),
        ] {
            assert!((sol.q_c_star.prob(0, 0) - E_TWIST).abs() < 1e-12);
            assert!((sol.v_pi.get(0) - lse_half()).abs() < 1e-12);
            assert_eq!(sol.q_d_star.row(0, 0), mdp.next_row(0, 0));
        }
    }

    #[test]
    fn value_iteration_on_chain2_settles_after_one_sweep() {
        let mdp = make_chain();
        let pi = TabularPolicy::uniform(2, 2);
        let sol = value_iteration(&mdp, eta1(), &pi, OperatorMode::ModelFree, &SolverConfig::default()).unwrap();
        // One sweep reaches the fixed point, the second confirms it.
        assert_eq!(sol.iterations, 2);
    }

    #[test]
    fn zero_reward_leaves_everything_untwisted() {
        let mut mdp = make_chain();
        mdp.set_reward(0, 0, 0.0);
        let pi = TabularPolicy::from_rows(vec![vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        let sol = model_based_pi(&mdp, eta1(), &pi, &SolverConfig::default()).unwrap();
        assert!(max_abs_diff(sol.q_c_star.as_slice(), pi.as_slice()) < 1e-15);
        assert_eq!(sol.v_pi.get(0), 0.0);
    }

    #[test]
    fn invalid_tolerance_is_rejected() {
        let cfg = SolverConfig { tolerance: 0.0, ..Default::default() };
        let r = model_free_pi(&make_chain(), eta1(), &TabularPolicy::uniform(2, 2), &cfg);
        assert!(matches!(r, Err(Error::Config { ref field, .. }) if field == "solver.tolerance"));
    }

    #[test]
    fn sweep_cap_reports_non_convergence() {
        let mdp = make_gridworld(3).unwrap();
        let cfg = SolverConfig { max_sweeps: 2, ..Default::default() };
        let r = value_iteration(&mdp, eta1(), &TabularPolicy::uniform(9, 4), OperatorMode::ModelFree, &cfg);
        assert!(matches!(r, Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn m_step_examples() {
        let mdp = make_chain();
        let pi = TabularPolicy::uniform(2, 2);
        let sol = value_iteration(&mdp, eta1(), &pi, OperatorMode::ModelFree, &SolverConfig::default()).unwrap();
        let greedy = m_step_exact(&mdp, &sol, &pi, 0.0).unwrap();
        assert!((greedy.prob(0, 0) - E_TWIST).abs() < 1e-12);
        let stiff = m_step_exact(&mdp, &sol, &pi, 1e7).unwrap();
        assert!(max_abs_diff(stiff.as_slice(), pi.as_slice()) < 1e-6);
        let mid = m_step_exact(&mdp, &sol, &pi, 1.0).unwrap();
        for a in 0..2 {
            let (lo, hi) = {
                let (u, v) = (pi.prob(0, a), sol.q_c_star.prob(0, a));
                (u.min(v), u.max(v))
            };
            assert!(mid.prob(0, a) >= lo && mid.prob(0, a) <= hi);
        }
        assert!(m_step_exact(&mdp, &sol, &pi, -1.0).is_err());
    }

    #[test]
    fn em_on_chain2_ascends() {
        let mdp = make_chain();
        let recs = em_solve(
            &mdp,
            eta1(),
            &TabularPolicy::uniform(2, 2),
            3,
            0.0,
            &SolverConfig::default(),
            EStepMethod::ValueIteration,
            OperatorMode::ModelFree,
        )
        .unwrap();
        assert_eq!(recs.len(), 3);
        for w in recs.windows(2) {
            assert!(w[1].log_likelihood >= w[0].log_likelihood - 1e-12);
        }
        for r in &recs {
            assert!((r.elbo - r.log_likelihood).abs() < 1e-12);
        }
    }

    #[test]
    fn em_without_reward_keeps_the_baseline() {
        let mut mdp = make_chain();
        mdp.set_reward(0, 0, 0.0);
        let pi0 = TabularPolicy::from_rows(vec![vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        let recs = em_solve(
            &mdp,
            eta1(),
            &pi0,
            3,
            0.0,
            &SolverConfig::default(),
            EStepMethod::ModelBasedPi,
            OperatorMode::ModelBased,
        )
        .unwrap();
        for r in &recs {
            assert!(max_abs_diff(r.baseline.as_slice(), pi0.as_slice()) < 1e-15);
        }
    }

    #[test]
    fn gridworld_solvers_agree() {
        let mdp = make_gridworld(3).unwrap();
        let pi = TabularPolicy::uniform(9, 4);
        let cfg = SolverConfig::default();
        let vi = value_iteration(&mdp, eta1(), &pi, OperatorMode::ModelFree, &cfg).unwrap();
        let pi_sol = model_based_pi(&mdp, eta1(), &pi, &cfg).unwrap();
        assert!(max_abs_diff(vi.v_pi.as_slice(), pi_sol.v_pi.as_slice()) < 1e-8);
        assert!(vi.residual <= cfg.tolerance);
    }
}
