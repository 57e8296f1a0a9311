//! E-step building blocks: the Q/V identities, exponentially twisted
//! posteriors, the induced and optimal operators, the ELBO and the exact
//! optimality log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{solve_chain, walk_trajectories, FiniteMdp, Trajectory, ENUMERATION_BUDGET};
use crate::tables::{ActionValueFunction, TabularDynamics, TabularPolicy, Temperature, ValueFunction};
use crate::util::{log_weighted_sum_exp, xlogxy, LogSumExp};

/// How the inner expectation over next states is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorMode {
    /// Maximize over `q_d` explicitly through the twisted kernel.
    ModelBased,
    /// Fold the inner maximization into `Q` via log-sum-exp.
    ModelFree,
}

/// `log Σ_i base_i exp(w_i)`, over the support of `base`.
pub fn log_partition(base: &[f64], log_weights: &[f64]) -> f64 {
    log_weighted_sum_exp(base, log_weights)
}

/// `base_i exp(w_i) / Σ_j base_j exp(w_j)`; zero-mass entries stay zero.
pub fn twist_row(base: &[f64], log_weights: &[f64]) -> Vec<f64> {
    let max = base
        .iter()
        .zip(log_weights)
        .filter(|(b, _)| **b > 0.0)
        .map(|(_, w)| *w)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = base
        .iter()
        .zip(log_weights)
        .map(|(&b, &w)| if b > 0.0 { b * (w - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = out.iter().sum();
    for p in &mut out {
        *p /= s;
    }
    out
}

/// `Q(x,a) = eta r(x,a) + log E_{x'~p}[exp V(x')]`; terminal rows are zero.
pub fn q_from_v(mdp: &FiniteMdp, eta: Temperature, v: &ValueFunction) -> ActionValueFunction {
    let mut q = ActionValueFunction::zeros(mdp.n_states(), mdp.n_actions());
    for x in mdp.nonterminal_states() {
        for a in 0..mdp.n_actions() {
            let next = log_partition(mdp.next_row(x, a), v.as_slice());
            q.set(x, a, eta.get() * mdp.reward(x, a) + next);
        }
    }
    q
}

/// `V(x) = log E_{a~pi}[exp Q(x,a)]`, forced to zero on terminals.
pub fn softmax_value(mdp: &FiniteMdp, policy: &TabularPolicy, q: &ActionValueFunction) -> ValueFunction {
    let values = (0..mdp.n_states())
        .map(|x| {
            if mdp.is_terminal(x) {
                0.0
            } else {
                log_partition(policy.row(x), q.row(x))
            }
        })
        .collect();
    ValueFunction::new(mdp, values).expect("shape follows the MDP")
}

/// Exponential twist of the true kernel by `exp V`.
pub fn twist_dynamics(mdp: &FiniteMdp, v: &ValueFunction) -> TabularDynamics {
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let mut probs = Vec::with_capacity(n * m * n);
    for x in 0..n {
        for a in 0..m {
            if mdp.is_terminal(x) {
                probs.extend_from_slice(mdp.next_row(x, a));
            } else {
                probs.extend(twist_row(mdp.next_row(x, a), v.as_slice()));
            }
        }
    }
    TabularDynamics::from_flat(n, m, probs)
}

/// Exponential twist of the baseline policy by `exp Q`.
pub fn twist_policy(baseline: &TabularPolicy, q: &ActionValueFunction) -> TabularPolicy {
    let n = baseline.n_states();
    let m = baseline.n_actions();
    let mut probs = Vec::with_capacity(n * m);
    for x in 0..n {
        probs.extend(twist_row(baseline.row(x), q.row(x)));
    }
    TabularPolicy::from_flat(n, m, probs)
}

/// `q_c(a|x) > 0` must imply `pi(a|x) > 0` on nonterminal states.
pub fn check_absolute_continuity(mdp: &FiniteMdp, baseline: &TabularPolicy, q_c: &TabularPolicy) -> Result<()> {
    for x in mdp.nonterminal_states() {
        for a in 0..mdp.n_actions() {
            if q_c.prob(x, a) > 0.0 && baseline.prob(x, a) == 0.0 {
                return Err(Error::SupportViolation(format!(
                    "KL(q_c||pi) diverges: q_c({a}|{x}) > 0 where pi = 0"
                )));
            }
        }
    }
    Ok(())
}

/// One application of the `q_c`-induced operator.
pub fn apply_induced_operator(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    q_c: &TabularPolicy,
    v: &ValueFunction,
    mode: OperatorMode,
) -> Result<ValueFunction> {
    check_absolute_continuity(mdp, baseline, q_c)?;
    Ok(induced_operator_unchecked(mdp, eta, baseline, q_c, v, mode))
}

pub(crate) fn induced_operator_unchecked(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    q_c: &TabularPolicy,
    v: &ValueFunction,
    mode: OperatorMode,
) -> ValueFunction {
    let mut out = vec![0.0; mdp.n_states()];
    for x in mdp.nonterminal_states() {
        let mut total = 0.0;
        for a in 0..mdp.n_actions() {
            let qa = q_c.prob(x, a);
            if qa == 0.0 {
                continue;
            }
            let continuation = match mode {
                OperatorMode::ModelFree => log_partition(mdp.next_row(x, a), v.as_slice()),
                OperatorMode::ModelBased => twisted_continuation(mdp.next_row(x, a), v.as_slice()),
            };
            total += qa * (eta.get() * mdp.reward(x, a) + continuation) - xlogxy(qa, baseline.prob(x, a));
        }
        out[x] = total;
    }
    ValueFunction::new(mdp, out).expect("shape follows the MDP")
}

/// `E_{q_d}[V - log(q_d/p)]` at the maximizing `q_d` (the twisted row).
fn twisted_continuation(p_row: &[f64], v: &[f64]) -> f64 {
    let qd = twist_row(p_row, v);
    qd.iter()
        .zip(p_row)
        .zip(v)
        .filter(|((q, _), _)| **q > 0.0)
        .map(|((&q, &p), &vy)| q * vy - xlogxy(q, p))
        .sum()
}

/// One application of the optimal operator. The model-free form is the
/// closed-form `log E_{pi,p} exp(eta r + V')`; the model-based form evaluates
/// the induced operator at the twisted maximizers.
pub fn apply_optimal_operator(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    v: &ValueFunction,
    mode: OperatorMode,
) -> ValueFunction {
    match mode {
        OperatorMode::ModelFree => {
            let q = q_from_v(mdp, eta, v);
            softmax_value(mdp, baseline, &q)
        }
        OperatorMode::ModelBased => {
            let q = q_from_v(mdp, eta, v);
            let q_c = twist_policy(baseline, &q);
            induced_operator_unchecked(mdp, eta, baseline, &q_c, v, OperatorMode::ModelBased)
        }
    }
}

fn enumeration_horizon(mdp: &FiniteMdp, horizon: Option<usize>) -> Result<usize> {
    match horizon {
        Some(h) => Ok(h),
        None if mdp.is_acyclic() => Ok(mdp.n_states()),
        None => Err(Error::InvalidArgument(
            "MDP has cycles; give an explicit enumeration horizon".into(),
        )),
    }
}

fn check_elbo_inputs(
    mdp: &FiniteMdp,
    q_c: &TabularPolicy,
    q_d: &TabularDynamics,
    baseline: &TabularPolicy,
) -> Result<()> {
    mdp.check_policy_shape(q_c)?;
    mdp.check_policy_shape(baseline)?;
    check_absolute_continuity(mdp, baseline, q_c)?;
    q_d.check_against(mdp)
}

/// Per-step ELBO integrand `eta r - log(q_c/pi) - log(q_d/p)` along a trajectory.
fn trajectory_elbo_terms(
    mdp: &FiniteMdp,
    eta: Temperature,
    q_c: &TabularPolicy,
    q_d: &TabularDynamics,
    baseline: &TabularPolicy,
    t: &Trajectory,
) -> (f64, f64) {
    let mut log_q = mdp.initial()[t.states[0]].ln();
    let mut value = 0.0;
    for i in 0..t.len() {
        let (x, a, y) = (t.states[i], t.actions[i], t.states[i + 1]);
        let (qc, qd) = (q_c.prob(x, a), q_d.prob(x, a, y));
        log_q += qc.ln() + qd.ln();
        value += eta.get() * mdp.reward(x, a) - (qc / baseline.prob(x, a)).ln() - (qd / mdp.transition(x, a, y)).ln();
    }
    (log_q, value)
}

/// ELBO `J(q; pi)` by exhaustive enumeration of trajectories under `(p0, q_d, q_c)`.
///
/// `horizon = None` requires an acyclic MDP and enumerates completely.
pub fn elbo(
    mdp: &FiniteMdp,
    eta: Temperature,
    q_c: &TabularPolicy,
    q_d: &TabularDynamics,
    baseline: &TabularPolicy,
    horizon: Option<usize>,
) -> Result<f64> {
    check_elbo_inputs(mdp, q_c, q_d, baseline)?;
    let max_len = enumeration_horizon(mdp, horizon)?;
    let mut total = 0.0;
    walk_trajectories(
        mdp,
        max_len,
        ENUMERATION_BUDGET,
        &|x, a| q_c.prob(x, a) > 0.0,
        &|x, a, y| q_d.prob(x, a, y),
        &mut |t| {
            let (log_q, value) = trajectory_elbo_terms(mdp, eta, q_c, q_d, baseline, t);
            total += log_q.exp() * value;
        },
    )?;
    Ok(total)
}

/// ELBO through the linear system `W = c + P_q W` on nonterminal states.
pub fn elbo_exact(
    mdp: &FiniteMdp,
    eta: Temperature,
    q_c: &TabularPolicy,
    q_d: &TabularDynamics,
    baseline: &TabularPolicy,
) -> Result<f64> {
    check_elbo_inputs(mdp, q_c, q_d, baseline)?;
    let per_state: Vec<f64> = (0..mdp.n_states())
        .map(|x| {
            if mdp.is_terminal(x) {
                return 0.0;
            }
            (0..mdp.n_actions())
                .filter(|&a| q_c.prob(x, a) > 0.0)
                .map(|a| {
                    let qa = q_c.prob(x, a);
                    let kl_d: f64 = q_d
                        .row(x, a)
                        .iter()
                        .zip(mdp.next_row(x, a))
                        .map(|(&q, &p)| xlogxy(q, p))
                        .sum();
                    qa * (eta.get() * mdp.reward(x, a) - kl_d) - xlogxy(qa, baseline.prob(x, a))
                })
                .sum()
        })
        .collect();
    let w = solve_chain(mdp, |x, a| q_c.prob(x, a), |x, a, y| q_d.prob(x, a, y), &per_state)?;
    Ok(mdp.initial().iter().zip(&w).map(|(p, w)| p * w).sum())
}

/// `log E_{xi~p_pi}[exp(eta * return(xi))]` by enumeration with a
/// max-shifted log-sum-exp over trajectories.
pub fn log_likelihood(
    mdp: &FiniteMdp,
    eta: Temperature,
    baseline: &TabularPolicy,
    horizon: Option<usize>,
) -> Result<f64> {
    mdp.check_policy_shape(baseline)?;
    let max_len = enumeration_horizon(mdp, horizon)?;
    let mut acc = LogSumExp::new();
    walk_trajectories(
        mdp,
        max_len,
        ENUMERATION_BUDGET,
        &|x, a| baseline.prob(x, a) > 0.0,
        &|x, a, y| mdp.transition(x, a, y),
        &mut |t| {
            let lp = crate::mdp::trajectory_log_prob(mdp, baseline, t);
            acc.push(lp + eta.get() * t.total_reward());
        },
    )?;
    Ok(acc.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_chain, make_twist2};

    const E_TWIST: f64 = 0.731_058_578_630_004_9; // e / (e + 1)

    fn eta1() -> Temperature {
        Temperature::new(1.0).unwrap()
    }

    fn lse_half() -> f64 {
        (0.5 * 1f64.exp() + 0.5).ln()
    }

    #[test]
    fn q_from_zero_value_on_chain2() {
        let mdp = make_chain();
        let q = q_from_v(&mdp, eta1(), &ValueFunction::zeros(2));
        assert_eq!(q.row(0), &[1.0, 0.0]);
        let q2 = q_from_v(&mdp, Temperature::new(2.0).unwrap(), &ValueFunction::zeros(2));
        assert_eq!(q2.row(0), &[2.0, 0.0]);
    }

    #[test]
    fn q_from_value_on_twist2() {
        let mdp = make_twist2();
        let v = ValueFunction::new(&mdp, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let q = q_from_v(&mdp, eta1(), &v);
        assert!((q.get(0, 0) - lse_half()).abs() < 1e-15);
        assert!((q.get(0, 0) - 0.620115).abs() < 1e-6);
    }

    #[test]
    fn softmax_value_examples() {
        let mdp = make_chain();
        let q = ActionValueFunction::from_rows(vec![vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let v = softmax_value(&mdp, &TabularPolicy::uniform(2, 2), &q);
        assert!((v.get(0) - lse_half()).abs() < 1e-15);
        assert_eq!(v.get(1), 0.0);

        let c = ActionValueFunction::from_rows(vec![vec![-3.5, -3.5], vec![0.0, 0.0]]).unwrap();
        let v = softmax_value(&mdp, &TabularPolicy::from_rows(vec![vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap(), &c);
        assert!((v.get(0) + 3.5).abs() < 1e-15);

        let det = TabularPolicy::deterministic(2, &[0, 0]);
        assert_eq!(softmax_value(&mdp, &det, &q).get(0), 1.0);
    }

    #[test]
    fn twist_dynamics_examples() {
        let mdp = make_twist2();
        let v = ValueFunction::new(&mdp, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let qd = twist_dynamics(&mdp, &v);
        assert!((qd.prob(0, 0, 1) - E_TWIST).abs() < 1e-15);
        assert_eq!(qd.prob(0, 0, 0), 0.0);
        qd.check_against(&mdp).unwrap();

        let ident = twist_dynamics(&mdp, &ValueFunction::zeros(4));
        assert_eq!(ident.row(0, 0), mdp.next_row(0, 0));

        let shifted = ValueFunction::new(&mdp, vec![7.0, 8.0, 7.0, 0.0]).unwrap();
        let qd2 = twist_dynamics(&mdp, &shifted);
        assert!((qd2.prob(0, 0, 1) - E_TWIST).abs() < 1e-15);
    }

    #[test]
    fn twist_policy_examples() {
        let q = ActionValueFunction::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        let qc = twist_policy(&TabularPolicy::uniform(1, 2), &q);
        assert!((qc.prob(0, 0) - E_TWIST).abs() < 1e-15);

        let pi = TabularPolicy::from_rows(vec![vec![0.3, 0.7]]).unwrap();
        let flat = ActionValueFunction::from_rows(vec![vec![2.0, 2.0]]).unwrap();
        let same = twist_policy(&pi, &flat);
        assert!((same.prob(0, 0) - 0.3).abs() < 1e-15);

        let no_a1 = TabularPolicy::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        assert_eq!(twist_policy(&no_a1, &q).prob(0, 1), 0.0);
    }

    #[test]
    fn induced_operator_on_chain2() {
        let mdp = make_chain();
        let pi = TabularPolicy::uniform(2, 2);
        let v0 = ValueFunction::zeros(2);
        for mode in [OperatorMode::ModelFree, OperatorMode::ModelBased] {
            let t = apply_induced_operator(&mdp, eta1(), &pi, &pi, &v0, mode).unwrap();
            assert!((t.get(0) - 0.5).abs() < 1e-15);
            let qc = twist_policy(&pi, &q_from_v(&mdp, eta1(), &v0));
            let t = apply_induced_operator(&mdp, eta1(), &pi, &qc, &v0, mode).unwrap();
            assert!((t.get(0) - lse_half()).abs() < 1e-15);
        }
    }

    #[test]
    fn induced_operator_rejects_divergent_q_c() {
        let mdp = make_chain();
        let pi = TabularPolicy::deterministic(2, &[0, 0]);
        let qc = TabularPolicy::uniform(2, 2);
        let r = apply_induced_operator(&mdp, eta1(), &pi, &qc, &ValueFunction::zeros(2), OperatorMode::ModelFree);
        assert!(matches!(r, Err(Error::SupportViolation(_))));
    }

    #[test]
    fn optimal_operator_examples() {
        let mdp = make_chain();
        let pi = TabularPolicy::uniform(2, 2);
        for mode in [OperatorMode::ModelFree, OperatorMode::ModelBased] {
            let t = apply_optimal_operator(&mdp, eta1(), &pi, &ValueFunction::zeros(2), mode);
            assert!((t.get(0) - lse_half()).abs() < 1e-15);
        }
        let mut flat = make_chain();
        flat.set_reward(0, 0, 0.0);
        let t = apply_optimal_operator(&flat, eta1(), &pi, &ValueFunction::zeros(2), OperatorMode::ModelFree);
        assert_eq!(t.get(0), 0.0);
    }

    #[test]
    fn chain2_elbo_and_likelihood() {
        let mdp = make_chain();
        let pi = TabularPolicy::uniform(2, 2);
        let p = TabularDynamics::from_mdp(&mdp);
        let zero_kl = elbo(&mdp, eta1(), &pi, &p, &pi, None).unwrap();
        assert!((zero_kl - 0.5).abs() < 1e-15);

        let qc = twist_policy(&pi, &q_from_v(&mdp, eta1(), &ValueFunction::zeros(2)));
        let tight = elbo(&mdp, eta1(), &qc, &p, &pi, None).unwrap();
        assert!((tight - lse_half()).abs() < 1e-15);
        assert!((elbo_exact(&mdp, eta1(), &qc, &p, &pi).unwrap() - tight).abs() < 1e-15);

        let ll = log_likelihood(&mdp, eta1(), &pi, None).unwrap();
        assert!((ll - lse_half()).abs() < 1e-15);
    }

    #[test]
    fn elbo_support_violation() {
        let mdp = make_chain();
        let pi = TabularPolicy::deterministic(2, &[1, 0]);
        let p = TabularDynamics::from_mdp(&mdp);
        let r = elbo(&mdp, eta1(), &TabularPolicy::uniform(2, 2), &p, &pi, None);
        assert!(matches!(r, Err(Error::SupportViolation(_))));
    }

    #[test]
    fn zero_reward_likelihood_vanishes() {
        let mut mdp = make_twist2();
        mdp.set_reward(0, 0, 0.0);
        for eta in [0.1, 1.0, 7.0] {
            let ll = log_likelihood(&mdp, Temperature::new(eta).unwrap(), &TabularPolicy::uniform(4, 1), None).unwrap();
            assert!(ll.abs() < 1e-15);
        }
    }

    #[test]
    fn cyclic_mdp_needs_horizon() {
        let mdp = crate::envs::make_gridworld(2).unwrap();
        let pi = TabularPolicy::uniform(4, 4);
        assert!(log_likelihood(&mdp, eta1(), &pi, None).is_err());
        assert!(log_likelihood(&mdp, eta1(), &pi, Some(4)).is_ok());
    }
}
