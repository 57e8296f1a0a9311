//! Independent reference computations used by the check suites: a generic
//! projected-gradient maximizer over the probability simplex and brute-force
//! trajectory sums.

use crate::error::{Error, Result};
use crate::mdp::{enumerate_trajectories, trajectory_log_prob, FiniteMdp};
use crate::tables::{TabularPolicy, Temperature};
use crate::util::LogSumExp;

/// Euclidean projection onto `{x >= 0, Σ x = 1}` (sort-and-threshold).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumulative += ui;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexMaximum {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Smallest coordinate the maximizer visits; objectives with a log barrier at
/// the faces stay differentiable along the path.
const FLOOR: f64 = 1e-12;

/// Projection onto `{z : Σ z = 1, z_i >= floor}`.
fn project_floored(v: &[f64], floor: f64) -> Vec<f64> {
    let mass = 1.0 - floor * v.len() as f64;
    let shifted: Vec<f64> = v.iter().map(|x| (x - floor) / mass).collect();
    project_to_simplex(&shifted).iter().map(|p| floor + mass * p).collect()
}

/// Maximizes a concave `f` over the simplex restricted to `support`, by
/// projected gradient ascent with Armijo backtracking from the uniform point.
/// Iterates keep every supported coordinate at least `1e-12`.
pub fn maximize_on_simplex<F, G>(f: F, grad: G, support: &[bool], tol: f64, max_iters: usize) -> Result<SimplexMaximum>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let idx: Vec<usize> = (0..support.len()).filter(|&i| support[i]).collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("empty support".into()));
    }
    let n = support.len();
    let embed = |z: &[f64]| {
        let mut full = vec![0.0; n];
        for (k, &i) in idx.iter().enumerate() {
            full[i] = z[k];
        }
        full
    };
    let mut z = vec![1.0 / idx.len() as f64; idx.len()];
    let mut fz = f(&embed(&z));
    let mut step: f64 = 1.0;
    for it in 1..=max_iters {
        let g_full = grad(&embed(&z));
        let g: Vec<f64> = idx.iter().map(|&i| g_full[i]).collect();
        let mut accepted = None;
        let mut s = (step * 2.0).min(1e6);
        while s > 1e-18 {
            let trial: Vec<f64> = z.iter().zip(&g).map(|(zi, gi)| zi + s * gi).collect();
            let cand = project_floored(&trial, FLOOR);
            let f_cand = f(&embed(&cand));
            let moved: f64 = cand.iter().zip(&z).zip(&g).map(|((c, zi), gi)| gi * (c - zi)).sum();
            let dist2: f64 = cand.iter().zip(&z).map(|(c, zi)| (c - zi).powi(2)).sum();
            if f_cand >= fz + moved - dist2 / (2.0 * s) {
                accepted = Some((cand, f_cand));
                break;
            }
            s *= 0.5;
        }
        let Some((cand, f_cand)) = accepted else {
            return Ok(SimplexMaximum {
                argmax: embed(&z),
                value: fz,
                iterations: it,
            });
        };
        step = s;
        let change = cand.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        z = cand;
        fz = f_cand;
        if change < tol {
            return Ok(SimplexMaximum {
                argmax: embed(&z),
                value: fz,
                iterations: it,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "simplex maximizer",
        iterations: max_iters,
        residual: f64::NAN,
    })
}

/// `max_q Σ q_i c_i - KL(q || base)` by [`maximize_on_simplex`].
pub fn max_entropy_regularized(base: &[f64], c: &[f64]) -> Result<SimplexMaximum> {
    let support: Vec<bool> = base.iter().map(|&b| b > 0.0).collect();
    let f = |q: &[f64]| -> f64 {
        q.iter()
            .zip(base)
            .zip(c)
            .filter(|((_, b), _)| **b > 0.0)
            .map(|((&qi, &bi), &ci)| if qi > 0.0 { qi * ci - qi * (qi / bi).ln() } else { 0.0 })
            .sum()
    };
    let g = |q: &[f64]| -> Vec<f64> {
        q.iter()
            .zip(base)
            .zip(c)
            .map(|((&qi, &bi), &ci)| {
                if bi > 0.0 {
                    ci - (qi.max(1e-300) / bi).ln() - 1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    maximize_on_simplex(f, g, &support, 1e-10, 200_000)
}

/// `log Σ_ξ P_pi(ξ) exp(eta * return(ξ))` by listing every trajectory.
pub fn brute_force_log_likelihood(mdp: &FiniteMdp, eta: Temperature, policy: &TabularPolicy) -> Result<f64> {
    let mut acc = LogSumExp::new();
    for t in enumerate_trajectories(mdp, mdp.n_states())? {
        let lp = trajectory_log_prob(mdp, policy, &t);
        if lp.is_finite() {
            acc.push(lp + eta.get() * t.total_reward());
        }
    }
    Ok(acc.value())
}
