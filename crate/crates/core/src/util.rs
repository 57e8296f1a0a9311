//! Small numeric helpers shared by the solvers and the learners.

use rand::Rng;

/// Streaming log-sum-exp accumulator.
///
/// Keeps a running maximum and rescales the partial sum whenever the maximum
/// moves, so no intermediate `exp` ever overflows.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSumExp {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    pub fn value(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// `log Σ_i w_i exp(z_i)` with nonnegative weights; zero-weight terms are skipped.
pub fn log_weighted_sum_exp(weights: &[f64], values: &[f64]) -> f64 {
    debug_assert_eq!(weights.len(), values.len());
    let max = weights
        .iter()
        .zip(values)
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, z)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = weights
        .iter()
        .zip(values)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, z)| w * (z - max).exp())
        .sum();
    max + s.ln()
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let mut acc = LogSumExp::new();
    for &v in values {
        acc.push(v);
    }
    acc.value()
}

/// Numerically stable softmax of a logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = out.iter().sum();
    for p in &mut out {
        *p /= s;
    }
    out
}

/// `x log(x / y)` with the convention `0 log(0/y) = 0`.
pub fn xlogxy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln()
    }
}

pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter().zip(p).map(|(&a, &b)| xlogxy(a, b)).sum()
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Draw an index from an (unnormalized is fine) nonnegative weight row.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streaming_lse_matches_direct() {
        let xs = [0.3, -2.0, 700.0, 699.5, f64::NEG_INFINITY];
        let direct = 700.0 + (1.0 + (-0.5f64).exp() + (-699.7f64).exp() + (-702.0f64).exp()).ln();
        assert!((logsumexp(&xs) - direct).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn weighted_lse_skips_zero_weights() {
        let v = log_weighted_sum_exp(&[0.5, 0.5, 0.0], &[1.0, 0.0, 1e6]);
        assert!((v - (0.5 * 1f64.exp() + 0.5).ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_conventions() {
        assert_eq!(kl_divergence(&[0.0, 1.0], &[0.5, 0.5]), 2f64.ln());
        assert_eq!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_infinite());
    }

    #[test]
    fn sample_index_never_picks_zero_mass() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_ne!(sample_index(&[0.3, 0.0, 0.7], &mut rng), 1);
        }
    }
}
