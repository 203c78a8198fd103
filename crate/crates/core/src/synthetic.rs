//! Minimal binary-effort damage MDP with closed-form step-0 analysis.
//!
//! Damage starts at zero and grows as `D' = min(1, D + kappa * e)` with
//! `e in {e_low, e_high}`; the per-step reward is `e^beta (1 - D)^2`. The
//! policy at `D = 0` is `sigmoid(theta)` with `theta = 0`, and every later
//! step picks uniformly. Because damage depends only on how many high-effort
//! steps have been taken, expectations reduce to a walk over
//! `(step, high-effort count)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimalMdpParams {
    pub kappa: f64,
    pub beta: f64,
    pub e_low: f64,
    pub e_high: f64,
    pub horizon: usize,
}

impl MinimalMdpParams {
    pub fn new(kappa: f64, beta: f64, e_low: f64, e_high: f64, horizon: usize) -> Result<Self> {
        let p = Self {
            kappa,
            beta,
            e_low,
            e_high,
            horizon,
        };
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be finite and >= 0, got {kappa}")));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {beta}")));
        }
        if !(0.0 < e_low && e_low < e_high && e_high <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < e_low < e_high <= 1, got {e_low}, {e_high}"
            )));
        }
        if horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(p)
    }

    pub fn with_horizon(self, horizon: usize) -> Self {
        Self { horizon, ..self }
    }

    /// Mean per-step effort reward under the uniform policy.
    pub fn mean_effort_reward(&self) -> f64 {
        0.5 * (self.e_low.powf(self.beta) + self.e_high.powf(self.beta))
    }

    /// `e_high^beta - e_low^beta`.
    pub fn reward_gap(&self) -> f64 {
        self.e_high.powf(self.beta) - self.e_low.powf(self.beta)
    }

    pub fn reward(&self, damage: f64, effort: f64) -> f64 {
        effort.powf(self.beta) * (1.0 - damage).powi(2)
    }
}

/// Expected return of steps `1..H` under the uniform policy, starting from
/// damage `d1` at step 1.
pub fn continuation_value(p: &MinimalMdpParams, d1: f64) -> f64 {
    let e_bar = p.mean_effort_reward();
    // probs[c]: probability of c high-effort picks among the uniform steps so far.
    let mut probs = vec![1.0];
    let mut value = 0.0;
    for m in 0..p.horizon.saturating_sub(1) {
        for (c, prob) in probs.iter().enumerate() {
            let d = (d1 + p.kappa * (c as f64 * p.e_high + (m - c) as f64 * p.e_low)).min(1.0);
            value += prob * e_bar * (1.0 - d).powi(2);
        }
        let mut next = vec![0.0; probs.len() + 1];
        for (c, prob) in probs.iter().enumerate() {
            next[c] += 0.5 * prob;
            next[c + 1] += 0.5 * prob;
        }
        probs = next;
    }
    value
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginQ {
    pub q_high: f64,
    pub q_low: f64,
    pub gap: f64,
}

/// `Q(0, e_high)`, `Q(0, e_low)` and their difference under uniform continuation.
pub fn exact_q_origin(p: &MinimalMdpParams) -> OriginQ {
    let q = |e: f64| p.reward(0.0, e) + continuation_value(p, (p.kappa * e).min(1.0));
    let (q_high, q_low) = (q(p.e_high), q(p.e_low));
    OriginQ {
        q_high,
        q_low,
        gap: q_high - q_low,
    }
}

/// Expected REINFORCE gradient at `theta = 0`: a quarter of the Q gap.
pub fn expected_step0_gradient(p: &MinimalMdpParams) -> f64 {
    0.25 * exact_q_origin(p).gap
}

/// Upper bound on `|V(kappa e_high) - V(kappa e_low)|` in the unclipped regime.
pub fn lipschitz_bound(p: &MinimalMdpParams) -> f64 {
    2.0 * (p.horizon as f64 - 1.0) * p.mean_effort_reward() * p.kappa * (p.e_high - p.e_low)
}

/// Largest horizon for which the reward gap provably dominates the Lipschitz bound.
pub fn h_star(p: &MinimalMdpParams) -> Result<f64> {
    if p.e_high == p.e_low {
        return Err(Error::Numeric("critical horizon undefined for e_high == e_low".into()));
    }
    h_star_from_terms(p.reward_gap(), p.mean_effort_reward(), p.kappa, p.e_high - p.e_low)
}

/// Critical horizon from precomputed reward gap, mean effort reward, damage
/// rate and effort span.
pub fn h_star_from_terms(reward_gap: f64, mean_effort_reward: f64, kappa: f64, span: f64) -> Result<f64> {
    let denom = 2.0 * kappa * mean_effort_reward * span;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Numeric(format!("critical horizon undefined: denominator {denom}")));
    }
    Ok(1.0 + reward_gap / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo REINFORCE estimate of the step-0 gradient.
pub fn mc_step0_gradient(p: &MinimalMdpParams, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(Error::Usage("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let first_high = rng.random_bool(0.5);
        let mut damage = 0.0;
        let mut ret = 0.0;
        for t in 0..p.horizon {
            let high = if t == 0 { first_high } else { rng.random_bool(0.5) };
            let e = if high { p.e_high } else { p.e_low };
            ret += p.reward(damage, e);
            damage = (damage + p.kappa * e).min(1.0);
        }
        let score = if first_high { 0.5 } else { -0.5 };
        let x = score * ret;
        sum += x;
        sum_sq += x * x;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let std_error = if n_samples > 1 {
        ((sum_sq - n * mean * mean).max(0.0) / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        estimate: mean,
        std_error,
        samples: n_samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitmentRow {
    pub params: MinimalMdpParams,
    pub h_star: f64,
    pub gap: f64,
    pub lipschitz_bound: f64,
    pub gap_positive: bool,
    pub within_h_star: bool,
}

/// Evaluate the step-0 commitment condition across parameter sets.
pub fn commitment_sweep(grid: &[MinimalMdpParams]) -> Result<Vec<CommitmentRow>> {
    grid.iter()
        .map(|p| {
            let h_star = h_star(p)?;
            let gap = exact_q_origin(p).gap;
            Ok(CommitmentRow {
                params: *p,
                h_star,
                gap,
                lipschitz_bound: lipschitz_bound(p),
                gap_positive: gap > 0.0,
                within_h_star: p.horizon as f64 <= h_star,
            })
        })
        .collect()
}

/// Rows that contradict "H <= H* implies a positive gap". Empty when the proposition holds.
pub fn commitment_counterexamples(rows: &[CommitmentRow]) -> Vec<CommitmentRow> {
    rows.iter()
        .filter(|r| r.within_h_star && !r.gap_positive)
        .copied()
        .collect()
}

/// The `kappa x H` grid at `beta = 0.6`, `e_low = 0.05`, `e_high = 1`.
pub fn standard_grid(kappas: &[f64], horizons: std::ops::RangeInclusive<usize>) -> Vec<MinimalMdpParams> {
    kappas
        .iter()
        .flat_map(|&k| {
            horizons.clone().map(move |h| MinimalMdpParams {
                kappa: k,
                beta: 0.6,
                e_low: 0.05,
                e_high: 1.0,
                horizon: h,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full enumeration of all 2^H effort sequences; the first action fixed.
    fn brute_q(p: &MinimalMdpParams, first_high: bool) -> f64 {
        let rest = p.horizon - 1;
        let weight = 0.5f64.powi(rest as i32);
        let mut total = 0.0;
        for code in 0u64..(1 << rest) {
            let mut damage = 0.0f64;
            let mut ret = 0.0;
            for t in 0..p.horizon {
                let high = if t == 0 { first_high } else { (code >> (t - 1)) & 1 == 1 };
                let e = if high { p.e_high } else { p.e_low };
                ret += e.powf(p.beta) * (1.0 - damage).powi(2);
                damage = (damage + p.kappa * e).min(1.0);
            }
            total += weight * ret;
        }
        total
    }

    fn toy() -> MinimalMdpParams {
        MinimalMdpParams::new(0.1, 1.0, 0.5, 1.0, 2).unwrap()
    }

    #[test]
    fn horizon_one_gap_is_reward_gap() {
        let p = toy().with_horizon(1);
        assert!((exact_q_origin(&p).gap - p.reward_gap()).abs() < 1e-15);
        assert_eq!(lipschitz_bound(&p), 0.0);
    }

    #[test]
    fn two_step_values() {
        let q = exact_q_origin(&toy());
        assert!((q.q_high - 1.6075).abs() < 1e-12);
        assert!((q.q_low - 1.176875).abs() < 1e-12);
        assert!((q.gap - 0.430625).abs() < 1e-12);
        assert!((expected_step0_gradient(&toy()) - 0.430625 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_step_lipschitz() {
        let p = toy();
        assert!((lipschitz_bound(&p) - 0.075).abs() < 1e-15);
        let diff = (continuation_value(&p, 0.1) - continuation_value(&p, 0.05)).abs();
        assert!((diff - 0.069375).abs() < 1e-12);
        assert!(diff <= lipschitz_bound(&p));
    }

    #[test]
    fn critical_horizons_exact() {
        let base = MinimalMdpParams::new(0.075, 0.6, 0.05, 1.0, 10).unwrap();
        // 0.05^0.6 = 0.16572
        assert!((h_star(&base).unwrap() - 11.045).abs() < 1e-3);
        let primary = MinimalMdpParams { kappa: 0.055, ..base };
        assert!((h_star(&primary).unwrap() - 14.698).abs() < 1e-3);
        let secondary = MinimalMdpParams { kappa: 0.15, ..base };
        assert!((h_star(&secondary).unwrap() - 6.022).abs() < 1e-3);
        let toy = toy();
        assert!((h_star(&toy).unwrap() - (1.0 + 0.5 / (2.0 * 0.1 * 0.75 * 0.5))).abs() < 1e-12);
        assert!((h_star(&toy).unwrap() - 7.6667).abs() < 1e-3);
        let flat = MinimalMdpParams { kappa: 0.0, ..base };
        assert!(h_star(&flat).is_err());
        let degenerate = MinimalMdpParams { e_low: 1.0, ..base };
        assert!(h_star(&degenerate).is_err());
    }

    #[test]
    fn critical_horizons_from_rounded_terms() {
        let h = |kappa| h_star_from_terms(0.822, 0.589, kappa, 0.95).unwrap();
        assert!((h(0.075) - 10.8).abs() < 0.05);
        assert!((h(0.055) - 14.4).abs() < 0.1);
        assert!((h(0.15) - 5.9).abs() < 0.1);
    }

    #[test]
    fn count_walk_matches_enumeration() {
        for h in 1..=12 {
            for &kappa in &[0.02, 0.075, 0.15, 0.4] {
                let p = MinimalMdpParams::new(kappa, 0.6, 0.05, 1.0, h).unwrap();
                let q = exact_q_origin(&p);
                assert!((q.q_high - brute_q(&p, true)).abs() < 1e-12, "h={h} k={kappa}");
                assert!((q.q_low - brute_q(&p, false)).abs() < 1e-12, "h={h} k={kappa}");
            }
        }
    }

    #[test]
    fn single_sample_is_half_return() {
        let p = toy();
        let est = mc_step0_gradient(&p, 1, 3).unwrap();
        let candidates = [1.0 + 0.81, 1.0 + 0.5 * 0.81, 0.5 + 0.9025, 0.5 + 0.5 * 0.9025];
        assert!(candidates
            .iter()
            .any(|g| (est.estimate.abs() - g / 2.0).abs() < 1e-12));
        assert!(mc_step0_gradient(&p, 0, 3).is_err());
    }

    #[test]
    fn mc_error_shrinks_with_samples() {
        let p = MinimalMdpParams::new(0.075, 0.6, 0.05, 1.0, 8).unwrap();
        let small = mc_step0_gradient(&p, 1_000, 1).unwrap();
        let large = mc_step0_gradient(&p, 100_000, 1).unwrap();
        let ratio = small.std_error / large.std_error;
        assert!((ratio - 10.0).abs() < 1.0, "ratio {ratio}");
        let exact = expected_step0_gradient(&p);
        assert!((large.estimate - exact).abs() < 3.0 * large.std_error);
    }

    #[test]
    fn sweep_on_empty_grid_is_empty() {
        assert!(commitment_sweep(&[]).unwrap().is_empty());
    }

    #[test]
    fn bricklayer_kappa_gap_survives_past_h_star() {
        let rows = commitment_sweep(&standard_grid(&[0.075], 2..=30)).unwrap();
        assert!(commitment_counterexamples(&rows).is_empty());
        assert!(rows.iter().any(|r| !r.within_h_star && r.gap_positive));
    }

    proptest! {
        #[test]
        fn gap_respects_lower_bound(
            kappa in 0.001f64..0.3,
            beta in 0.1f64..=1.0,
            e_low in 0.01f64..0.9,
            span in 0.01f64..1.0,
            horizon in 1usize..=12,
        ) {
            let e_high = (e_low + span * (1.0 - e_low)).min(1.0);
            prop_assume!(e_high > e_low);
            prop_assume!(kappa * e_high * horizon as f64 <= 1.0);
            let p = MinimalMdpParams::new(kappa, beta, e_low, e_high, horizon).unwrap();
            let q = exact_q_origin(&p);
            let bound = lipschitz_bound(&p);
            let v_diff = (continuation_value(&p, kappa * e_high) - continuation_value(&p, kappa * e_low)).abs();
            prop_assert!(v_diff <= bound + 1e-12);
            prop_assert!(q.gap >= p.reward_gap() - bound - 1e-12);
            prop_assert_eq!(expected_step0_gradient(&p).signum(), q.gap.signum());
        }
    }
}
