//! CMA-ES over per-year (dominant share, dominant effort) schedules.
//!
//! The optimizer itself is generic and maximizes; [`relax`] wires it to the
//! simulator with exits enforced.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dp::{schedule_rollout, ShareSchedule};
use crate::env::{Action, EnvConfig, Termination};
use crate::error::{Error, Result};

/// Strategy settings for [`cma_optimize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaConfig {
    pub population: usize,
    pub generations: usize,
    pub initial_mean: Vec<f64>,
    /// Per-coordinate initial standard deviation.
    pub initial_std: Vec<f64>,
    pub seed: u64,
}

impl CmaConfig {
    pub fn dimension(&self) -> usize {
        self.initial_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_mean.is_empty() || self.initial_mean.len() != self.initial_std.len() {
            return Err(Error::Config("initial mean and std must be non-empty and equal length".into()));
        }
        if self.population < 4 {
            return Err(Error::Config(format!("population must be at least 4, got {}", self.population)));
        }
        if self.initial_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("initial std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_score: f64,
    pub generation_best: f64,
    pub mean_score: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaResult {
    pub best_vector: Vec<f64>,
    pub best_score: f64,
    pub history: Vec<GenerationRecord>,
    pub evaluations: usize,
}

/// Maximize `objective` with (mu/mu_w, lambda) CMA-ES, rank-mu covariance
/// update and cumulative step-size adaptation. Non-finite scores rank last.
pub fn cma_optimize<F>(mut objective: F, config: &CmaConfig) -> Result<CmaResult>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    let n = config.dimension();
    let nf = n as f64;
    let lambda = config.population;
    let mu = lambda / 2;
    let raw: Vec<f64> = (0..mu).map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

    let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
    let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mean = DVector::from_column_slice(&config.initial_mean);
    let mut sigma = 1.0;
    let mut cov = DMatrix::from_diagonal(&DVector::from_iterator(n, config.initial_std.iter().map(|s| s * s)));
    let mut basis = DMatrix::<f64>::identity(n, n);
    let mut scales = DVector::from_column_slice(&config.initial_std);
    let mut p_sigma = DVector::<f64>::zeros(n);
    let mut p_c = DVector::<f64>::zeros(n);

    let mut best_vector = config.initial_mean.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(config.generations);
    let mut evaluations = 0;

    for generation in 0..config.generations {
        let mut pop: Vec<(f64, DVector<f64>, DVector<f64>)> = (0..lambda)
            .map(|_| {
                let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
                let y = &basis * z.component_mul(&scales);
                let x = &mean + sigma * &y;
                (0.0, x, y)
            })
            .collect();
        for member in pop.iter_mut() {
            let score = objective(member.1.as_slice());
            member.0 = if score.is_finite() { score } else { f64::NEG_INFINITY };
        }
        evaluations += lambda;
        pop.sort_by(|a, b| b.0.total_cmp(&a.0));

        let finite: Vec<f64> = pop.iter().map(|p| p.0).filter(|s| s.is_finite()).collect();
        let mean_score = if finite.is_empty() {
            f64::NEG_INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        if pop[0].0 > best_score {
            best_score = pop[0].0;
            best_vector = pop[0].1.as_slice().to_vec();
        }

        let mut y_w = DVector::<f64>::zeros(n);
        for (w, member) in weights.iter().zip(&pop) {
            y_w += *w * &member.2;
        }
        mean += sigma * &y_w;

        // C^{-1/2} y_w = B D^{-1} B^T y_w
        let inv_sqrt_y = &basis * (basis.transpose() * &y_w).component_div(&scales);
        p_sigma = (1.0 - c_sigma) * &p_sigma + (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt() * inv_sqrt_y;
        let ps_norm = p_sigma.norm();
        let decay = 1.0 - (1.0 - c_sigma).powi(2 * (generation as i32 + 1));
        let h_sigma = if ps_norm / decay.sqrt() < (1.4 + 2.0 / (nf + 1.0)) * chi_n {
            1.0
        } else {
            0.0
        };
        p_c = (1.0 - c_c) * &p_c + h_sigma * (c_c * (2.0 - c_c) * mu_eff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::<f64>::zeros(n, n);
        for (w, member) in weights.iter().zip(&pop) {
            rank_mu += *w * &member.2 * member.2.transpose();
        }
        let correction = (1.0 - h_sigma) * c_c * (2.0 - c_c);
        cov = (1.0 - c_1 - c_mu) * &cov + c_1 * (&p_c * p_c.transpose() + correction * &cov) + c_mu * rank_mu;
        sigma *= ((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0)).exp();

        cov = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov.clone());
        basis = eig.eigenvectors;
        scales = eig.eigenvalues.map(|v| v.max(1e-300).sqrt());

        history.push(GenerationRecord {
            generation,
            best_score,
            generation_best: pop[0].0,
            mean_score,
            sigma,
        });
        if !sigma.is_finite() || sigma == 0.0 {
            return Err(Error::Numeric(format!("step size degenerated to {sigma} at generation {generation}")));
        }
    }
    Ok(CmaResult {
        best_vector,
        best_score,
        history,
        evaluations,
    })
}

/// Box bounds of the relaxed schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxBounds {
    pub share: (f64, f64),
    pub effort: (f64, f64),
    pub other_effort: f64,
}

impl Default for RelaxBounds {
    fn default() -> Self {
        Self {
            share: (0.15, 0.80),
            effort: (0.05, 1.00),
            other_effort: 0.40,
        }
    }
}

impl RelaxBounds {
    /// Initial CMA settings: the box centre with 0.3 of each width as std.
    pub fn cma_config(&self, horizon: usize, population: usize, generations: usize, seed: u64) -> CmaConfig {
        let centre = |(lo, hi): (f64, f64)| (lo + hi) / 2.0;
        let width = |(lo, hi): (f64, f64)| hi - lo;
        CmaConfig {
            population,
            generations,
            initial_mean: (0..2 * horizon)
                .map(|i| if i % 2 == 0 { centre(self.share) } else { centre(self.effort) })
                .collect(),
            initial_std: (0..2 * horizon)
                .map(|i| 0.3 * if i % 2 == 0 { width(self.share) } else { width(self.effort) })
                .collect(),
            seed,
        }
    }
}

/// Year `y` takes dominant share `v[2y]` and effort `v[2y + 1]`, clipped to bounds.
pub fn decode_vector(vector: &[f64], config: &EnvConfig, bounds: &RelaxBounds) -> Result<Vec<Action>> {
    if vector.len() != 2 * config.horizon {
        return Err(Error::Usage(format!(
            "schedule vector has length {}, expected {}",
            vector.len(),
            2 * config.horizon
        )));
    }
    let k = config.num_activities();
    Ok(vector
        .chunks_exact(2)
        .map(|pair| {
            let share = pair[0].clamp(bounds.share.0, bounds.share.1);
            let effort = pair[1].clamp(bounds.effort.0, bounds.effort.1);
            Action::dominant_split(k, config.role.dominant, share, effort, bounds.other_effort)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxOutcome {
    pub total_return: f64,
    pub m_final: f64,
    pub d_final: f64,
    pub termination: Termination,
}

/// Return of the deterministic rollout with all exits enforced.
pub fn relaxation_objective(config: &EnvConfig, schedule: &[Action]) -> Result<RelaxOutcome> {
    let report = schedule_rollout(config, schedule)?;
    Ok(RelaxOutcome {
        total_return: report.total_return,
        m_final: report.m_final,
        d_final: report.d_final,
        termination: report.termination,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxResult {
    pub search: CmaResult,
    pub outcome: RelaxOutcome,
    pub schedule: ShareSchedule,
}

/// Optimize a per-year schedule on `config` (exits always enforced).
pub fn relax(config: &EnvConfig, bounds: &RelaxBounds, cma: &CmaConfig) -> Result<RelaxResult> {
    let mut config = config.clone();
    config.no_exit = false;
    if cma.dimension() != 2 * config.horizon {
        return Err(Error::Config(format!(
            "CMA dimension {} does not match 2 x horizon {}",
            cma.dimension(),
            config.horizon
        )));
    }
    let search = cma_optimize(
        |v| {
            decode_vector(v, &config, bounds)
                .and_then(|s| relaxation_objective(&config, &s))
                .map(|o| o.total_return)
                .unwrap_or(f64::NAN)
        },
        cma,
    )?;
    let actions = decode_vector(&search.best_vector, &config, bounds)?;
    let outcome = relaxation_objective(&config, &actions)?;
    let dominant = config.role.dominant;
    let schedule = ShareSchedule {
        dominant,
        start_age: config.start_age,
        shares: actions.iter().map(|a| a.shares.clone()).collect(),
        dominant_efforts: actions.iter().map(|a| a.efforts[dominant]).collect(),
        config_hash: config.hash(),
    };
    Ok(RelaxResult {
        search,
        outcome,
        schedule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::bricklayer_config;

    fn sphere_config(seed: u64) -> CmaConfig {
        CmaConfig {
            population: 50,
            generations: 300,
            initial_mean: vec![3.0; 10],
            initial_std: vec![1.0; 10],
            seed,
        }
    }

    fn neg_sphere(x: &[f64]) -> f64 {
        -x.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn sphere_converges() {
        let r = cma_optimize(neg_sphere, &sphere_config(1)).unwrap();
        assert!(-r.best_score < 1e-8, "best {}", r.best_score);
        assert_eq!(r.history.len(), 300);
        assert_eq!(r.evaluations, 300 * 50);
        assert!(r.history.windows(2).all(|w| w[1].best_score >= w[0].best_score));
    }

    #[test]
    fn same_seed_same_result() {
        let mut c = sphere_config(9);
        c.generations = 40;
        let a = cma_optimize(neg_sphere, &c).unwrap();
        let b = cma_optimize(neg_sphere, &c).unwrap();
        assert_eq!(a.best_vector, b.best_vector);
    }

    #[test]
    fn non_finite_scores_rank_last() {
        let mut c = sphere_config(2);
        c.generations = 60;
        let r = cma_optimize(|x| if x[0] < 0.0 { f64::NAN } else { neg_sphere(x) }, &c).unwrap();
        assert!(r.best_score.is_finite());
        assert!(r.best_vector[0] >= 0.0);
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = sphere_config(0);
        c.initial_std.pop();
        assert!(cma_optimize(neg_sphere, &c).is_err());
    }

    #[test]
    fn decoding_clips_and_stays_on_simplex() {
        let config = bricklayer_config().with_horizon(3);
        let b = RelaxBounds::default();
        let low = decode_vector(&[0.15, 0.05, 0.15, 0.05, 0.15, 0.05], &config, &b).unwrap();
        assert!(low.iter().all(|a| a.shares[0] == 0.15 && a.efforts[0] == 0.05));
        let wild = decode_vector(&[1.7, -3.0, 0.5, 2.0, -1.0, 0.5], &config, &b).unwrap();
        assert_eq!((wild[0].shares[0], wild[0].efforts[0]), (0.80, 0.05));
        assert_eq!((wild[1].efforts[0], wild[2].shares[0]), (1.0, 0.15));
        for a in &wild {
            assert!((a.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.efforts[1..].iter().all(|e| *e == 0.40));
        }
        assert!(decode_vector(&[0.5; 5], &config, &b).is_err());
    }

    #[test]
    fn low_share_schedule_exits_at_first_full_window() {
        let config = bricklayer_config();
        let b = RelaxBounds {
            share: (0.0, 0.8),
            ..RelaxBounds::default()
        };
        let v: Vec<f64> = (0..2 * config.horizon).map(|i| if i % 2 == 0 { 0.10 } else { 0.8 }).collect();
        let out = relaxation_objective(&config, &decode_vector(&v, &config, &b).unwrap()).unwrap();
        assert_eq!(out.termination, Termination::RoleExit);
        let report = schedule_rollout(&config, &decode_vector(&v, &config, &b).unwrap()).unwrap();
        assert_eq!(report.exit_age(), 21.0);
    }

    #[test]
    fn zero_effort_is_near_zero_return() {
        let config = bricklayer_config();
        let b = RelaxBounds {
            effort: (0.0, 1.0),
            other_effort: 0.0,
            ..RelaxBounds::default()
        };
        let v: Vec<f64> = (0..2 * config.horizon).map(|i| if i % 2 == 0 { 0.5 } else { 0.0 }).collect();
        let out = relaxation_objective(&config, &decode_vector(&v, &config, &b).unwrap()).unwrap();
        assert!(out.total_return.abs() < 1e-9);
        assert_eq!(out.termination, Termination::AgeLimit);
    }

    #[test]
    fn short_relaxation_improves_on_start() {
        let config = bricklayer_config().with_horizon(5);
        let b = RelaxBounds::default();
        let cma = b.cma_config(5, 20, 30, 4);
        let start = relaxation_objective(&config, &decode_vector(&cma.initial_mean, &config, &b).unwrap())
            .unwrap()
            .total_return;
        let r = relax(&config, &b, &cma).unwrap();
        assert!(r.outcome.total_return >= start);
        assert_eq!(r.schedule.len(), 5);
        assert_eq!(r.outcome.total_return, r.search.best_score);
    }
}
