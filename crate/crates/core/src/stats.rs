//! Per-seed summaries, outcome-cell and basin classification, and the
//! hypothesis tests used to compare training conditions.

use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal, StudentsT};
use statrs::function::factorial::ln_binomial;

use crate::env::Termination;
use crate::error::{Error, Result};
use crate::presets::PresetId;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Default Cell-C tolerance on `M_final`.
pub const CELL_EPSILON: f64 = 0.02;

/// Training-condition switches recorded with every seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionFlags {
    pub fixed_share: bool,
    pub no_exit: bool,
    pub dyna: bool,
    pub zero_proxy: bool,
    pub penalty_weight: f64,
    pub effort_bias: f64,
}

/// One evaluation episode, reduced to what the summary needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub length: usize,
    pub termination: Termination,
    pub exit_age: f64,
    pub m_final: f64,
    pub d_final: f64,
    pub total_return: f64,
    pub role_violations: usize,
}

impl EpisodeRecord {
    pub fn completed(&self) -> bool {
        self.termination == Termination::AgeLimit
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffortCheckpoints {
    pub ages: [f64; 3],
    pub efforts: [f64; 3],
    pub monotone: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasinLabel {
    Reactive,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub preset: PresetId,
    pub condition: ConditionFlags,
    pub eval_episodes: usize,
    pub completion_rate: f64,
    pub exit_age_mean: f64,
    pub exit_age_sd: f64,
    pub m_final_mean: f64,
    pub m_final_sd: f64,
    pub d_final_mean: f64,
    pub return_mean: f64,
    pub role_violations: usize,
    pub checkpoints: Option<EffortCheckpoints>,
    pub basin: Option<BasinLabel>,
    pub training_steps: u64,
    pub config_hash: String,
}

impl SeedSummary {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SUMMARY_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "summary schema_version {} (expected {SUMMARY_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(0.0..=1.0).contains(&self.completion_rate) {
            return Err(Error::Schema(format!(
                "completion_rate {} outside [0, 1]",
                self.completion_rate
            )));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Schema("summary has no evaluation episodes".into()));
        }
        if self.checkpoints.is_some() && self.completion_rate < 1.0 {
            return Err(Error::Schema(
                "effort checkpoints recorded for a non-completing policy".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SeedSummary = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("invalid summary: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Everything besides the episodes that goes into a summary.
#[derive(Clone, Debug)]
pub struct SummaryContext {
    pub seed: u64,
    pub preset: PresetId,
    pub condition: ConditionFlags,
    pub training_steps: u64,
    pub config_hash: String,
    pub start_age: f64,
    /// Mean dominant effort per year along the policy's own trajectory.
    pub effort_profile: Option<Vec<f64>>,
    pub checkpoint_ages: [f64; 3],
}

/// Default checkpoint ages (initial, mid, late) for a preset.
pub fn checkpoint_ages(preset: PresetId) -> [f64; 3] {
    match preset {
        PresetId::Bricklayer => [16.0, 30.0, 60.0],
        PresetId::Nba => [18.0, 28.0, 36.0],
    }
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize_seed(episodes: &[EpisodeRecord], ctx: &SummaryContext) -> Result<SeedSummary> {
    if episodes.is_empty() {
        return Err(Error::Usage("cannot summarise zero evaluation episodes".into()));
    }
    let n = episodes.len() as f64;
    let completion_rate = episodes.iter().filter(|e| e.completed()).count() as f64 / n;
    let (exit_age_mean, exit_age_sd) = mean_sd(episodes.iter().map(|e| e.exit_age));
    let (m_final_mean, m_final_sd) = mean_sd(episodes.iter().map(|e| e.m_final));
    let d_final_mean = episodes.iter().map(|e| e.d_final).sum::<f64>() / n;
    let return_mean = episodes.iter().map(|e| e.total_return).sum::<f64>() / n;
    let (checkpoints, basin) = match (&ctx.effort_profile, completion_rate == 1.0) {
        (Some(profile), true) => {
            let cps = effort_checkpoints(profile, ctx.start_age, ctx.checkpoint_ages)?;
            let label = classify_basin(&cps, &BasinThresholds::default());
            (Some(cps), Some(label))
        }
        _ => (None, None),
    };
    let summary = SeedSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        seed: ctx.seed,
        preset: ctx.preset,
        condition: ctx.condition.clone(),
        eval_episodes: episodes.len(),
        completion_rate,
        exit_age_mean,
        exit_age_sd,
        m_final_mean,
        m_final_sd,
        d_final_mean,
        return_mean,
        role_violations: episodes.iter().map(|e| e.role_violations).sum(),
        checkpoints,
        basin,
        training_steps: ctx.training_steps,
        config_hash: ctx.config_hash.clone(),
    };
    summary.validate()?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CellLabel {
    A,
    B,
    C,
}

impl CellLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CellLabel::A => "A",
            CellLabel::B => "B",
            CellLabel::C => "C",
        }
    }
}

/// A: fails completion. C: completes within `epsilon` of the DP `M_final`. B otherwise.
pub fn classify_cell(summary: &SeedSummary, dp_m_final: Option<f64>, epsilon: f64) -> Result<CellLabel> {
    if summary.completion_rate < 1.0 {
        return Ok(CellLabel::A);
    }
    let reference = dp_m_final.ok_or_else(|| {
        Error::Usage("a completing policy needs a DP reference M_final to classify".into())
    })?;
    Ok(if reference - summary.m_final_mean <= epsilon {
        CellLabel::C
    } else {
        CellLabel::B
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinThresholds {
    pub initial_min: f64,
    pub mid_min: f64,
    pub late_max: f64,
    pub monotone_tolerance: f64,
}

impl Default for BasinThresholds {
    fn default() -> Self {
        Self {
            initial_min: 0.80,
            mid_min: 0.40,
            late_max: 0.30,
            monotone_tolerance: 0.02,
        }
    }
}

/// True when no year-over-year increase exceeds `tolerance`.
pub fn is_monotone_decline(profile: &[f64], tolerance: f64) -> bool {
    profile.windows(2).all(|w| w[1] - w[0] <= tolerance)
}

/// Read efforts at the three checkpoint ages off a per-year profile.
pub fn effort_checkpoints(profile: &[f64], start_age: f64, ages: [f64; 3]) -> Result<EffortCheckpoints> {
    let mut efforts = [0.0; 3];
    for (slot, age) in efforts.iter_mut().zip(ages) {
        let idx = (age - start_age).round();
        if idx < 0.0 || idx as usize >= profile.len() {
            return Err(Error::Usage(format!(
                "checkpoint age {age} outside the profile (start {start_age}, {} years)",
                profile.len()
            )));
        }
        *slot = profile[idx as usize];
    }
    Ok(EffortCheckpoints {
        ages,
        efforts,
        monotone: is_monotone_decline(profile, BasinThresholds::default().monotone_tolerance),
    })
}

pub fn classify_basin(cps: &EffortCheckpoints, th: &BasinThresholds) -> BasinLabel {
    let [initial, mid, late] = cps.efforts;
    if initial > th.initial_min && mid > th.mid_min && late < th.late_max && cps.monotone {
        BasinLabel::Reactive
    } else {
        BasinLabel::Other
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Welch's unequal-variance t-test from summary statistics.
pub fn welch_t(mean1: f64, sd1: f64, n1: usize, mean2: f64, sd2: f64, n2: usize) -> Result<WelchResult> {
    if n1 < 2 || n2 < 2 {
        return Err(Error::Usage("welch_t needs at least two observations per group".into()));
    }
    if sd1 < 0.0 || sd2 < 0.0 {
        return Err(Error::Usage("standard deviations must be non-negative".into()));
    }
    let v1 = sd1 * sd1 / n1 as f64;
    let v2 = sd2 * sd2 / n2 as f64;
    let se2 = v1 + v2;
    if se2 == 0.0 {
        return Err(Error::Numeric("welch_t is degenerate when both groups have zero variance".into()));
    }
    let t = (mean1 - mean2) / se2.sqrt();
    let df = se2 * se2 / (v1 * v1 / (n1 as f64 - 1.0) + v2 * v2 / (n2 as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0);
    Ok(WelchResult { t, df, p })
}

/// Welch's test on raw samples.
pub fn welch_t_samples(xs: &[f64], ys: &[f64]) -> Result<WelchResult> {
    let (m1, s1) = mean_sd(xs.iter().copied());
    let (m2, s2) = mean_sd(ys.iter().copied());
    welch_t(m1, s1, xs.len(), m2, s2, ys.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    pub u: f64,
    pub p: f64,
}

fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Mann-Whitney U test; `u` counts pairs with `x > y` (ties as half).
pub fn mann_whitney_u(xs: &[f64], ys: &[f64]) -> Result<MannWhitney> {
    let (n, m) = (xs.len(), ys.len());
    if n == 0 || m == 0 {
        return Err(Error::Usage("mann_whitney_u needs two non-empty samples".into()));
    }
    let pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum = |idx: &[usize]| idx.iter().map(|&i| ranks[i]).sum::<f64>();
    let u_of = |r: f64| r - (n * (n + 1)) as f64 / 2.0;
    let first: Vec<usize> = (0..n).collect();
    let u = u_of(rank_sum(&first));
    let centre = (n * m) as f64 / 2.0;
    let observed = (u - centre).abs();

    let p = if n + m <= 12 {
        let total = n + m;
        let (mut extreme, mut count) = (0u64, 0u64);
        for mask in 0u32..(1 << total) {
            if mask.count_ones() as usize != n {
                continue;
            }
            let idx: Vec<usize> = (0..total).filter(|i| mask >> i & 1 == 1).collect();
            count += 1;
            if (u_of(rank_sum(&idx)) - centre).abs() >= observed - 1e-9 {
                extreme += 1;
            }
        }
        extreme as f64 / count as f64
    } else {
        let big_n = (n + m) as f64;
        let mut tie_term = 0.0;
        let mut sorted = pooled.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        for group in sorted.chunk_by(|a, b| a == b) {
            let t = group.len() as f64;
            tie_term += t * t * t - t;
        }
        let var = (n * m) as f64 / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let z = (observed - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (2.0 * (1.0 - normal.cdf(z))).min(1.0)
        }
    };
    Ok(MannWhitney { u, p })
}

/// Percentile bootstrap interval for `statistic`.
pub fn bootstrap_ci<F>(values: &[f64], statistic: F, resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64,
{
    if values.is_empty() {
        return Err(Error::Usage("bootstrap of an empty sample".into()));
    }
    if resamples < 1000 {
        return Err(Error::Usage(format!("need at least 1000 resamples, got {resamples}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Usage(format!("level must lie in (0, 1), got {level}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; values.len()];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = values[rng.random_range(0..values.len())];
            }
            statistic(&buf)
        })
        .collect();
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let tail = (1.0 - level) / 2.0;
    let lo = ((tail * resamples as f64).floor() as usize).min(resamples - 1);
    let hi = (((1.0 - tail) * resamples as f64).ceil() as usize).clamp(1, resamples) - 1;
    Ok((stats[lo], stats[hi]))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Exact binomial interval from Beta quantiles.
pub fn clopper_pearson(k: u64, n: u64, level: f64) -> Result<(f64, f64)> {
    if k > n || n == 0 {
        return Err(Error::Usage(format!("need 0 <= k <= n and n > 0, got k={k}, n={n}")));
    }
    let alpha = 1.0 - level;
    let beta = |a: f64, b: f64| Beta::new(a, b).map_err(|e| Error::Numeric(e.to_string()));
    let lo = if k == 0 {
        0.0
    } else {
        beta(k as f64, (n - k + 1) as f64)?.inverse_cdf(alpha / 2.0)
    };
    let hi = if k == n {
        1.0
    } else {
        beta((k + 1) as f64, (n - k) as f64)?.inverse_cdf(1.0 - alpha / 2.0)
    };
    Ok((lo, hi))
}

/// Two-sided Fisher exact test on `[[a, b], [c, d]]`.
pub fn fisher_exact(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let row1 = a + b;
    let col1 = a + c;
    let n = a + b + c + d;
    if n == 0 {
        return 1.0;
    }
    let ln_denom = ln_binomial(n, col1);
    let prob = |x: u64| (ln_binomial(row1, x) + ln_binomial(n - row1, col1 - x) - ln_denom).exp();
    let lo = col1.saturating_sub(n - row1);
    let hi = row1.min(col1);
    let observed = prob(a);
    let p: f64 = (lo..=hi)
        .map(prob)
        .filter(|&q| q <= observed * (1.0 + 1e-7))
        .sum();
    p.min(1.0)
}
