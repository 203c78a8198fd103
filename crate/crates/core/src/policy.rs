//! Actor-critic network: a two-layer ReLU trunk feeding a Dirichlet share
//! head, a sigmoid-mean Normal effort head conditioned on the sampled shares,
//! and a scalar value head.
//!
//! Parameters live in one flat vector; gradients of the PPO loss are
//! back-propagated by hand and checked against finite differences by
//! [`grad_check`].

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dp::ShareSchedule;
use crate::env::{Action, OBSERVATION_DIM, SIMPLEX_TOL};
use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma, sigmoid, softplus, trigamma};

/// Bias on the effort head that makes the initial mean effort about 0.20.
pub const LOW_EFFORT_BIAS: f64 = -1.386;
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SHARE_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub hidden: usize,
    pub num_activities: usize,
    pub effort_bias: f64,
    pub init_log_std: f64,
    /// Scale applied to the default init of the three output layers.
    pub head_init_scale: f64,
    pub concentration_floor: f64,
    pub fixed_share: Option<ShareSchedule>,
}

impl PolicyConfig {
    pub fn new(num_activities: usize) -> Self {
        Self {
            obs_dim: OBSERVATION_DIM,
            hidden: 128,
            num_activities,
            effort_bias: 0.0,
            init_log_std: -0.5,
            head_init_scale: 0.01,
            concentration_floor: 1e-3,
            fixed_share: None,
        }
    }

    pub fn with_effort_bias(mut self, bias: f64) -> Self {
        self.effort_bias = bias;
        self
    }

    pub fn with_fixed_share(mut self, schedule: ShareSchedule) -> Self {
        self.fixed_share = Some(schedule);
        self
    }

    pub fn fixed(&self) -> bool {
        self.fixed_share.is_some()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.obs_dim, self.hidden, self.num_activities)
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.hidden == 0 || self.num_activities < 2 {
            return Err(Error::Config("policy needs obs_dim, hidden > 0 and at least 2 activities".into()));
        }
        if let Some(s) = &self.fixed_share {
            if s.is_empty() || s.shares.iter().any(|v| v.len() != self.num_activities) {
                return Err(Error::Config("fixed share schedule does not match the activity count".into()));
            }
        }
        Ok(())
    }
}

/// Offsets of each tensor inside the flat parameter vector. Weights are row-major `out x in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub obs: usize,
    pub hidden: usize,
    pub k: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ws: usize,
    pub bs: usize,
    pub we: usize,
    pub be: usize,
    pub log_std: usize,
    pub wv: usize,
    pub bv: usize,
    pub len: usize,
}

impl Layout {
    fn new(obs: usize, hidden: usize, k: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let w1 = take(hidden * obs);
        let b1 = take(hidden);
        let w2 = take(hidden * hidden);
        let b2 = take(hidden);
        let ws = take(k * hidden);
        let bs = take(k);
        let we = take(k * (hidden + k));
        let be = take(k);
        let log_std = take(k);
        let wv = take(hidden);
        let bv = take(1);
        Self {
            obs,
            hidden,
            k,
            w1,
            b1,
            w2,
            b2,
            ws,
            bs,
            we,
            be,
            log_std,
            wv,
            bv,
            len: at,
        }
    }

    pub fn share_head(&self) -> std::ops::Range<usize> {
        self.ws..self.we
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn layout(&self) -> Layout {
        self.config.layout()
    }

    pub fn log_std(&self) -> &[f64] {
        let l = self.layout();
        &self.values[l.log_std..l.log_std + l.k]
    }
}

/// Deterministic initialization: uniform `+-1/sqrt(fan_in)` weights, zero
/// biases, output layers shrunk by `head_init_scale`.
pub fn init_policy(config: &PolicyConfig, seed: u64) -> Result<PolicyParams> {
    config.validate()?;
    let l = config.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; l.len];
    let mut fill = |start: usize, rows: usize, fan_in: usize, scale: f64, rng: &mut ChaCha8Rng| {
        let bound = scale / (fan_in as f64).sqrt();
        for v in &mut values[start..start + rows * fan_in] {
            *v = rng.random_range(-bound..bound);
        }
    };
    fill(l.w1, l.hidden, l.obs, 1.0, &mut rng);
    fill(l.w2, l.hidden, l.hidden, 1.0, &mut rng);
    fill(l.ws, l.k, l.hidden, config.head_init_scale, &mut rng);
    fill(l.we, l.k, l.hidden + l.k, config.head_init_scale, &mut rng);
    fill(l.wv, 1, l.hidden, config.head_init_scale, &mut rng);
    values[l.be..l.be + l.k].fill(config.effort_bias);
    values[l.log_std..l.log_std + l.k].fill(config.init_log_std);
    Ok(PolicyParams {
        config: config.clone(),
        values,
    })
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *slot = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Network outputs at one observation, before share sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub observation: Vec<f64>,
    pub h1: Vec<f64>,
    pub trunk: Vec<f64>,
    pub concentration: Vec<f64>,
    pub share_logits: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: f64,
}

impl PolicyOutput {
    /// Sigmoid effort means given the share vector fed to the effort head.
    pub fn effort_means(&self, params: &PolicyParams, shares: &[f64]) -> Vec<f64> {
        let l = params.layout();
        let input: Vec<f64> = self.trunk.iter().chain(shares).copied().collect();
        let mut z = vec![0.0; l.k];
        affine(
            &params.values[l.we..l.we + l.k * (l.hidden + l.k)],
            &params.values[l.be..l.be + l.k],
            &input,
            &mut z,
        );
        z.into_iter().map(sigmoid).collect()
    }
}

pub fn policy_forward(params: &PolicyParams, observation: &[f64]) -> Result<PolicyOutput> {
    let l = params.layout();
    if observation.len() != l.obs {
        return Err(Error::Usage(format!(
            "observation has length {}, policy expects {}",
            observation.len(),
            l.obs
        )));
    }
    if observation.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite observation {observation:?}")));
    }
    let p = &params.values;
    let mut h1 = vec![0.0; l.hidden];
    affine(&p[l.w1..l.b1], &p[l.b1..l.w2], observation, &mut h1);
    h1.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut trunk = vec![0.0; l.hidden];
    affine(&p[l.w2..l.b2], &p[l.b2..l.ws], &h1, &mut trunk);
    trunk.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut share_logits = vec![0.0; l.k];
    affine(&p[l.ws..l.bs], &p[l.bs..l.we], &trunk, &mut share_logits);
    let floor = params.config.concentration_floor;
    let concentration = share_logits.iter().map(|z| softplus(*z) + floor).collect();
    let mut value = [0.0];
    affine(&p[l.wv..l.bv], &p[l.bv..l.bv + 1], &trunk, &mut value);
    Ok(PolicyOutput {
        observation: observation.to_vec(),
        h1,
        trunk,
        concentration,
        share_logits,
        log_std: p[l.log_std..l.log_std + l.k].to_vec(),
        value: value[0],
    })
}

/// A sampled action together with what PPO needs to re-score it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    /// Shares and clamped efforts, as sent to the environment.
    pub action: Action,
    /// Efforts before clamping; the log-prob is evaluated on these.
    pub raw_efforts: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

/// Share vector forced by the fixed-share schedule at step `t`, if any.
pub fn scheduled_shares(params: &PolicyParams, t: usize) -> Option<Vec<f64>> {
    params.config.fixed_share.as_ref().map(|s| s.shares_at(t).to_vec())
}

fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut draws = alpha
        .iter()
        .map(|&a| {
            Gamma::new(a, 1.0)
                .map(|g| g.sample(rng))
                .map_err(|e| Error::Numeric(format!("gamma({a}): {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        let best = alpha
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = if i == best { 1.0 } else { 0.0 });
    }
    draws.iter_mut().for_each(|d| *d = d.max(SHARE_FLOOR));
    let total: f64 = draws.iter().sum();
    draws.iter_mut().for_each(|d| *d /= total);
    Ok(draws)
}

/// Draw shares (or read them from the schedule) and efforts at step `t`.
pub fn sample_action<R: Rng + ?Sized>(
    params: &PolicyParams,
    output: &PolicyOutput,
    t: usize,
    rng: &mut R,
) -> Result<ActionSample> {
    let shares = match scheduled_shares(params, t) {
        Some(s) => s,
        None => sample_dirichlet(&output.concentration, rng)?,
    };
    let means = output.effort_means(params, &shares);
    let raw_efforts: Vec<f64> = means
        .iter()
        .zip(&output.log_std)
        .map(|(m, ls)| {
            let z: f64 = StandardNormal.sample(rng);
            m + ls.exp() * z
        })
        .collect();
    let efforts = raw_efforts.iter().map(|e| e.clamp(0.0, 1.0)).collect();
    let (log_prob, _) = score(params, output, &shares, &raw_efforts)?;
    Ok(ActionSample {
        action: Action::new(shares, efforts),
        raw_efforts,
        log_prob,
        value: output.value,
    })
}

/// Mean action: Dirichlet mean shares (or the schedule) and effort means.
pub fn deterministic_action(params: &PolicyParams, output: &PolicyOutput, t: usize) -> Action {
    let shares = scheduled_shares(params, t).unwrap_or_else(|| {
        let total: f64 = output.concentration.iter().sum();
        output.concentration.iter().map(|a| a / total).collect()
    });
    let efforts = output.effort_means(params, &shares);
    Action::new(shares, efforts)
}

fn dirichlet_log_prob(alpha: &[f64], shares: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    ln_gamma(a0)
        + alpha
            .iter()
            .zip(shares)
            .map(|(a, s)| (a - 1.0) * s.ln() - ln_gamma(*a))
            .sum::<f64>()
}

fn dirichlet_entropy(alpha: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    let k = alpha.len() as f64;
    let ln_b = alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>() - ln_gamma(a0);
    ln_b + (a0 - k) * digamma(a0) - alpha.iter().map(|a| (a - 1.0) * digamma(*a)).sum::<f64>()
}

fn normal_log_prob(means: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    means
        .iter()
        .zip(log_std)
        .zip(x)
        .map(|((m, ls), x)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

fn normal_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 * (1.0 + LN_2PI) + ls).sum()
}

fn check_support(shares: &[f64], k: usize) -> Result<()> {
    let total: f64 = shares.iter().sum();
    if shares.len() != k || shares.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || (total - 1.0).abs() > SIMPLEX_TOL
    {
        return Err(Error::Usage(format!("shares {shares:?} are outside the open simplex")));
    }
    Ok(())
}

fn score(params: &PolicyParams, output: &PolicyOutput, shares: &[f64], raw_efforts: &[f64]) -> Result<(f64, f64)> {
    let means = output.effort_means(params, shares);
    let mut log_prob = normal_log_prob(&means, &output.log_std, raw_efforts);
    let mut entropy = normal_entropy(&output.log_std);
    if !params.config.fixed() {
        check_support(shares, params.layout().k)?;
        log_prob += dirichlet_log_prob(&output.concentration, shares);
        entropy += dirichlet_entropy(&output.concentration);
    }
    if !log_prob.is_finite() || !entropy.is_finite() {
        return Err(Error::Numeric(format!("log-prob {log_prob} / entropy {entropy} not finite")));
    }
    Ok((log_prob, entropy))
}

/// Log-prob of a stored (shares, raw efforts) pair and the policy entropy at `observation`.
pub fn logprob_entropy(
    params: &PolicyParams,
    observation: &[f64],
    shares: &[f64],
    raw_efforts: &[f64],
) -> Result<(f64, f64)> {
    let output = policy_forward(params, observation)?;
    score(params, &output, shares, raw_efforts)
}

/// One stored transition as consumed by the PPO loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub observation: Vec<f64>,
    pub shares: Vec<f64>,
    pub raw_efforts: Vec<f64>,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Mean PPO loss over `samples` and its gradient with respect to every parameter.
pub fn loss_and_grad(params: &PolicyParams, samples: &[LossSample], w: &LossWeights) -> Result<(LossStats, Vec<f64>)> {
    let l = params.layout();
    let p = &params.values;
    let fixed = params.config.fixed();
    let mut grad = vec![0.0; l.len];
    let mut stats = LossStats::default();
    if samples.is_empty() {
        return Ok((stats, grad));
    }
    let n = samples.len() as f64;
    let k = l.k;
    let hid = l.hidden;
    let mut d_trunk = vec![0.0; hid];
    let mut d_h1 = vec![0.0; hid];

    for s in samples {
        let out = policy_forward(params, &s.observation)?;
        let means = out.effort_means(params, &s.shares);
        let (log_prob, entropy) = score(params, &out, &s.shares, &s.raw_efforts)?;

        let ratio = (log_prob - s.old_log_prob).exp();
        let clipped = ratio.clamp(1.0 - w.clip, 1.0 + w.clip);
        let surrogate = (ratio * s.advantage).min(clipped * s.advantage);
        let clip_active =
            (s.advantage > 0.0 && ratio > 1.0 + w.clip) || (s.advantage < 0.0 && ratio < 1.0 - w.clip);
        let value_err = out.value - s.target;
        stats.policy_loss -= surrogate / n;
        stats.value_loss += value_err * value_err / n;
        stats.entropy += entropy / n;
        stats.approx_kl += (s.old_log_prob - log_prob) / n;
        stats.clip_fraction += f64::from(u8::from((ratio - 1.0).abs() > w.clip)) / n;

        // dL/dlogp, dL/dH, dL/dV for this sample.
        let g_logp = if clip_active { 0.0 } else { -s.advantage * ratio / n };
        let g_ent = -w.entropy_coef / n;
        let g_value = 2.0 * w.value_coef * value_err / n;

        d_trunk.fill(0.0);

        if !fixed {
            let a0: f64 = out.concentration.iter().sum();
            let psi0 = digamma(a0);
            let tri0 = trigamma(a0);
            for i in 0..k {
                let a = out.concentration[i];
                let dlogp = psi0 - digamma(a) + s.shares[i].ln();
                let dent = (a0 - k as f64) * tri0 - (a - 1.0) * trigamma(a);
                let dz = (g_logp * dlogp + g_ent * dent) * sigmoid(out.share_logits[i]);
                grad[l.bs + i] += dz;
                let row = l.ws + i * hid;
                for j in 0..hid {
                    grad[row + j] += dz * out.trunk[j];
                    d_trunk[j] += dz * p[row + j];
                }
            }
        }

        let in_e = hid + k;
        for i in 0..k {
            let ls = out.log_std[i];
            let var = (2.0 * ls).exp();
            let diff = s.raw_efforts[i] - means[i];
            let dmu = diff / var;
            let dls = diff * diff / var - 1.0;
            grad[l.log_std + i] += g_logp * dls + g_ent;
            let dz = g_logp * dmu * means[i] * (1.0 - means[i]);
            grad[l.be + i] += dz;
            let row = l.we + i * in_e;
            for j in 0..hid {
                grad[row + j] += dz * out.trunk[j];
                d_trunk[j] += dz * p[row + j];
            }
            for j in 0..k {
                grad[row + hid + j] += dz * s.shares[j];
            }
        }

        grad[l.bv] += g_value;
        for j in 0..hid {
            grad[l.wv + j] += g_value * out.trunk[j];
            d_trunk[j] += g_value * p[l.wv + j];
        }

        d_h1.fill(0.0);
        for o in 0..hid {
            if out.trunk[o] <= 0.0 {
                continue;
            }
            let d = d_trunk[o];
            grad[l.b2 + o] += d;
            let row = l.w2 + o * hid;
            for j in 0..hid {
                grad[row + j] += d * out.h1[j];
                d_h1[j] += d * p[row + j];
            }
        }
        for o in 0..hid {
            if out.h1[o] <= 0.0 {
                continue;
            }
            let d = d_h1[o];
            grad[l.b1 + o] += d;
            let row = l.w1 + o * l.obs;
            for j in 0..l.obs {
                grad[row + j] += d * out.observation[j];
            }
        }
    }
    stats.loss = stats.policy_loss + w.value_coef * stats.value_loss - w.entropy_coef * stats.entropy;
    if !stats.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite PPO loss or gradient: {stats:?}")));
    }
    Ok((stats, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compare `analytic` with central differences of the loss on `n_params`
/// randomly chosen coordinates (all of them if the model is smaller).
pub fn grad_check_against(
    params: &PolicyParams,
    samples: &[LossSample],
    weights: &LossWeights,
    analytic: &[f64],
    n_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let len = params.values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if n_params >= len {
        (0..len).collect()
    } else {
        sample_indices(&mut rng, len, n_params).into_vec()
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: indices.len(),
        worst_index: 0,
    };
    for &i in &indices {
        let base = params.values[i];
        let h = 1e-6 * base.abs().max(1.0);
        probe.values[i] = base + h;
        let up = loss_and_grad(&probe, samples, weights)?.0.loss;
        probe.values[i] = base - h;
        let down = loss_and_grad(&probe, samples, weights)?.0.loss;
        probe.values[i] = base;
        let numeric = (up - down) / (2.0 * h);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Finite-difference check of [`loss_and_grad`] over at least 100 parameters.
pub fn grad_check(params: &PolicyParams, samples: &[LossSample], weights: &LossWeights, seed: u64) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(params, samples, weights)?;
    grad_check_against(params, samples, weights, &analytic, 200, seed)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Serialized parameters plus enough context to reuse them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCheckpoint {
    pub schema_version: u32,
    pub seed: u64,
    pub env_config_hash: String,
    pub training_steps: u64,
    pub params: PolicyParams,
}

impl PolicyCheckpoint {
    pub fn new(params: PolicyParams, seed: u64, env_config_hash: String, training_steps: u64) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            seed,
            env_config_hash,
            training_steps,
            params,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: PolicyCheckpoint =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("invalid checkpoint: {e}")))?;
        if c.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint schema_version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
                c.schema_version
            )));
        }
        if c.params.values.len() != c.params.layout().len {
            return Err(Error::Schema("checkpoint parameter count does not match its config".into()));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::bricklayer_config;

    fn small_config(k: usize) -> PolicyConfig {
        PolicyConfig {
            hidden: 16,
            ..PolicyConfig::new(k)
        }
    }

    fn schedule(k: usize, len: usize) -> ShareSchedule {
        let rest = 0.2 / (k - 1) as f64;
        let row: Vec<f64> = (0..k).map(|i| if i == 0 { 0.8 } else { rest }).collect();
        ShareSchedule {
            dominant: 0,
            start_age: 16.0,
            shares: vec![row; len],
            dominant_efforts: vec![0.8; len],
            config_hash: String::new(),
        }
    }

    /// Random parameters with larger heads so every gradient path is exercised.
    fn perturbed(config: &PolicyConfig, seed: u64) -> PolicyParams {
        let mut p = init_policy(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in p.values.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        p
    }

    fn batch(params: &PolicyParams, n: usize, seed: u64) -> Vec<LossSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut other = params.clone();
        for v in other.values.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        (0..n)
            .map(|i| {
                let obs = vec![i as f64 / n as f64, 1.0 + rng.random_range(0.0..1.5)];
                let out = policy_forward(&other, &obs).unwrap();
                let s = sample_action(&other, &out, i, &mut rng).unwrap();
                LossSample {
                    observation: obs,
                    shares: s.action.shares,
                    raw_efforts: s.raw_efforts,
                    old_log_prob: s.log_prob,
                    advantage: rng.random_range(-1.5..1.5),
                    target: rng.random_range(-1.0..1.0),
                }
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_biased() {
        let c = PolicyConfig::new(7);
        assert_eq!(init_policy(&c, 3).unwrap(), init_policy(&c, 3).unwrap());
        assert_ne!(init_policy(&c, 3).unwrap(), init_policy(&c, 4).unwrap());
        let zero_obs = [0.0, 0.0];
        for (bias, want) in [(LOW_EFFORT_BIAS, 0.20), (0.0, 0.5)] {
            let p = init_policy(&c.clone().with_effort_bias(bias), 1).unwrap();
            let out = policy_forward(&p, &zero_obs).unwrap();
            let means = out.effort_means(&p, &[1.0 / 7.0; 7]);
            let avg = means.iter().sum::<f64>() / 7.0;
            assert!((avg - want).abs() < 0.01, "bias {bias}: {avg}");
        }
        assert!(init_policy(&c, 1).unwrap().log_std().iter().all(|v| *v == -0.5));
    }

    #[test]
    fn forward_is_deterministic_and_positive() {
        let p = perturbed(&small_config(7), 2);
        let a = policy_forward(&p, &[0.3, 1.2]).unwrap();
        let b = policy_forward(&p, &[0.3, 1.2]).unwrap();
        assert_eq!(a, b);
        assert!(a.concentration.iter().all(|c| *c >= 1e-3));
        assert!(a.value.is_finite());
        assert!(policy_forward(&p, &[f64::NAN, 1.0]).is_err());
        assert!(policy_forward(&p, &[0.1]).is_err());
    }

    #[test]
    fn samples_are_valid_actions_with_consistent_log_prob() {
        let p = perturbed(&small_config(7), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 0..200 {
            let obs = [t as f64 / 200.0, 1.0];
            let out = policy_forward(&p, &obs).unwrap();
            let s = sample_action(&p, &out, t, &mut rng).unwrap();
            s.action.validate(7).unwrap();
            let (lp, _) = logprob_entropy(&p, &obs, &s.action.shares, &s.raw_efforts).unwrap();
            assert!((lp - s.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn fixed_share_uses_schedule_and_drops_share_entropy() {
        let c = small_config(7).with_fixed_share(schedule(7, 5));
        let p = init_policy(&c, 1).unwrap();
        let out = policy_forward(&p, &[0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_action(&p, &out, 9, &mut rng).unwrap();
        assert_eq!(s.action.shares, schedule(7, 1).shares[0]);
        let (_, h) = logprob_entropy(&p, &[0.0, 1.0], &s.action.shares, &s.raw_efforts).unwrap();
        assert!((h - normal_entropy(p.log_std())).abs() < 1e-12);
    }

    #[test]
    fn tiny_std_gives_mean_efforts() {
        let mut p = init_policy(&small_config(3), 1).unwrap();
        let l = p.layout();
        p.values[l.log_std..l.log_std + 3].fill(-30.0);
        let out = policy_forward(&p, &[0.5, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_action(&p, &out, 0, &mut rng).unwrap();
        let means = out.effort_means(&p, &s.action.shares);
        for (e, m) in s.action.efforts.iter().zip(means) {
            assert!((e - m).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_falls_with_log_std() {
        let mut p = init_policy(&small_config(3), 1).unwrap();
        let shares = [0.2, 0.3, 0.5];
        let efforts = [0.5, 0.5, 0.5];
        let (_, high) = logprob_entropy(&p, &[0.0, 1.0], &shares, &efforts).unwrap();
        let l = p.layout();
        p.values[l.log_std..l.log_std + 3].fill(-1.5);
        let (_, low) = logprob_entropy(&p, &[0.0, 1.0], &shares, &efforts).unwrap();
        assert!(low < high);
        assert!(logprob_entropy(&p, &[0.0, 1.0], &[0.5, 0.6, 0.1], &efforts).is_err());
    }

    #[test]
    fn dirichlet_entropy_matches_uniform_case() {
        // Dirichlet(1,...,1) on the k-simplex has entropy -ln((k-1)!).
        assert!((dirichlet_entropy(&[1.0; 4]) + 6f64.ln()).abs() < 1e-12);
        assert!((dirichlet_log_prob(&[1.0; 4], &[0.25; 4]) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let p = perturbed(&small_config(4), 8);
        let samples = batch(&p, 6, 3);
        let report = grad_check(&p, &samples, &LossWeights::default(), 1).unwrap();
        assert!(report.checked >= 100);
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn full_size_gradient_matches_finite_differences() {
        let p = perturbed(&PolicyConfig::new(7), 3);
        let samples = batch(&p, 4, 9);
        let report = grad_check(&p, &samples, &LossWeights::default(), 2).unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn fixed_share_gradient_matches_and_skips_share_head() {
        let c = small_config(4).with_fixed_share(schedule(4, 10));
        let p = perturbed(&c, 4);
        let samples = batch(&p, 6, 5);
        let (_, g) = loss_and_grad(&p, &samples, &LossWeights::default()).unwrap();
        let l = p.layout();
        assert!(g[l.share_head()].iter().all(|v| *v == 0.0));
        let report = grad_check(&p, &samples, &LossWeights::default(), 3).unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn value_only_loss_is_checked_tightly() {
        let p = perturbed(&small_config(3), 6);
        let mut samples = batch(&p, 5, 6);
        samples.iter_mut().for_each(|s| s.advantage = 0.0);
        let w = LossWeights {
            entropy_coef: 0.0,
            ..LossWeights::default()
        };
        let (_, g) = loss_and_grad(&p, &samples, &w).unwrap();
        let l = p.layout();
        let report = grad_check_against(&p, &samples, &w, &g, usize::MAX, 0).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert!(g[l.ws..l.log_std + l.k].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let p = perturbed(&small_config(3), 7);
        let samples = batch(&p, 4, 7);
        let w = LossWeights::default();
        let (_, mut g) = loss_and_grad(&p, &samples, &w).unwrap();
        g.iter_mut().for_each(|v| *v *= 1.1);
        let report = grad_check_against(&p, &samples, &w, &g, 200, 0).unwrap();
        assert!(!report.passed(1e-4));
    }

    #[test]
    fn clipped_sample_has_no_policy_gradient() {
        let p = perturbed(&small_config(3), 9);
        let mut samples = batch(&p, 1, 9);
        let (lp, _) = logprob_entropy(&p, &samples[0].observation, &samples[0].shares, &samples[0].raw_efforts).unwrap();
        samples[0].old_log_prob = lp - 1.0;
        samples[0].advantage = 1.0;
        let w = LossWeights {
            value_coef: 0.0,
            entropy_coef: 0.0,
            ..LossWeights::default()
        };
        let (_, g) = loss_and_grad(&p, &samples, &w).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        samples[0].old_log_prob = lp;
        samples[0].advantage = 0.0;
        let (_, g) = loss_and_grad(&p, &samples, &w).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn checkpoint_round_trips() {
        let c = PolicyConfig::new(7).with_fixed_share(schedule(7, 3));
        let p = init_policy(&c, 11).unwrap();
        let ck = PolicyCheckpoint::new(p, 11, bricklayer_config().hash(), 500);
        let text = serde_json::to_string(&ck).unwrap();
        assert_eq!(PolicyCheckpoint::from_json(&text).unwrap(), ck);
        let mut bad = serde_json::to_value(&ck).unwrap();
        bad["schema_version"] = 7.into();
        assert!(PolicyCheckpoint::from_json(&bad.to_string()).is_err());
    }
}
