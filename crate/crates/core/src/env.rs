//! Deterministic cumulative-damage career simulator.
//!
//! One step of the simulator maps an activity allocation (shares on the
//! simplex plus per-activity efforts) to a reward, and advances the latent
//! joint state: cartilage damage `D`, meniscal integrity `M` and age. The
//! agent-facing observation only ever exposes normalized time and the proxy
//! signal `S = 1 + gain * D^exponent`.
//!
//! Within a step effects are applied in a fixed order:
//!
//! 1. load and shear from the allocation,
//! 2. reward from the pre-update damage and proxy,
//! 3. optional soft role penalty,
//! 4. damage update, then meniscal update (both from pre-update values),
//! 5. the dominant share is pushed onto the trailing window,
//! 6. terminal checks: role exit, capacity exit, then the age limit.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the simplex constraint for action shares.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivitySpec {
    pub name: String,
    pub energy: f64,
    pub hazard: f64,
    pub perf: f64,
}

impl ActivitySpec {
    pub fn new(name: &str, energy: f64, hazard: f64, perf: f64) -> Self {
        Self {
            name: name.to_string(),
            energy,
            hazard,
            perf,
        }
    }
}

/// How per-activity hazards aggregate into a joint load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LoadModel {
    /// Hazards on a 0-100 scale split into stress/strain/shear components;
    /// `composite` is the weighted sum applied to `h / 100` and
    /// `shear_fraction` the shear component that drives meniscal drain.
    WeightedDecomposition { composite: f64, shear_fraction: f64 },
    /// `load = sum(s e h) / h_max`; shear equals load.
    NormalizedHazard { h_max: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsParams {
    pub damage_scale: f64,
    pub baratz_exponent: f64,
    pub baratz_intercept: f64,
    pub baratz_slope: f64,
    pub bmi_slope: f64,
    pub bmi_pivot: f64,
    pub recovery_scale: f64,
    pub recovery_pivot_age: f64,
    pub recovery_span: f64,
    pub meniscal_base_rate: f64,
    pub amp_threshold: f64,
    pub amp_slope: f64,
    pub onset_age: f64,
    pub onset_slope: f64,
    pub onset_span: f64,
    pub proxy_gain: f64,
    pub proxy_exponent: f64,
    pub clinical_threshold: f64,
    pub capacity_slope: f64,
    pub effort_exponent: f64,
}

impl DynamicsParams {
    /// BMI multiplier `b(bmi)`.
    pub fn bmi_factor(&self, bmi: f64) -> f64 {
        1.0 + self.bmi_slope * (bmi - self.bmi_pivot).max(0.0)
    }

    /// Age-dependent recovery `r(age)`. Not capped for ages below the pivot.
    pub fn recovery(&self, age: f64) -> f64 {
        self.recovery_scale * (1.0 - (age - self.recovery_pivot_age) / self.recovery_span).max(0.0)
    }

    /// Meniscal amplification of damage, `m(M) = 1 / (intercept + slope * M)`.
    pub fn baratz(&self, meniscus: f64) -> f64 {
        1.0 / (self.baratz_intercept + self.baratz_slope * meniscus)
    }

    /// Self-amplification of meniscal drain below the threshold.
    pub fn amplification(&self, meniscus: f64) -> f64 {
        if meniscus < self.amp_threshold {
            1.0 + self.amp_slope * (self.amp_threshold - meniscus)
        } else {
            1.0
        }
    }

    /// Age-onset factor for meniscal drain.
    pub fn onset(&self, age: f64) -> f64 {
        if age >= self.onset_age {
            1.0 + self.onset_slope * (age - self.onset_age) / self.onset_span
        } else {
            1.0
        }
    }

    pub fn proxy_signal(&self, damage: f64) -> f64 {
        1.0 + self.proxy_gain * damage.powf(self.proxy_exponent)
    }

    /// Capacity feedback `h_occ`; silent at or below the clinical threshold.
    pub fn capacity_factor(&self, damage: f64, proxy: f64) -> f64 {
        if damage > self.clinical_threshold {
            (1.0 - self.capacity_slope * (damage - self.clinical_threshold) * proxy).max(0.0)
        } else {
            1.0
        }
    }

    pub fn damage_step(&self, damage: f64, load: f64, meniscus: f64, bmi: f64, age: f64) -> f64 {
        let increment = self.damage_scale
            * load
            * self.bmi_factor(bmi)
            * self.baratz(meniscus).powf(self.baratz_exponent);
        (damage + increment - self.recovery(age)).clamp(0.0, 1.0)
    }

    pub fn meniscal_step(&self, meniscus: f64, shear: f64, age: f64) -> f64 {
        let drain =
            self.meniscal_base_rate * shear * self.amplification(meniscus) * self.onset(age);
        (meniscus - drain).clamp(0.0, 1.0)
    }
}

/// Trailing-window rule on the dominant activity's share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleRule {
    pub window: usize,
    pub threshold: f64,
    pub dominant: usize,
}

impl RoleRule {
    /// True only once the window is full and its mean is strictly below the threshold.
    pub fn violated(&self, history: &VecDeque<f64>) -> bool {
        if history.len() < self.window {
            return false;
        }
        let mean = history.iter().sum::<f64>() / history.len() as f64;
        mean < self.threshold
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: String,
    pub activities: Vec<ActivitySpec>,
    pub load_model: LoadModel,
    pub dynamics: DynamicsParams,
    pub role: RoleRule,
    pub horizon: usize,
    pub start_age: f64,
    pub bmi: f64,
    #[serde(default)]
    pub zero_proxy: bool,
    #[serde(default)]
    pub no_exit: bool,
}

impl EnvConfig {
    pub fn num_activities(&self) -> usize {
        self.activities.len()
    }

    pub fn perf_max(&self) -> f64 {
        self.activities
            .iter()
            .map(|a| a.perf)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn terminal_age(&self) -> f64 {
        self.start_age + self.horizon as f64
    }

    pub fn age_at(&self, t: usize) -> f64 {
        self.start_age + t as f64
    }

    pub fn hazards(&self) -> Vec<f64> {
        self.activities.iter().map(|a| a.hazard).collect()
    }

    /// Copy with a different horizon, keeping the start age.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Latent simulator state. Never exposed to the agent directly.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub damage: f64,
    pub meniscus: f64,
    pub t: usize,
    pub age: f64,
    pub share_history: VecDeque<f64>,
    pub done: bool,
}

impl EnvState {
    pub fn initial(config: &EnvConfig) -> Self {
        Self {
            damage: 0.0,
            meniscus: 1.0,
            t: 0,
            age: config.start_age,
            share_history: VecDeque::with_capacity(config.role.window),
            done: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub shares: Vec<f64>,
    pub efforts: Vec<f64>,
}

impl Action {
    pub fn new(shares: Vec<f64>, efforts: Vec<f64>) -> Self {
        Self { shares, efforts }
    }

    /// All share on one activity at the given effort.
    pub fn one_hot(k: usize, index: usize, effort: f64) -> Self {
        let mut shares = vec![0.0; k];
        shares[index] = 1.0;
        Self {
            shares,
            efforts: vec![effort; k],
        }
    }

    /// Dominant share `s`, the remainder uniform over the other activities.
    pub fn dominant_split(
        k: usize,
        dominant: usize,
        share: f64,
        dominant_effort: f64,
        other_effort: f64,
    ) -> Self {
        let rest = (1.0 - share) / (k - 1) as f64;
        let shares = (0..k).map(|i| if i == dominant { share } else { rest }).collect();
        let efforts = (0..k)
            .map(|i| if i == dominant { dominant_effort } else { other_effort })
            .collect();
        Self { shares, efforts }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.shares.len() != k || self.efforts.len() != k {
            return Err(Error::Config(format!(
                "action has {} shares and {} efforts, environment has {k} activities",
                self.shares.len(),
                self.efforts.len()
            )));
        }
        if self.shares.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Usage("action shares must be finite and non-negative".into()));
        }
        let total: f64 = self.shares.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Usage(format!("action shares sum to {total}, not 1")));
        }
        if self.efforts.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::Usage("action efforts must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    None,
    RoleExit,
    CapacityExit,
    AgeLimit,
}

impl Termination {
    pub fn is_terminal(self) -> bool {
        self != Termination::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Termination::None => "none",
            Termination::RoleExit => "role_exit",
            Termination::CapacityExit => "capacity_exit",
            Termination::AgeLimit => "age_limit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Post-update damage.
    pub damage: f64,
    /// Post-update meniscal integrity.
    pub meniscus: f64,
    pub load: f64,
    pub shear: f64,
    /// Proxy signal used for this step's reward.
    pub proxy: f64,
    /// Capacity factor used for this step's reward.
    pub capacity: f64,
    /// Shaping term (zero or negative). Never part of `reward`.
    pub penalty: f64,
    pub dominant_share: f64,
    pub role_violation: bool,
    pub capacity_violation: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub observation: Vec<f64>,
    pub termination: Termination,
    pub diagnostics: StepDiagnostics,
}

/// One row of a trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: usize,
    /// Age at which the step was taken.
    pub age: f64,
    pub damage: f64,
    pub meniscus: f64,
    pub proxy: f64,
    pub load: f64,
    pub reward: f64,
    pub dominant_share: f64,
    pub efforts: Vec<f64>,
    pub termination: Termination,
}

impl TrajectoryRow {
    pub fn new(t: usize, age: f64, action: &Action, outcome: &StepOutcome) -> Self {
        Self {
            t,
            age,
            damage: outcome.diagnostics.damage,
            meniscus: outcome.diagnostics.meniscus,
            proxy: outcome.diagnostics.proxy,
            load: outcome.diagnostics.load,
            reward: outcome.reward,
            dominant_share: outcome.diagnostics.dominant_share,
            efforts: action.efforts.clone(),
            termination: outcome.termination,
        }
    }
}

/// Joint load and its shear component for an allocation.
pub fn compute_load(
    shares: &[f64],
    efforts: &[f64],
    activities: &[ActivitySpec],
    model: &LoadModel,
) -> Result<(f64, f64)> {
    if shares.len() != activities.len() || efforts.len() != activities.len() {
        return Err(Error::Config(format!(
            "load inputs have lengths {}/{} for {} activities",
            shares.len(),
            efforts.len(),
            activities.len()
        )));
    }
    let exposure: f64 = shares
        .iter()
        .zip(efforts)
        .zip(activities)
        .map(|((s, e), a)| s * e * a.hazard)
        .sum();
    Ok(match *model {
        LoadModel::WeightedDecomposition {
            composite,
            shear_fraction,
        } => (composite * exposure / 100.0, shear_fraction * exposure / 100.0),
        LoadModel::NormalizedHazard { h_max } => {
            let load = exposure / h_max;
            (load, load)
        }
    })
}

/// `sum_i s_i e_i^beta perf_i / perf_max`, the reward before capacity feedback.
pub fn performance(
    shares: &[f64],
    efforts: &[f64],
    activities: &[ActivitySpec],
    effort_exponent: f64,
    perf_max: f64,
) -> f64 {
    shares
        .iter()
        .zip(efforts)
        .zip(activities)
        .map(|((s, e), a)| s * e.powf(effort_exponent) * a.perf)
        .sum::<f64>()
        / perf_max
}

pub fn step_reward(
    shares: &[f64],
    efforts: &[f64],
    capacity: f64,
    activities: &[ActivitySpec],
    effort_exponent: f64,
) -> f64 {
    let perf_max = activities
        .iter()
        .map(|a| a.perf)
        .fold(f64::NEG_INFINITY, f64::max);
    capacity * performance(shares, efforts, activities, effort_exponent, perf_max)
}

/// Result of applying one allocation to a `(D, M, age)` point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub damage: f64,
    pub meniscus: f64,
    pub proxy: f64,
    pub capacity: f64,
    /// Capacity factor at the post-update damage; zero means capacity exit.
    pub next_capacity: f64,
}

/// Stateless core of a step, given a precomputed load, shear and performance term.
pub fn transition_from_load(
    config: &EnvConfig,
    damage: f64,
    meniscus: f64,
    age: f64,
    load: f64,
    shear: f64,
    perf: f64,
) -> Transition {
    let p = &config.dynamics;
    let proxy = p.proxy_signal(damage);
    let capacity = p.capacity_factor(damage, proxy);
    let next_damage = p.damage_step(damage, load, meniscus, config.bmi, age);
    let next_meniscus = p.meniscal_step(meniscus, shear, age);
    let next_capacity = p.capacity_factor(next_damage, p.proxy_signal(next_damage));
    Transition {
        reward: capacity * perf,
        damage: next_damage,
        meniscus: next_meniscus,
        proxy,
        capacity,
        next_capacity,
    }
}

/// Observation `[t / H, S]`, with `S` replaced by zero under `zero_proxy`.
pub fn observe(state: &EnvState, config: &EnvConfig) -> Vec<f64> {
    let progress = state.t as f64 / config.horizon as f64;
    let proxy = if config.zero_proxy {
        0.0
    } else {
        config.dynamics.proxy_signal(state.damage)
    };
    vec![progress, proxy]
}

pub const OBSERVATION_DIM: usize = 2;

/// Advance `state` by one step. Stepping a terminal state is a usage error.
pub fn step_state(
    config: &EnvConfig,
    state: &mut EnvState,
    action: &Action,
    penalty_weight: f64,
) -> Result<StepOutcome> {
    if state.done || state.t >= config.horizon {
        return Err(Error::Usage("step called on a terminal state".into()));
    }
    let k = config.num_activities();
    action.validate(k)?;

    let (load, shear) = compute_load(
        &action.shares,
        &action.efforts,
        &config.activities,
        &config.load_model,
    )?;
    let perf = performance(
        &action.shares,
        &action.efforts,
        &config.activities,
        config.dynamics.effort_exponent,
        config.perf_max(),
    );
    let tr = transition_from_load(
        config,
        state.damage,
        state.meniscus,
        state.age,
        load,
        shear,
        perf,
    );

    let role = &config.role;
    let dominant_share = action.shares[role.dominant];
    let penalty = if penalty_weight > 0.0 && dominant_share < role.threshold {
        -penalty_weight
    } else {
        0.0
    };

    state.damage = tr.damage;
    state.meniscus = tr.meniscus;
    if state.share_history.len() == role.window {
        state.share_history.pop_front();
    }
    state.share_history.push_back(dominant_share);
    state.t += 1;
    state.age = config.age_at(state.t);

    let role_violation = role.violated(&state.share_history);
    let capacity_violation = tr.next_capacity <= 0.0;
    let termination = if !config.no_exit && role_violation {
        Termination::RoleExit
    } else if !config.no_exit && capacity_violation {
        Termination::CapacityExit
    } else if state.t == config.horizon {
        Termination::AgeLimit
    } else {
        Termination::None
    };
    state.done = termination.is_terminal();

    Ok(StepOutcome {
        reward: tr.reward,
        observation: observe(state, config),
        termination,
        diagnostics: StepDiagnostics {
            damage: tr.damage,
            meniscus: tr.meniscus,
            load,
            shear,
            proxy: tr.proxy,
            capacity: tr.capacity,
            penalty,
            dominant_share,
            role_violation,
            capacity_violation,
        },
    })
}

/// Owned simulator instance: a config plus its evolving state.
#[derive(Clone, Debug)]
pub struct Env {
    config: EnvConfig,
    state: EnvState,
    penalty_weight: f64,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        let violations = crate::presets::validate_config(&config);
        if !violations.is_empty() {
            return Err(Error::Config(violations.join("; ")));
        }
        let state = EnvState::initial(&config);
        Ok(Self {
            config,
            state,
            penalty_weight: 0.0,
        })
    }

    /// Linear soft role penalty applied as `-w` on steps with dominant share below the threshold.
    pub fn with_penalty(mut self, weight: f64) -> Self {
        self.penalty_weight = weight;
        self
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Back to `D = 0, M = 1` at the start age. Dynamics are deterministic,
    /// so no seed is involved.
    pub fn reset(&mut self) -> Vec<f64> {
        self.state = EnvState::initial(&self.config);
        observe(&self.state, &self.config)
    }

    pub fn observe(&self) -> Vec<f64> {
        observe(&self.state, &self.config)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        step_state(&self.config, &mut self.state, action, self.penalty_weight)
    }
}
