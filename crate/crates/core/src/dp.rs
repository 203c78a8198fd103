//! Backward induction over the `(D, M, age)` grid.
//!
//! The action space is the fixed-share family: a dominant-share level and a
//! dominant-effort level per year, with the remaining share spread uniformly
//! over the other activities at a fixed effort. Off-grid successors are read
//! back by bilinear (or nearest-node) interpolation of the next age slice.

use serde::{Deserialize, Serialize};

use crate::env::{
    compute_load, performance, step_state, transition_from_load, Action, EnvConfig, EnvState,
    Termination, TrajectoryRow,
};
use crate::error::{Error, Result};
use crate::presets::PresetId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub damage_step: f64,
    pub meniscus_step: f64,
    /// Candidate dominant-share levels.
    pub share_levels: Vec<f64>,
    /// Candidate dominant-effort levels.
    pub effort_levels: Vec<f64>,
    /// Effort on every non-dominant activity.
    pub other_effort: f64,
    #[serde(default)]
    pub interpolation: Interpolation,
}

/// Evenly spaced levels from `lo` to `hi` inclusive.
pub fn levels(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n)
        .map(|i| ((lo + i as f64 * step) * 1e10).round() / 1e10)
        .collect()
}

impl GridSpec {
    pub fn bricklayer() -> Self {
        Self {
            damage_step: 0.01,
            meniscus_step: 0.01,
            share_levels: levels(0.15, 0.80, 0.05),
            effort_levels: levels(0.20, 0.80, 0.05),
            other_effort: 0.40,
            interpolation: Interpolation::Bilinear,
        }
    }

    pub fn nba() -> Self {
        Self {
            damage_step: 0.02,
            meniscus_step: 0.053,
            ..Self::bricklayer()
        }
    }

    pub fn for_preset(id: PresetId) -> Self {
        match id {
            PresetId::Bricklayer => Self::bricklayer(),
            PresetId::Nba => Self::nba(),
        }
    }

    /// Same action grid with coarser state resolution.
    pub fn with_resolution(mut self, damage_step: f64, meniscus_step: f64) -> Self {
        self.damage_step = damage_step;
        self.meniscus_step = meniscus_step;
        self
    }

    pub fn validate(&self, config: &EnvConfig) -> Result<()> {
        for (name, step) in [("damage_step", self.damage_step), ("meniscus_step", self.meniscus_step)] {
            if !(step > 0.0 && step <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {step}")));
            }
        }
        if self.share_levels.is_empty() || self.effort_levels.is_empty() {
            return Err(Error::Config("share and effort grids must be non-empty".into()));
        }
        if self
            .share_levels
            .iter()
            .any(|s| !(*s >= config.role.threshold && *s <= 1.0))
        {
            return Err(Error::Config(format!(
                "share levels must lie in [{}, 1] so every candidate satisfies the role rule",
                config.role.threshold
            )));
        }
        if self
            .effort_levels
            .iter()
            .chain(std::iter::once(&self.other_effort))
            .any(|e| !(0.0..=1.0).contains(e))
        {
            return Err(Error::Config("effort levels must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Grid nodes on `[0, 1]`; when `step` does not divide 1 the final cell is truncated at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub step: f64,
    pub nodes: Vec<f64>,
}

impl Axis {
    pub fn new(step: f64) -> Self {
        let intervals = (1.0 / step - 1e-9).ceil() as usize;
        let mut nodes: Vec<f64> = (0..intervals).map(|i| i as f64 * step).collect();
        nodes.push(1.0);
        Self { step, nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Lower cell index and the fractional position inside that cell.
    fn locate(&self, x: f64) -> (usize, f64) {
        let last = self.nodes.len() - 2;
        let i = ((x / self.step).floor().max(0.0) as usize).min(last);
        let (lo, hi) = (self.nodes[i], self.nodes[i + 1]);
        (i, ((x - lo) / (hi - lo)).clamp(0.0, 1.0))
    }
}

/// One element of the DP action set.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub share: f64,
    pub effort: f64,
    pub action: Action,
    load: f64,
    shear: f64,
    perf: f64,
}

/// Effort-major ordering; scanning in order with a strict `>` breaks ties
/// toward lower effort, then lower dominant share.
pub fn candidates(config: &EnvConfig, grid: &GridSpec) -> Result<Vec<Candidate>> {
    let k = config.num_activities();
    let dominant = config.role.dominant;
    let perf_max = config.perf_max();
    let mut out = Vec::with_capacity(grid.share_levels.len() * grid.effort_levels.len());
    for &effort in &grid.effort_levels {
        for &share in &grid.share_levels {
            let action = Action::dominant_split(k, dominant, share, effort, grid.other_effort);
            let (load, shear) =
                compute_load(&action.shares, &action.efforts, &config.activities, &config.load_model)?;
            let perf = performance(
                &action.shares,
                &action.efforts,
                &config.activities,
                config.dynamics.effort_exponent,
                perf_max,
            );
            out.push(Candidate {
                share,
                effort,
                action,
                load,
                shear,
                perf,
            });
        }
    }
    Ok(out)
}

/// Values of one age slice on the `(D, M)` grid.
#[derive(Clone, Copy)]
struct Slice<'a> {
    values: &'a [f64],
    damage: &'a Axis,
    meniscus: &'a Axis,
    interpolation: Interpolation,
}

impl Slice<'_> {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.meniscus.len() + j]
    }

    fn interpolate(&self, damage: f64, meniscus: f64) -> f64 {
        let (i, u) = self.damage.locate(damage);
        let (j, v) = self.meniscus.locate(meniscus);
        match self.interpolation {
            Interpolation::Bilinear => {
                (1.0 - u) * ((1.0 - v) * self.at(i, j) + v * self.at(i, j + 1))
                    + u * ((1.0 - v) * self.at(i + 1, j) + v * self.at(i + 1, j + 1))
            }
            Interpolation::Nearest => {
                let i = if u < 0.5 { i } else { i + 1 };
                let j = if v < 0.5 { j } else { j + 1 };
                self.at(i, j)
            }
        }
    }
}

/// Best candidate at an arbitrary `(D, M)` point; `next` is `None` on the final step.
fn best_candidate(
    config: &EnvConfig,
    cands: &[Candidate],
    next: Option<Slice<'_>>,
    age: f64,
    damage: f64,
    meniscus: f64,
) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (idx, c) in cands.iter().enumerate() {
        let tr = transition_from_load(config, damage, meniscus, age, c.load, c.shear, c.perf);
        let exits = !config.no_exit && tr.next_capacity <= 0.0;
        let cont = match next {
            Some(slice) if !exits => slice.interpolate(tr.damage, tr.meniscus),
            _ => 0.0,
        };
        let q = tr.reward + cont;
        if q > best.1 {
            best = (idx, q);
        }
    }
    best
}

/// Solved backward-induction table. `values` has `horizon + 1` age slices
/// (the last is the zero terminal value); `argmax` has `horizon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub grid: GridSpec,
    pub damage_axis: Axis,
    pub meniscus_axis: Axis,
    pub horizon: usize,
    pub start_age: f64,
    pub config_hash: String,
    pub values: Vec<f64>,
    pub argmax: Vec<u32>,
}

impl ValueTable {
    fn slice_len(&self) -> usize {
        self.damage_axis.len() * self.meniscus_axis.len()
    }

    fn slice(&self, t: usize) -> Slice<'_> {
        let n = self.slice_len();
        Slice {
            values: &self.values[t * n..(t + 1) * n],
            damage: &self.damage_axis,
            meniscus: &self.meniscus_axis,
            interpolation: self.grid.interpolation,
        }
    }

    pub fn value(&self, t: usize, i: usize, j: usize) -> f64 {
        self.values[t * self.slice_len() + i * self.meniscus_axis.len() + j]
    }

    /// Interpolated value at step `t` (`0 <= t <= horizon`).
    pub fn interpolate_value(&self, damage: f64, meniscus: f64, t: usize) -> f64 {
        self.slice(t).interpolate(damage.clamp(0.0, 1.0), meniscus.clamp(0.0, 1.0))
    }

    /// `(dominant share, dominant effort)` chosen at grid node `(i, j)` on step `t`.
    pub fn argmax_levels(&self, t: usize, i: usize, j: usize) -> (f64, f64) {
        let idx = self.argmax[t * self.slice_len() + i * self.meniscus_axis.len() + j] as usize;
        let n_share = self.grid.share_levels.len();
        (self.grid.share_levels[idx % n_share], self.grid.effort_levels[idx / n_share])
    }

    /// Value from the initial state `D = 0, M = 1`.
    pub fn initial_value(&self) -> f64 {
        self.interpolate_value(0.0, 1.0, 0)
    }
}

/// Finite-horizon backward induction with zero terminal value.
pub fn solve_dp(config: &EnvConfig, grid: &GridSpec) -> Result<ValueTable> {
    let violations = crate::presets::validate_config(config);
    if !violations.is_empty() {
        return Err(Error::Config(violations.join("; ")));
    }
    grid.validate(config)?;
    let cands = candidates(config, grid)?;
    let damage_axis = Axis::new(grid.damage_step);
    let meniscus_axis = Axis::new(grid.meniscus_step);
    let (nd, nm) = (damage_axis.len(), meniscus_axis.len());
    let n = nd * nm;
    let h = config.horizon;
    let mut values = vec![0.0; (h + 1) * n];
    let mut argmax = vec![0u32; h * n];
    let threads = std::thread::available_parallelism().map_or(1, |p| p.get());
    let rows_per_chunk = nd.div_ceil(threads);

    for t in (0..h).rev() {
        let age = config.age_at(t);
        let (head, tail) = values.split_at_mut((t + 1) * n);
        let current = &mut head[t * n..];
        let next = (t + 1 < h).then(|| Slice {
            values: &tail[..n],
            damage: &damage_axis,
            meniscus: &meniscus_axis,
            interpolation: grid.interpolation,
        });
        let policy = &mut argmax[t * n..(t + 1) * n];
        let solve_rows = |row0: usize, vals: &mut [f64], pol: &mut [u32]| {
            for (r, (vrow, prow)) in vals.chunks_mut(nm).zip(pol.chunks_mut(nm)).enumerate() {
                let damage = damage_axis.nodes[row0 + r];
                for (j, (v, p)) in vrow.iter_mut().zip(prow.iter_mut()).enumerate() {
                    let (idx, q) =
                        best_candidate(config, &cands, next, age, damage, meniscus_axis.nodes[j]);
                    *v = q;
                    *p = idx as u32;
                }
            }
        };
        if threads == 1 {
            solve_rows(0, current, policy);
        } else {
            std::thread::scope(|scope| {
                let chunk = rows_per_chunk * nm;
                for (c, (vals, pol)) in current
                    .chunks_mut(chunk)
                    .zip(policy.chunks_mut(chunk))
                    .enumerate()
                {
                    let solve_rows = &solve_rows;
                    scope.spawn(move || solve_rows(c * rows_per_chunk, vals, pol));
                }
            });
        }
    }

    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in value table".into()));
    }
    Ok(ValueTable {
        grid: grid.clone(),
        damage_axis,
        meniscus_axis,
        horizon: h,
        start_age: config.start_age,
        config_hash: config.hash(),
        values,
        argmax,
    })
}

/// Deterministic rollout of a fixed action sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub rows: Vec<TrajectoryRow>,
    pub actions: Vec<Action>,
    pub total_return: f64,
    pub m_final: f64,
    pub d_final: f64,
    pub termination: Termination,
}

impl RolloutReport {
    pub fn completed(&self) -> bool {
        self.termination == Termination::AgeLimit
    }

    pub fn length(&self) -> usize {
        self.rows.len()
    }

    pub fn exit_age(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.age + 1.0)
    }
}

/// Roll out one action per year (the last action repeats if the sequence is short).
pub fn schedule_rollout(config: &EnvConfig, actions: &[Action]) -> Result<RolloutReport> {
    rollout_with(config, |t, _| {
        actions
            .get(t)
            .or(actions.last())
            .cloned()
            .ok_or_else(|| Error::Usage("empty action schedule".into()))
    })
}

fn rollout_with(
    config: &EnvConfig,
    mut policy: impl FnMut(usize, &EnvState) -> Result<Action>,
) -> Result<RolloutReport> {
    let mut state = EnvState::initial(config);
    let mut rows = Vec::with_capacity(config.horizon);
    let mut actions = Vec::with_capacity(config.horizon);
    let mut total_return = 0.0;
    let mut termination = Termination::None;
    while !termination.is_terminal() {
        let t = state.t;
        let age = state.age;
        let action = policy(t, &state)?;
        let out = step_state(config, &mut state, &action, 0.0)?;
        total_return += out.reward;
        termination = out.termination;
        rows.push(TrajectoryRow::new(t, age, &action, &out));
        actions.push(action);
    }
    Ok(RolloutReport {
        rows,
        actions,
        total_return,
        m_final: state.meniscus,
        d_final: state.damage,
        termination,
    })
}

/// Greedy rollout of the DP policy from `D = 0, M = 1`, re-maximizing the
/// one-step lookahead at each visited (generally off-grid) state.
pub fn dp_trajectory(config: &EnvConfig, table: &ValueTable) -> Result<RolloutReport> {
    if table.horizon != config.horizon || table.config_hash != config.hash() {
        return Err(Error::Usage("value table was solved for a different config".into()));
    }
    let cands = candidates(config, &table.grid)?;
    rollout_with(config, |t, state| {
        let next = (t + 1 < table.horizon).then(|| table.slice(t + 1));
        let (idx, _) = best_candidate(config, &cands, next, state.age, state.damage, state.meniscus);
        Ok(cands[idx].action.clone())
    })
}

/// [`dp_trajectory`] for a reference that must complete the career.
pub fn dp_rollout(config: &EnvConfig, table: &ValueTable) -> Result<RolloutReport> {
    let report = dp_trajectory(config, table)?;
    if !report.completed() {
        return Err(Error::Internal(format!(
            "DP reference terminated with {} at step {}",
            report.termination.as_str(),
            report.length()
        )));
    }
    Ok(report)
}

/// Age-stratified allocation read from the DP argmax along its greedy trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareSchedule {
    pub dominant: usize,
    pub start_age: f64,
    pub shares: Vec<Vec<f64>>,
    /// Dominant effort chosen alongside each share vector.
    pub dominant_efforts: Vec<f64>,
    pub config_hash: String,
}

impl ShareSchedule {
    pub fn len(&self) -> usize {
        self.shares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares.is_empty()
    }

    /// Share vector for step `t`; past the end the last year repeats.
    pub fn shares_at(&self, t: usize) -> &[f64] {
        &self.shares[t.min(self.shares.len() - 1)]
    }

    pub fn dominant_share(&self, t: usize) -> f64 {
        self.shares_at(t)[self.dominant]
    }

    /// The DP's own (share, effort) choices as a full action sequence.
    pub fn actions(&self, other_effort: f64) -> Vec<Action> {
        self.shares
            .iter()
            .zip(&self.dominant_efforts)
            .map(|(s, &e)| {
                let efforts = (0..s.len())
                    .map(|i| if i == self.dominant { e } else { other_effort })
                    .collect();
                Action::new(s.clone(), efforts)
            })
            .collect()
    }

    /// Stretch to `horizon` steps by repeating the final year.
    pub fn extended(&self, horizon: usize) -> Self {
        let mut out = self.clone();
        while out.shares.len() < horizon {
            out.shares.push(self.shares.last().cloned().unwrap_or_default());
            out.dominant_efforts.push(self.dominant_efforts.last().copied().unwrap_or(0.0));
        }
        out.shares.truncate(horizon.max(1));
        out.dominant_efforts.truncate(horizon.max(1));
        out
    }
}

pub fn extract_share_schedule(table: &ValueTable, config: &EnvConfig) -> Result<ShareSchedule> {
    let report = dp_rollout(config, table)?;
    Ok(ShareSchedule {
        dominant: config.role.dominant,
        start_age: config.start_age,
        shares: report.actions.iter().map(|a| a.shares.clone()).collect(),
        dominant_efforts: report
            .actions
            .iter()
            .map(|a| a.efforts[config.role.dominant])
            .collect(),
        config_hash: table.config_hash.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ActivitySpec, DynamicsParams, LoadModel, RoleRule};
    use crate::presets::{bricklayer_config, nba_config};

    /// Two activities and dynamics chosen so every successor of a grid node
    /// is itself a node of the 0.25 grid.
    fn grid_aligned_instance() -> (EnvConfig, GridSpec) {
        let config = EnvConfig {
            name: "aligned".into(),
            activities: vec![
                ActivitySpec::new("heavy", 50.0, 100.0, 100.0),
                ActivitySpec::new("light", 20.0, 0.0, 50.0),
            ],
            load_model: LoadModel::NormalizedHazard { h_max: 100.0 },
            dynamics: DynamicsParams {
                damage_scale: 1.0,
                baratz_intercept: 1.0,
                baratz_slope: 0.0,
                recovery_scale: 0.0,
                meniscal_base_rate: 1.0,
                amp_slope: 0.0,
                onset_age: 1000.0,
                ..bricklayer_config().dynamics
            },
            role: RoleRule {
                window: 2,
                threshold: 0.1,
                dominant: 0,
            },
            horizon: 3,
            start_age: 20.0,
            bmi: 22.0,
            zero_proxy: false,
            no_exit: false,
        };
        let grid = GridSpec {
            damage_step: 0.25,
            meniscus_step: 0.25,
            share_levels: vec![0.5, 1.0],
            effort_levels: vec![0.5, 1.0],
            other_effort: 0.4,
            interpolation: Interpolation::Bilinear,
        };
        (config, grid)
    }

    /// Exhaustive search over every action sequence by direct simulation.
    fn brute_force_best_return(config: &EnvConfig, grid: &GridSpec) -> f64 {
        let k = config.num_activities();
        let mut actions = Vec::new();
        for &e in &grid.effort_levels {
            for &s in &grid.share_levels {
                actions.push(Action::dominant_split(k, 0, s, e, grid.other_effort));
            }
        }
        let n = actions.len();
        let mut best = f64::NEG_INFINITY;
        for code in 0..n.pow(config.horizon as u32) {
            let mut state = EnvState::initial(config);
            let mut c = code;
            let mut total = 0.0;
            for _ in 0..config.horizon {
                let out = step_state(config, &mut state, &actions[c % n], 0.0).unwrap();
                c /= n;
                total += out.reward;
                if out.termination.is_terminal() {
                    break;
                }
            }
            best = best.max(total);
        }
        best
    }

    #[test]
    fn levels_are_clean() {
        let s = levels(0.15, 0.80, 0.05);
        assert_eq!(s.len(), 14);
        assert_eq!(s[0], 0.15);
        assert_eq!(s[13], 0.8);
        assert_eq!(levels(0.20, 0.80, 0.05).len(), 13);
    }

    #[test]
    fn axis_truncates_final_cell() {
        let a = Axis::new(0.053);
        assert_eq!(a.len(), 20);
        assert!((a.nodes[18] - 0.954).abs() < 1e-12);
        assert_eq!(a.nodes[19], 1.0);
        assert_eq!(Axis::new(0.01).len(), 101);
        assert_eq!(Axis::new(0.25).nodes, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let (i, w) = a.locate(1.0);
        assert_eq!((i, w), (18, 1.0));
    }

    #[test]
    fn matches_exhaustive_enumeration_on_aligned_grid() {
        let (config, grid) = grid_aligned_instance();
        let table = solve_dp(&config, &grid).unwrap();
        let oracle = brute_force_best_return(&config, &grid);
        assert!((table.initial_value() - oracle).abs() < 1e-12, "{} vs {oracle}", table.initial_value());
        let report = dp_trajectory(&config, &table).unwrap();
        assert!((report.total_return - oracle).abs() < 1e-12);
    }

    #[test]
    fn horizon_one_is_best_immediate_reward() {
        let config = bricklayer_config().with_horizon(1);
        let grid = GridSpec::bricklayer().with_resolution(0.1, 0.1);
        let table = solve_dp(&config, &grid).unwrap();
        // At D = 0 capacity feedback is silent, so the best immediate action is
        // full dominant share at the highest effort.
        let top = Action::dominant_split(7, 0, 0.8, 0.8, 0.4);
        let r = performance(&top.shares, &top.efforts, &config.activities, 0.6, 105.0);
        assert!((table.value(0, 0, table.meniscus_axis.len() - 1) - r).abs() < 1e-12);
        assert_eq!(table.argmax_levels(0, 0, table.meniscus_axis.len() - 1), (0.8, 0.8));
    }

    #[test]
    fn interpolation_examples() {
        let (config, grid) = grid_aligned_instance();
        let mut table = solve_dp(&config, &grid).unwrap();
        let nm = table.meniscus_axis.len();
        let n = table.damage_axis.len() * nm;
        for i in 0..table.damage_axis.len() {
            for j in 0..nm {
                let (d, m) = (table.damage_axis.nodes[i], table.meniscus_axis.nodes[j]);
                table.values[i * nm + j] = 2.0 - 3.0 * d + 0.5 * m;
            }
        }
        assert_eq!(table.interpolate_value(0.25, 0.5, 0), table.value(0, 1, 2));
        let centre = table.interpolate_value(0.125, 0.375, 0);
        let mean = (table.value(0, 0, 1) + table.value(0, 0, 2) + table.value(0, 1, 1) + table.value(0, 1, 2)) / 4.0;
        assert!((centre - mean).abs() < 1e-12);
        for &(d, m) in &[(0.13, 0.71), (0.9, 0.05), (0.333, 0.999)] {
            let v = table.interpolate_value(d, m, 0);
            assert!((v - (2.0 - 3.0 * d + 0.5 * m)).abs() < 1e-12);
        }
        assert!(n > 0);
    }

    #[test]
    fn solve_is_deterministic_and_monotone() {
        let config = bricklayer_config().with_horizon(12);
        let grid = GridSpec::bricklayer().with_resolution(0.05, 0.05);
        let a = solve_dp(&config, &grid).unwrap();
        let b = solve_dp(&config, &grid).unwrap();
        assert_eq!(a, b);
        let (nd, nm) = (a.damage_axis.len(), a.meniscus_axis.len());
        for t in 0..config.horizon {
            for i in 0..nd {
                for j in 0..nm {
                    if i + 1 < nd {
                        assert!(a.value(t, i + 1, j) <= a.value(t, i, j) + 1e-12);
                    }
                    if j + 1 < nm {
                        assert!(a.value(t, i, j + 1) >= a.value(t, i, j) - 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn schedule_contract() {
        let config = nba_config();
        let grid = GridSpec::nba().with_resolution(0.05, 0.1);
        let table = solve_dp(&config, &grid).unwrap();
        let schedule = extract_share_schedule(&table, &config).unwrap();
        assert_eq!(schedule.len(), config.horizon);
        for t in 0..schedule.len() {
            let s = schedule.shares_at(t);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let dom = s[0];
            assert!((0.15..=0.80).contains(&dom));
            for &x in &s[1..] {
                assert!((x - (1.0 - dom) / 5.0).abs() < 1e-12);
            }
        }
        let report = dp_rollout(&config, &table).unwrap();
        assert!(report.completed());
        assert_eq!(report.length(), config.horizon);
        assert_eq!(report, dp_rollout(&config, &table).unwrap());
        let replay = schedule_rollout(&config, &schedule.actions(grid.other_effort)).unwrap();
        assert!((replay.total_return - report.total_return).abs() < 1e-12);
    }

    #[test]
    fn greedy_effort_loses_meniscus_relative_to_dp() {
        let config = bricklayer_config();
        let grid = GridSpec::bricklayer().with_resolution(0.05, 0.05);
        let table = solve_dp(&config, &grid).unwrap();
        let dp = dp_rollout(&config, &table).unwrap();
        let schedule = extract_share_schedule(&table, &config).unwrap();
        let greedy: Vec<Action> = (0..config.horizon)
            .map(|t| Action::new(schedule.shares_at(t).to_vec(), vec![1.0; 7]))
            .collect();
        let mut no_exit = config.clone();
        no_exit.no_exit = true;
        let g = schedule_rollout(&no_exit, &greedy).unwrap();
        assert!(g.m_final < dp.m_final, "greedy {} vs dp {}", g.m_final, dp.m_final);
    }

    #[test]
    fn rejects_share_levels_below_threshold() {
        let config = bricklayer_config();
        let mut grid = GridSpec::bricklayer();
        grid.share_levels.insert(0, 0.10);
        assert!(solve_dp(&config, &grid).is_err());
    }

    #[test]
    fn table_round_trips_through_json() {
        let (config, grid) = grid_aligned_instance();
        let table = solve_dp(&config, &grid).unwrap();
        let back: ValueTable = serde_json::from_str(&serde_json::to_string(&table).unwrap()).unwrap();
        assert_eq!(back, table);
    }
}
