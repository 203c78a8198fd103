//! Experiment configs, run planning, sweeps, artifacts and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dp::{GridSpec, ShareSchedule};
use crate::env::{step_state, Action, EnvConfig, EnvState, TrajectoryRow};
use crate::error::{Error, Result};
use crate::policy::PolicyCheckpoint;
use crate::presets::{validate_config, PresetId};
use crate::stats::{
    classify_cell, clopper_pearson, BasinLabel, CellLabel, EpisodeRecord, SeedSummary, CELL_EPSILON,
};
use crate::train::{Algorithm, BatchLog, Condition, PpoConfig, TrainOutcome, TrainSpec};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_VAR: &str = "DAMAGELAB_OUT";

/// Output root: `$DAMAGELAB_OUT`, else `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Condition as written in a config file; unset fields take the algorithm's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub algorithm: Algorithm,
    pub fixed_share: Option<bool>,
    pub no_exit: Option<bool>,
    pub zero_proxy: Option<bool>,
    pub effort_bias: Option<f64>,
    pub penalty_weight: Option<f64>,
    pub planning_ratio: Option<usize>,
}

impl ConditionSpec {
    pub fn resolve(&self) -> Condition {
        let base = Condition::for_algorithm(self.algorithm);
        Condition {
            algorithm: self.algorithm,
            fixed_share: self.fixed_share.unwrap_or(base.fixed_share),
            no_exit: self.no_exit.unwrap_or(base.no_exit),
            zero_proxy: self.zero_proxy.unwrap_or(base.zero_proxy),
            effort_bias: self.effort_bias.unwrap_or(base.effort_bias),
            penalty_weight: self.penalty_weight.unwrap_or(base.penalty_weight),
            planning_ratio: self.planning_ratio.unwrap_or(base.planning_ratio),
        }
    }
}

/// Field-level changes applied on top of a preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvOverrides {
    pub horizon: Option<usize>,
    pub start_age: Option<f64>,
    pub bmi: Option<f64>,
    pub role_window: Option<usize>,
    pub role_threshold: Option<f64>,
    pub damage_scale: Option<f64>,
    pub meniscal_base_rate: Option<f64>,
}

impl EnvOverrides {
    pub fn apply(&self, env: &mut EnvConfig) {
        if let Some(h) = self.horizon {
            env.horizon = h;
        }
        if let Some(a) = self.start_age {
            env.start_age = a;
        }
        if let Some(b) = self.bmi {
            env.bmi = b;
        }
        if let Some(w) = self.role_window {
            env.role.window = w;
        }
        if let Some(t) = self.role_threshold {
            env.role.threshold = t;
        }
        if let Some(d) = self.damage_scale {
            env.dynamics.damage_scale = d;
        }
        if let Some(m) = self.meniscal_base_rate {
            env.dynamics.meniscal_base_rate = m;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridOverrides {
    pub damage_step: Option<f64>,
    pub meniscus_step: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub windows: Vec<usize>,
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub algorithms: Vec<Algorithm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub preset: PresetId,
    pub condition: ConditionSpec,
    pub seeds: Vec<u64>,
    pub steps: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// DP share schedule artifact for fixed-share conditions.
    pub schedule: Option<PathBuf>,
    #[serde(default)]
    pub overrides: EnvOverrides,
    #[serde(default)]
    pub grid: GridOverrides,
    #[serde(default)]
    pub ppo: PpoConfig,
    pub sweep: Option<SweepSpec>,
}

fn default_eval_episodes() -> usize {
    100
}

impl ExperimentConfig {
    pub fn env(&self) -> EnvConfig {
        let mut env = self.preset.config();
        self.overrides.apply(&mut env);
        env
    }

    pub fn grid(&self) -> GridSpec {
        let g = GridSpec::for_preset(self.preset);
        let (d, m) = (g.damage_step, g.meniscus_step);
        g.with_resolution(self.grid.damage_step.unwrap_or(d), self.grid.meniscus_step.unwrap_or(m))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let problems = validate_config(&self.env());
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        self.condition.resolve().validate()?;
        self.ppo.validate()
    }

    /// Resolved values, for echoing back to the user.
    pub fn echo(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Echo<'a> {
            config: &'a ExperimentConfig,
            env: EnvConfig,
            condition: Condition,
            env_hash: String,
        }
        let env = self.env();
        Ok(serde_json::to_string_pretty(&Echo {
            config: self,
            env_hash: env.hash(),
            env,
            condition: self.condition.resolve(),
        })?)
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn read_schedule(path: &Path) -> Result<ShareSchedule> {
    read_json(path)
}

/// Roll out `episodes` careers that follow `schedule`'s shares while drawing
/// every effort uniformly from [0, 1] each year. Exits are enforced.
pub fn random_effort_evaluation(
    env: &EnvConfig,
    schedule: &ShareSchedule,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    if env.no_exit {
        return Err(Error::Usage("random-effort evaluation needs exits enforced".into()));
    }
    let k = env.num_activities();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|_| {
            let mut state = EnvState::initial(env);
            let mut total_return = 0.0;
            let mut role_violations = 0;
            loop {
                let efforts: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                let action = Action::new(schedule.shares_at(state.t).to_vec(), efforts);
                let step = step_state(env, &mut state, &action, 0.0)?;
                total_return += step.reward;
                role_violations += usize::from(step.diagnostics.role_violation);
                if step.termination.is_terminal() {
                    return Ok(EpisodeRecord {
                        length: state.t,
                        termination: step.termination,
                        exit_age: state.age,
                        m_final: state.meniscus,
                        d_final: state.damage,
                        total_return,
                        role_violations,
                    });
                }
            }
        })
        .collect()
}

/// One planned training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub id: String,
    pub spec: TrainSpec,
}

fn fmt_threshold(a: f64) -> String {
    format!("{a:.2}").replace('.', "p")
}

/// Expand a config into runs: algorithms x windows x thresholds x horizons x seeds.
pub fn plan_runs(config: &ExperimentConfig, schedule: Option<&ShareSchedule>) -> Result<Vec<RunPlan>> {
    config.validate()?;
    let sweep = config.sweep.clone().unwrap_or_default();
    let base_env = config.env();
    let algorithms = if sweep.algorithms.is_empty() {
        vec![None]
    } else {
        sweep.algorithms.iter().copied().map(Some).collect()
    };
    let windows: Vec<Option<usize>> = if sweep.windows.is_empty() {
        vec![None]
    } else {
        sweep.windows.iter().copied().map(Some).collect()
    };
    let thresholds: Vec<Option<f64>> = if sweep.thresholds.is_empty() {
        vec![None]
    } else {
        sweep.thresholds.iter().copied().map(Some).collect()
    };
    let horizons: Vec<Option<usize>> = if sweep.horizons.is_empty() {
        vec![None]
    } else {
        sweep.horizons.iter().copied().map(Some).collect()
    };

    let mut runs = Vec::new();
    for algorithm in &algorithms {
        let condition = match algorithm {
            Some(a) => ConditionSpec {
                algorithm: *a,
                ..config.condition.clone()
            }
            .resolve(),
            None => config.condition.resolve(),
        };
        if condition.fixed_share && schedule.is_none() {
            return Err(Error::Usage(
                "fixed-share runs need a DP share schedule artifact (run dp-solve first)".into(),
            ));
        }
        for window in &windows {
            for threshold in &thresholds {
                for horizon in &horizons {
                    for &seed in &config.seeds {
                        let mut env = base_env.clone();
                        let mut parts = vec![condition.algorithm.as_str().to_string()];
                        if let Some(w) = window {
                            env.role.window = *w;
                            parts.push(format!("w{w}"));
                        }
                        if let Some(a) = threshold {
                            env.role.threshold = *a;
                            parts.push(format!("a{}", fmt_threshold(*a)));
                        }
                        let problems = validate_config(&env);
                        if !problems.is_empty() {
                            return Err(Error::Config(problems.join("; ")));
                        }
                        let mut spec = TrainSpec {
                            env,
                            ppo: config.ppo.clone(),
                            schedule: schedule.cloned().filter(|_| condition.fixed_share),
                            eval_episodes: config.eval_episodes,
                            ..TrainSpec::new(config.preset, condition.clone(), seed, config.steps)
                        };
                        if let Some(h) = horizon {
                            spec = spec.for_horizon(*h);
                            parts.push(format!("h{h}"));
                        }
                        parts.push(format!("seed{seed}"));
                        spec.validate()?;
                        runs.push(RunPlan {
                            id: parts.join("_"),
                            spec,
                        });
                    }
                }
            }
        }
    }
    Ok(runs)
}

/// Run `jobs` on up to `workers` threads; results keep the input order.
pub fn run_parallel<T, R, F>(jobs: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every job produces a result"))
        .collect()
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub files: Vec<ManifestEntry>,
}

/// Write `contents` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<ManifestEntry> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    Ok(ManifestEntry {
        file: name.to_string(),
        sha256: hex::encode(Sha256::digest(contents)),
        bytes: contents.len() as u64,
    })
}

pub fn write_manifest(dir: &Path, config_hash: &str, files: Vec<ManifestEntry>) -> Result<Manifest> {
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash.to_string(),
        files,
    };
    write_atomic(dir, "manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Re-hash every file listed in a manifest; returns the names that differ.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let mut bad = Vec::new();
    for entry in &manifest.files {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            bad.push(entry.file.clone());
        }
    }
    Ok(bad)
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("t,age,damage,meniscus,proxy,load,reward,dominant_share,efforts,termination\n");
    for r in rows {
        let efforts: Vec<String> = r.efforts.iter().map(|e| format!("{e:.6}")).collect();
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.t,
            r.age,
            r.damage,
            r.meniscus,
            r.proxy,
            r.load,
            r.reward,
            r.dominant_share,
            efforts.join(";"),
            r.termination.as_str()
        );
    }
    out
}

fn history_csv(history: &[BatchLog]) -> String {
    let mut out = String::from(
        "real_steps,planning,episodes_finished,completion_fraction,mean_env_return,rbar,loss,policy_loss,value_loss,entropy,approx_kl,clip_fraction\n",
    );
    for h in history {
        let s = &h.stats;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            h.real_steps,
            h.planning,
            h.episodes_finished,
            h.completion_fraction,
            h.mean_env_return,
            h.rbar,
            s.loss,
            s.policy_loss,
            s.value_loss,
            s.entropy,
            s.approx_kl,
            s.clip_fraction
        );
    }
    out
}

/// summary.json, checkpoint.json, trajectory.csv (first evaluation episode),
/// profile.csv (mean-action career), training_log.csv and manifest.json.
pub fn write_run_artifacts(dir: &Path, spec: &TrainSpec, outcome: &TrainOutcome) -> Result<Manifest> {
    let checkpoint = PolicyCheckpoint::new(
        outcome.params.clone(),
        spec.seed,
        spec.env.hash(),
        outcome.summary.training_steps,
    );
    let files = vec![
        write_atomic(dir, "summary.json", outcome.summary.to_json()?.as_bytes())?,
        write_atomic(dir, "spec.json", serde_json::to_string_pretty(spec)?.as_bytes())?,
        write_atomic(dir, "checkpoint.json", serde_json::to_string(&checkpoint)?.as_bytes())?,
        write_atomic(dir, "trajectory.csv", trajectory_csv(&outcome.eval_trajectory).as_bytes())?,
        write_atomic(dir, "profile.csv", trajectory_csv(&outcome.profile_trajectory).as_bytes())?,
        write_atomic(dir, "training_log.csv", history_csv(&outcome.history).as_bytes())?,
    ];
    write_manifest(dir, &spec.env.hash(), files)
}

/// Every `summary.json` below `root`, sorted by path.
pub fn collect_summaries(root: &Path) -> Result<Vec<(PathBuf, SeedSummary)>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "summary.json") {
                let s = SeedSummary::read(&path)?;
                found.push((path, s));
            }
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(found)
}

/// One row of the condition comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub preset: PresetId,
    pub condition: String,
    pub seeds: usize,
    pub completing_seeds: usize,
    pub completion_rate_mean: f64,
    pub completion_ci: (f64, f64),
    pub exit_age_mean: f64,
    pub exit_age_sd: f64,
    /// Over completing seeds only.
    pub m_final_mean: Option<f64>,
    pub m_final_sd: Option<f64>,
    pub delta_m: Option<f64>,
    pub cells: BTreeMap<String, usize>,
    pub reactive_seeds: usize,
}

pub fn condition_label(s: &SeedSummary) -> String {
    let c = &s.condition;
    let mut label = String::from(match (c.dyna, c.fixed_share) {
        (false, false) => "ppo-real",
        (false, true) => "ppo-real-fixed-share",
        (true, false) => "dyna-unrestricted",
        (true, true) => "dyna-fixed-share",
    });
    if c.no_exit {
        label.push_str("+no-exit");
    }
    if c.zero_proxy {
        label.push_str("+zero-proxy");
    }
    if c.penalty_weight > 0.0 {
        let _ = write!(label, "+w{}", c.penalty_weight);
    }
    if c.effort_bias != 0.0 {
        let _ = write!(label, "+bias{}", c.effort_bias);
    }
    label
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Group summaries by (preset, condition) and classify each seed's cell.
/// `dp_m_final` maps a preset to its DP reference `M_final`.
pub fn build_report(summaries: &[SeedSummary], dp_m_final: &BTreeMap<PresetId, f64>) -> Result<Vec<ReportRow>> {
    let mut groups: BTreeMap<(String, String), Vec<&SeedSummary>> = BTreeMap::new();
    for s in summaries {
        groups
            .entry((s.preset.as_str().to_string(), condition_label(s)))
            .or_default()
            .push(s);
    }
    let mut rows = Vec::new();
    for ((_, condition), group) in groups {
        let preset = group[0].preset;
        let reference = dp_m_final.get(&preset).copied();
        let completing: Vec<&&SeedSummary> = group.iter().filter(|s| s.completion_rate == 1.0).collect();
        let mut cells = BTreeMap::new();
        for s in &group {
            let cell = match (s.completion_rate < 1.0, reference) {
                (false, None) => "B/C?".to_string(),
                _ => classify_cell(s, reference, CELL_EPSILON)?.as_str().to_string(),
            };
            *cells.entry(cell).or_insert(0) += 1;
        }
        let (exit_age_mean, exit_age_sd) = mean_sd(&group.iter().map(|s| s.exit_age_mean).collect::<Vec<_>>());
        let m: Vec<f64> = completing.iter().map(|s| s.m_final_mean).collect();
        let (m_mean, m_sd) = if m.is_empty() { (None, None) } else {
            let (a, b) = mean_sd(&m);
            (Some(a), Some(b))
        };
        rows.push(ReportRow {
            preset,
            condition,
            seeds: group.len(),
            completing_seeds: completing.len(),
            completion_rate_mean: group.iter().map(|s| s.completion_rate).sum::<f64>() / group.len() as f64,
            completion_ci: clopper_pearson(completing.len() as u64, group.len() as u64, 0.95)?,
            exit_age_mean,
            exit_age_sd,
            m_final_mean: m_mean,
            m_final_sd: m_sd,
            delta_m: reference.zip(m_mean).map(|(r, m)| r - m),
            cells,
            reactive_seeds: group.iter().filter(|s| s.basin == Some(BasinLabel::Reactive)).count(),
        });
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "preset,condition,seeds,completing_seeds,completion_rate,completion_ci_lo,completion_ci_hi,exit_age_mean,exit_age_sd,m_final_mean,m_final_sd,delta_m,cells,reactive_seeds\n",
    );
    for r in rows {
        let cells: Vec<String> = r.cells.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.3},{:.3},{},{},{},{},{}",
            r.preset,
            r.condition,
            r.seeds,
            r.completing_seeds,
            r.completion_rate_mean,
            r.completion_ci.0,
            r.completion_ci.1,
            r.exit_age_mean,
            r.exit_age_sd,
            opt(r.m_final_mean),
            opt(r.m_final_sd),
            opt(r.delta_m),
            cells.join(" "),
            r.reactive_seeds
        );
    }
    out
}

pub fn report_text(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:<11} {:<34} {:>6} {:>10} {:>14} {:>16} {:>8} {:<10}\n",
        "preset", "condition", "seeds", "complete", "exit age", "M_final", "dM", "cells"
    );
    for r in rows {
        let cells: Vec<String> = r.cells.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        let m = match (r.m_final_mean, r.m_final_sd) {
            (Some(a), Some(b)) => format!("{a:.3} ± {b:.3}"),
            _ => "-".into(),
        };
        let _ = writeln!(
            out,
            "{:<11} {:<34} {:>6} {:>10} {:>14} {:>16} {:>8} {:<10}",
            r.preset.as_str(),
            r.condition,
            r.seeds,
            format!("{}/{}", r.completing_seeds, r.seeds),
            format!("{:.1} ± {:.1}", r.exit_age_mean, r.exit_age_sd),
            m,
            opt(r.delta_m),
            cells.join(" ")
        );
    }
    out
}

/// Cell of a whole condition: A unless every seed completes, otherwise the
/// worse of the per-seed labels.
pub fn condition_cell(rows: &ReportRow) -> Option<CellLabel> {
    if rows.completing_seeds < rows.seeds {
        return Some(CellLabel::A);
    }
    match (rows.cells.get("B"), rows.cells.get("C")) {
        (Some(_), _) => Some(CellLabel::B),
        (None, Some(_)) => Some(CellLabel::C),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::ConditionFlags;

    const BASE: &str = r#"
schema_version = 1
name = "fixed-share"
preset = "bricklayer"
seeds = [0, 1, 2, 3, 4]
steps = 1000

[condition]
algorithm = "dyna-fixed-share"
"#;

    fn schedule() -> ShareSchedule {
        let env = PresetId::Bricklayer.config();
        let a = crate::env::Action::dominant_split(7, 0, 0.8, 0.5, 0.4);
        ShareSchedule {
            dominant: 0,
            start_age: 16.0,
            shares: vec![a.shares; 49],
            dominant_efforts: vec![0.5; 49],
            config_hash: env.hash(),
        }
    }

    #[test]
    fn preset_without_overrides_echoes_table_values() {
        let c = parse_config(BASE).unwrap();
        assert_eq!(c.env(), PresetId::Bricklayer.config());
        let echo = c.echo().unwrap();
        assert!(echo.contains("\"block_laying\""));
        assert!(echo.contains("\"hazard\": 90.0"));
        assert_eq!(c.eval_episodes, 100);
        assert_eq!(c.condition.resolve(), Condition::dyna_fixed_share());
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = parse_config(&BASE.replace("seeds =", "seedz =")).unwrap_err().to_string();
        assert!(err.contains("seedz"), "{err}");
        let err = parse_config(&format!("{BASE}\n[overrides]\nrole_treshold = 0.2\n")).unwrap_err().to_string();
        assert!(err.contains("role_treshold"), "{err}");
    }

    #[test]
    fn version_mismatch_is_error() {
        let err = parse_config(&BASE.replace("schema_version = 1", "schema_version = 2")).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn override_is_reflected() {
        let c = parse_config(&format!("{BASE}\n[overrides]\nrole_threshold = 0.20\n")).unwrap();
        assert_eq!(c.env().role.threshold, 0.20);
        assert!(c.echo().unwrap().contains("\"threshold\": 0.2"));
        assert!(parse_config(&format!("{BASE}\n[overrides]\nrole_threshold = 0.0\n")).is_err());
    }

    #[test]
    fn role_sweep_plans_45_runs_per_condition() {
        let text = format!("{BASE}\n[sweep]\nwindows = [3, 5, 7]\nthresholds = [0.10, 0.15, 0.20]\n");
        let c = parse_config(&text).unwrap();
        let runs = plan_runs(&c, Some(&schedule())).unwrap();
        assert_eq!(runs.len(), 45);
        let both = parse_config(&format!("{text}algorithms = [\"ppo-real\", \"dyna-fixed-share\"]\n")).unwrap();
        let runs = plan_runs(&both, Some(&schedule())).unwrap();
        assert_eq!(runs.len(), 90);
        let ids: std::collections::BTreeSet<_> = runs.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 90);
        assert!(runs[0].spec.schedule.is_none());
        assert!(runs[89].spec.schedule.is_some());
    }

    #[test]
    fn fixed_share_without_schedule_is_usage_error() {
        let c = parse_config(BASE).unwrap();
        assert!(matches!(plan_runs(&c, None), Err(Error::Usage(_))));
    }

    #[test]
    fn horizon_sweep_scales_steps() {
        let c = parse_config(&format!("{BASE}\n[sweep]\nhorizons = [13, 49]\n")).unwrap();
        let runs = plan_runs(&c, Some(&schedule())).unwrap();
        assert_eq!(runs.len(), 10);
        assert_eq!(runs[0].spec.total_steps, 260_000);
        assert_eq!(runs[0].spec.train_env().horizon, 13);
        assert_eq!(runs[0].spec.eval_env().horizon, 49);
    }

    #[test]
    fn random_efforts_respect_schedule_floor() {
        let env = PresetId::Bricklayer.config();
        let records = random_effort_evaluation(&env, &schedule(), 50, 3).unwrap();
        assert!(records.iter().all(|r| r.role_violations == 0));
        assert!(records.iter().all(EpisodeRecord::completed));
        let mut no_exit = env.clone();
        no_exit.no_exit = true;
        assert!(random_effort_evaluation(&no_exit, &schedule(), 1, 0).is_err());
    }

    #[test]
    fn parallel_runner_keeps_order() {
        let jobs: Vec<u64> = (0..20).collect();
        assert_eq!(run_parallel(&jobs, 4, |x| x * x), jobs.iter().map(|x| x * x).collect::<Vec<_>>());
        assert!(run_parallel(&Vec::<u64>::new(), 4, |x| *x).is_empty());
    }

    #[test]
    fn atomic_write_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_atomic(dir.path(), "a.txt", b"hello").unwrap();
        let m = write_manifest(dir.path(), "abc", vec![a.clone()]).unwrap();
        assert_eq!(
            a.sha256,
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        assert_eq!(m.files.len(), 1);
        assert!(verify_manifest(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("a.txt"), b"tampered").unwrap();
        assert_eq!(verify_manifest(dir.path()).unwrap(), vec!["a.txt".to_string()]);
        assert!(!dir.path().join(".a.txt.tmp").exists());
    }

    fn summary(seed: u64, completion: f64, m: f64, fixed: bool) -> SeedSummary {
        SeedSummary {
            schema_version: crate::stats::SUMMARY_SCHEMA_VERSION,
            seed,
            preset: PresetId::Bricklayer,
            condition: ConditionFlags {
                fixed_share: fixed,
                dyna: fixed,
                no_exit: fixed,
                ..ConditionFlags::default()
            },
            eval_episodes: 100,
            completion_rate: completion,
            exit_age_mean: if completion == 1.0 { 65.0 } else { 27.0 },
            exit_age_sd: 0.0,
            m_final_mean: m,
            m_final_sd: 0.0,
            d_final_mean: 0.3,
            return_mean: 10.0,
            role_violations: 0,
            checkpoints: None,
            basin: None,
            training_steps: 10,
            config_hash: "h".into(),
        }
    }

    #[test]
    fn report_has_table_shape() {
        let summaries = vec![
            summary(0, 0.0, 0.9, false),
            summary(1, 0.0, 0.9, false),
            summary(0, 1.0, 0.523, true),
            summary(1, 1.0, 0.524, true),
        ];
        let dp = BTreeMap::from([(PresetId::Bricklayer, 0.794)]);
        let rows = build_report(&summaries, &dp).unwrap();
        assert_eq!(rows.len(), 2);
        let fixed = rows.iter().find(|r| r.condition == "dyna-fixed-share+no-exit").unwrap();
        assert_eq!(condition_cell(fixed), Some(CellLabel::B));
        assert!((fixed.delta_m.unwrap() - 0.2705).abs() < 1e-9);
        let real = rows.iter().find(|r| r.condition == "ppo-real").unwrap();
        assert_eq!(condition_cell(real), Some(CellLabel::A));
        assert!(real.m_final_mean.is_none());
        assert_eq!(report_csv(&rows).lines().count(), 3);
        assert!(report_text(&rows).contains("0/2"));
    }

    #[test]
    fn summaries_are_collected_recursively() {
        let dir = tempfile::tempdir().unwrap();
        for (i, s) in [summary(0, 0.0, 0.9, false), summary(1, 1.0, 0.5, true)].iter().enumerate() {
            write_atomic(&dir.path().join(format!("run{i}/inner")), "summary.json", s.to_json().unwrap().as_bytes())
                .unwrap();
        }
        assert_eq!(collect_summaries(dir.path()).unwrap().len(), 2);
    }
}
