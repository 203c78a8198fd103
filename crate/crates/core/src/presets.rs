//! The two calibrated career environments and config validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{ActivitySpec, DynamicsParams, EnvConfig, LoadModel, RoleRule};
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetId {
    Bricklayer,
    Nba,
}

impl PresetId {
    pub const ALL: [PresetId; 2] = [PresetId::Bricklayer, PresetId::Nba];

    pub fn config(self) -> EnvConfig {
        match self {
            PresetId::Bricklayer => bricklayer_config(),
            PresetId::Nba => nba_config(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PresetId::Bricklayer => "bricklayer",
            PresetId::Nba => "nba",
        }
    }
}

impl fmt::Display for PresetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bricklayer" => Ok(PresetId::Bricklayer),
            "nba" => Ok(PresetId::Nba),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected bricklayer or nba)"
            ))),
        }
    }
}

/// Stress/strain/shear weights and the per-activity component split of the
/// bricklayer load. Their dot product is 0.3525; the calibrated composite
/// factor used by the simulator is 0.355.
pub const LOAD_WEIGHTS: [f64; 3] = [0.40, 0.35, 0.25];
pub const COMPONENT_SPLIT: [f64; 3] = [0.45, 0.35, 0.20];
pub const BRICKLAYER_COMPOSITE: f64 = 0.355;

fn shared_dynamics() -> DynamicsParams {
    DynamicsParams {
        damage_scale: 0.083,
        baratz_exponent: 1.3,
        baratz_intercept: 0.45,
        baratz_slope: 0.55,
        bmi_slope: 0.07,
        bmi_pivot: 22.0,
        recovery_scale: 0.015,
        recovery_pivot_age: 30.0,
        recovery_span: 50.0,
        meniscal_base_rate: 0.075,
        amp_threshold: 0.6,
        amp_slope: 3.0,
        onset_age: 45.0,
        onset_slope: 0.5,
        onset_span: 20.0,
        proxy_gain: 2.5,
        proxy_exponent: 1.8,
        clinical_threshold: 0.30,
        capacity_slope: 1.5,
        effort_exponent: 0.6,
    }
}

/// 49-year construction career over seven activities, ages 16 to 65.
pub fn bricklayer_config() -> EnvConfig {
    EnvConfig {
        name: "bricklayer".into(),
        activities: vec![
            ActivitySpec::new("block_laying", 85.0, 90.0, 105.0),
            ActivitySpec::new("scaffold_work", 80.0, 55.0, 85.0),
            ActivitySpec::new("mortar_mixing", 60.0, 50.0, 60.0),
            ActivitySpec::new("cutting_grinding", 65.0, 35.0, 65.0),
            ActivitySpec::new("pointing_finishing", 35.0, 25.0, 62.0),
            ActivitySpec::new("light_repair", 20.0, 10.0, 32.0),
            ActivitySpec::new("coordination", 15.0, 5.0, 45.0),
        ],
        load_model: LoadModel::WeightedDecomposition {
            composite: BRICKLAYER_COMPOSITE,
            shear_fraction: COMPONENT_SPLIT[2],
        },
        dynamics: shared_dynamics(),
        role: RoleRule {
            window: 5,
            threshold: 0.15,
            dominant: 0,
        },
        horizon: 49,
        start_age: 16.0,
        bmi: 22.0,
        zero_proxy: false,
        no_exit: false,
    }
}

/// 20-season power-forward career over six activities, ages 18 to 38.
///
/// Recovery (pivot 27, span 20) and meniscal onset age (30) are local
/// defaults; everything else follows the bricklayer functional forms.
pub fn nba_config() -> EnvConfig {
    EnvConfig {
        name: "nba".into(),
        activities: vec![
            ActivitySpec::new("post_play", 90.0, 90.0, 110.0),
            ActivitySpec::new("perimeter_play", 70.0, 45.0, 75.0),
            ActivitySpec::new("full_practice", 75.0, 55.0, 60.0),
            ActivitySpec::new("skill_training", 40.0, 15.0, 45.0),
            ActivitySpec::new("strength_conditioning", 55.0, 25.0, 35.0),
            ActivitySpec::new("rehab_rest", 10.0, 3.0, 10.0),
        ],
        load_model: LoadModel::NormalizedHazard { h_max: 90.0 },
        dynamics: DynamicsParams {
            damage_scale: 0.055,
            meniscal_base_rate: 0.15,
            recovery_pivot_age: 27.0,
            recovery_span: 20.0,
            onset_age: 30.0,
            ..shared_dynamics()
        },
        role: RoleRule {
            window: 3,
            threshold: 0.12,
            dominant: 0,
        },
        horizon: 20,
        start_age: 18.0,
        bmi: 22.0,
        zero_proxy: false,
        no_exit: false,
    }
}

fn unique_argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let values: Vec<f64> = values.collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut hits = values.iter().enumerate().filter(|(_, v)| **v == max);
    let first = hits.next()?.0;
    hits.next().is_none().then_some(first)
}

/// Every broken invariant, one message each. Empty means the config is usable.
pub fn validate_config(config: &EnvConfig) -> Vec<String> {
    let mut out = Vec::new();
    let k = config.activities.len();
    if k < 2 {
        out.push(format!("need at least 2 activities, got {k}"));
    }
    for a in &config.activities {
        let in_range = |v: f64, hi: f64| v.is_finite() && (0.0..=hi).contains(&v);
        if !in_range(a.energy, 100.0) || !in_range(a.hazard, 100.0) || !in_range(a.perf, 110.0) {
            out.push(format!("activity `{}` has out-of-range parameters", a.name));
        }
    }
    if k >= 2 {
        let hazard_max = unique_argmax(config.activities.iter().map(|a| a.hazard));
        let perf_max = unique_argmax(config.activities.iter().map(|a| a.perf));
        match (hazard_max, perf_max) {
            (Some(h), Some(p)) if h == p => {
                if config.role.dominant != h {
                    out.push(format!(
                        "role.dominant is {} but the dominant activity is {h}",
                        config.role.dominant
                    ));
                }
            }
            _ => out.push(
                "no unique activity maximises both hazard and perf".to_string(),
            ),
        }
    }
    match config.load_model {
        LoadModel::WeightedDecomposition {
            composite,
            shear_fraction,
        } => {
            if !(composite > 0.0) || !(shear_fraction >= 0.0) {
                out.push("load composite must be > 0 and shear fraction >= 0".into());
            }
        }
        LoadModel::NormalizedHazard { h_max } => {
            if !(h_max > 0.0) {
                out.push(format!("h_max must be positive, got {h_max}"));
            }
        }
    }
    let p = &config.dynamics;
    if !(p.damage_scale > 0.0) {
        out.push(format!("damage_scale must be positive, got {}", p.damage_scale));
    }
    if !(p.amp_threshold > 0.0 && p.amp_threshold < 1.0) {
        out.push(format!("amp_threshold must lie in (0,1), got {}", p.amp_threshold));
    }
    if !(p.clinical_threshold > 0.0 && p.clinical_threshold < 1.0) {
        out.push(format!(
            "clinical_threshold must lie in (0,1), got {}",
            p.clinical_threshold
        ));
    }
    if !(p.effort_exponent > 0.0 && p.effort_exponent <= 1.0) {
        out.push(format!(
            "effort_exponent must lie in (0,1], got {}",
            p.effort_exponent
        ));
    }
    if !(p.baratz_intercept > 0.0) || !(p.baratz_intercept + p.baratz_slope > 0.0) {
        out.push("baratz denominator must stay positive on [0,1]".into());
    }
    if p.meniscal_base_rate < 0.0 || p.recovery_scale < 0.0 {
        out.push("meniscal_base_rate and recovery_scale must be non-negative".into());
    }
    if config.role.window < 1 {
        out.push("role window must be at least 1".into());
    }
    if !(config.role.threshold > 0.0 && config.role.threshold < 1.0) {
        out.push(format!(
            "role threshold must lie in (0,1), got {}",
            config.role.threshold
        ));
    }
    if config.horizon < 1 {
        out.push("horizon must be at least 1".into());
    }
    if !config.start_age.is_finite() || !config.bmi.is_finite() {
        out.push("start_age and bmi must be finite".into());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bricklayer_matches_activity_table() {
        let c = bricklayer_config();
        assert_eq!(c.activities.len(), 7);
        let block = &c.activities[0];
        assert_eq!((block.name.as_str(), block.energy, block.hazard, block.perf), ("block_laying", 85.0, 90.0, 105.0));
        let coord = &c.activities[6];
        assert_eq!((coord.energy, coord.hazard, coord.perf), (15.0, 5.0, 45.0));
        assert_eq!(c.perf_max(), 105.0);
        assert_eq!(c.horizon, 49);
        assert_eq!(c.start_age, 16.0);
        assert_eq!(c.terminal_age(), 65.0);
        assert_eq!((c.role.window, c.role.threshold, c.role.dominant), (5, 0.15, 0));
    }

    #[test]
    fn composite_factor() {
        assert!((BRICKLAYER_COMPOSITE - 0.355).abs() < 1e-6);
        let dot: f64 = LOAD_WEIGHTS.iter().zip(COMPONENT_SPLIT).map(|(w, s)| w * s).sum();
        assert!((dot - 0.3525).abs() < 1e-12);
    }

    #[test]
    fn nba_matches_activity_table() {
        let c = nba_config();
        assert_eq!(c.activities.len(), 6);
        let post = &c.activities[0];
        assert_eq!((post.name.as_str(), post.energy, post.hazard, post.perf), ("post_play", 90.0, 90.0, 110.0));
        let rest = &c.activities[5];
        assert_eq!((rest.energy, rest.hazard, rest.perf), (10.0, 3.0, 10.0));
        assert_eq!((c.role.window, c.role.threshold), (3, 0.12));
        assert_eq!(c.dynamics.damage_scale, 0.055);
        assert_eq!(c.dynamics.meniscal_base_rate, 0.15);
        assert_eq!(c.load_model, LoadModel::NormalizedHazard { h_max: 90.0 });
        assert_eq!(c.terminal_age(), 38.0);
    }

    #[test]
    fn presets_validate() {
        assert!(validate_config(&bricklayer_config()).is_empty());
        assert!(validate_config(&nba_config()).is_empty());
    }

    #[test]
    fn two_hazard_maximisers_is_one_violation() {
        let mut c = bricklayer_config();
        c.activities[1].hazard = 90.0;
        assert_eq!(validate_config(&c).len(), 1);
    }

    #[test]
    fn zero_threshold_is_one_violation() {
        let mut c = bricklayer_config();
        c.role.threshold = 0.0;
        assert_eq!(validate_config(&c).len(), 1);
    }

    #[test]
    fn preset_ids_parse() {
        for id in PresetId::ALL {
            assert_eq!(id.as_str().parse::<PresetId>().unwrap(), id);
        }
        assert!("plumber".parse::<PresetId>().is_err());
    }

    #[test]
    fn presets_round_trip_through_json() {
        let c = nba_config();
        let text = serde_json::to_string(&c).unwrap();
        let back: EnvConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
