use std::path::PathBuf;

use damagelab::dp::{extract_share_schedule, solve_dp, GridSpec};
use damagelab::experiment::{load_config, plan_runs};
use damagelab::PresetId;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn coarse_schedule(preset: PresetId) -> damagelab::dp::ShareSchedule {
    let env = preset.config();
    let grid = GridSpec::for_preset(preset).with_resolution(0.1, 0.1);
    extract_share_schedule(&solve_dp(&env, &grid).unwrap(), &env).unwrap()
}

#[test]
fn shipped_configs_parse_and_plan() {
    let mut expected = std::collections::BTreeMap::from([
        ("primary_ppo_real.toml", 20),
        ("primary_dyna_unrestricted.toml", 20),
        ("primary_fixed_share.toml", 10),
        ("basin_low_effort_init.toml", 10),
        ("role_sweep.toml", 90),
        ("horizon_sweep.toml", 40),
        ("nba_fixed_share.toml", 10),
    ]);
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        let config = load_config(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        let schedule = coarse_schedule(config.preset);
        let runs = plan_runs(&config, Some(&schedule)).unwrap();
        let want = expected.remove(name.as_str()).unwrap_or_else(|| panic!("unexpected config {name}"));
        assert_eq!(runs.len(), want, "{name}");
    }
    assert!(expected.is_empty(), "missing configs: {expected:?}");
}

#[test]
fn horizon_sweep_budgets_scale_with_horizon() {
    let config = load_config(&configs_dir().join("horizon_sweep.toml")).unwrap();
    let runs = plan_runs(&config, Some(&coarse_schedule(PresetId::Bricklayer))).unwrap();
    let budgets: std::collections::BTreeSet<u64> = runs.iter().map(|r| r.spec.total_steps).collect();
    assert_eq!(budgets.into_iter().collect::<Vec<_>>(), vec![260_000, 400_000, 600_000, 980_000]);
    assert!(runs.iter().all(|r| r.spec.eval_env().horizon == 49));
}

#[test]
fn role_sweep_covers_each_cell_with_five_seeds() {
    let config = load_config(&configs_dir().join("role_sweep.toml")).unwrap();
    let runs = plan_runs(&config, Some(&coarse_schedule(PresetId::Bricklayer))).unwrap();
    for w in [3, 5, 7] {
        for a in [0.10, 0.15, 0.20] {
            let n = runs
                .iter()
                .filter(|r| r.spec.env.role.window == w && r.spec.env.role.threshold == a)
                .count();
            assert_eq!(n, 10);
        }
    }
}
