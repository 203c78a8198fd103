//! `damagelab` command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use damagelab::cmaes::{relax, RelaxBounds};
use damagelab::dp::{dp_rollout, extract_share_schedule, solve_dp, GridSpec};
use damagelab::experiment::{
    build_report, collect_summaries, default_workers, load_config, output_root, plan_runs, random_effort_evaluation,
    read_json, read_schedule, report_csv, report_text, run_parallel, trajectory_csv, write_atomic, write_manifest,
    write_run_artifacts,
};
use damagelab::policy::PolicyCheckpoint;
use damagelab::stats::{checkpoint_ages, summarize_seed, SummaryContext};
use damagelab::synthetic::{
    commitment_counterexamples, commitment_sweep, exact_q_origin, h_star, lipschitz_bound, mc_step0_gradient,
    standard_grid, MinimalMdpParams,
};
use damagelab::train::{evaluate, train_run, Algorithm, Condition, TrainSpec};
use damagelab::{Error, PresetId, Result};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "damagelab", version, about = "Cumulative-damage career experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the DP reference and write its share schedule.
    DpSolve(DpSolveArgs),
    /// Random-effort rollouts under a DP share schedule.
    DpEval(DpEvalArgs),
    /// Train one policy and write its run artifacts.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Run every job a config file expands to.
    Sweep(SweepArgs),
    /// Partial-relaxation CMA-ES schedule search.
    Cmaes(CmaesArgs),
    /// Minimal analytic MDP tools.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Aggregate summary.json files into a condition table.
    Report(ReportArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output directory (defaults to $DAMAGELAB_OUT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn root(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(output_root)
    }
}

#[derive(Args)]
struct DpSolveArgs {
    #[arg(long, default_value = "bricklayer")]
    preset: PresetId,
    #[arg(long)]
    damage_step: Option<f64>,
    #[arg(long)]
    meniscus_step: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct DpEvalArgs {
    #[arg(long, default_value = "bricklayer")]
    preset: PresetId,
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "bricklayer")]
    preset: PresetId,
    #[arg(long, default_value = "ppo-real")]
    condition: Algorithm,
    /// Disable role and capacity exits in training rollouts (`--no-exit false` re-enables them).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_exit: Option<bool>,
    #[arg(long)]
    penalty_weight: Option<f64>,
    #[arg(long)]
    zero_proxy: bool,
    /// Effort-head bias at initialization; bare flag uses the low-effort value.
    #[arg(long, num_args = 0..=1, default_missing_value = "-1.386", allow_hyphen_values = true)]
    init_bias: Option<f64>,
    /// Train on a shorter horizon and evaluate zero-shot on the full career.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 100)]
    eval_episodes: usize,
    /// DP share schedule (required for dyna-fixed-share).
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "bricklayer")]
    preset: PresetId,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Print the resolved config and the planned runs without training.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct CmaesArgs {
    #[arg(long, default_value = "bricklayer")]
    preset: PresetId,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 50)]
    population: usize,
    #[arg(long, default_value_t = 300)]
    generations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct SynthParams {
    #[arg(long, default_value_t = 0.075)]
    kappa: f64,
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
    #[arg(long, default_value_t = 0.05)]
    e_low: f64,
    #[arg(long, default_value_t = 1.0)]
    e_high: f64,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
}

impl SynthParams {
    fn build(&self) -> Result<MinimalMdpParams> {
        MinimalMdpParams::new(self.kappa, self.beta, self.e_low, self.e_high, self.horizon)
    }
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Commitment horizon bound.
    HStar(SynthParams),
    /// Exact step-0 Q gap, its bound, and a Monte Carlo gradient estimate.
    Gap {
        #[command(flatten)]
        params: SynthParams,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the sign of the gap across a kappa x horizon grid.
    Verify {
        #[arg(long, value_delimiter = ',', default_value = "0.055,0.075,0.1,0.15")]
        kappas: Vec<f64>,
        #[arg(long, default_value_t = 30)]
        max_horizon: usize,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Directory searched recursively for summary.json.
    #[arg(long)]
    root: Option<PathBuf>,
    /// DP reference M_final as `preset=value` (read from dp_report.json files when omitted).
    #[arg(long = "dp-reference", value_parser = parse_reference)]
    dp_reference: Vec<(PresetId, f64)>,
}

fn parse_reference(s: &str) -> std::result::Result<(PresetId, f64), String> {
    let (p, v) = s.split_once('=').ok_or("expected preset=value")?;
    let preset = p.parse::<PresetId>().map_err(|e| e.to_string())?;
    let value = v.parse::<f64>().map_err(|e| e.to_string())?;
    Ok((preset, value))
}

#[derive(Serialize, Deserialize)]
struct DpReport {
    preset: PresetId,
    horizon: usize,
    initial_value: f64,
    total_return: f64,
    m_final: f64,
    d_final: f64,
    exit_age: f64,
    config_hash: String,
}

fn dp_solve(a: &DpSolveArgs) -> Result<()> {
    let mut env = a.preset.config();
    if let Some(h) = a.horizon {
        env = env.with_horizon(h);
    }
    let base = GridSpec::for_preset(a.preset);
    let (d, m) = (base.damage_step, base.meniscus_step);
    let grid = base.with_resolution(a.damage_step.unwrap_or(d), a.meniscus_step.unwrap_or(m));
    let table = solve_dp(&env, &grid)?;
    let rollout = dp_rollout(&env, &table)?;
    let schedule = extract_share_schedule(&table, &env)?;
    let report = DpReport {
        preset: a.preset,
        horizon: env.horizon,
        initial_value: table.initial_value(),
        total_return: rollout.total_return,
        m_final: rollout.m_final,
        d_final: rollout.d_final,
        exit_age: rollout.exit_age(),
        config_hash: env.hash(),
    };
    let dir = a.out.root().join("dp").join(a.preset.as_str());
    let files = vec![
        write_atomic(&dir, "schedule.json", serde_json::to_string_pretty(&schedule)?.as_bytes())?,
        write_atomic(&dir, "dp_report.json", serde_json::to_string_pretty(&report)?.as_bytes())?,
        write_atomic(&dir, "trajectory.csv", trajectory_csv(&rollout.rows).as_bytes())?,
    ];
    write_manifest(&dir, &env.hash(), files)?;
    println!(
        "{}: V0 {:.4}, return {:.4}, M_final {:.4}, D_final {:.4}, exit age {:.1}",
        a.preset, report.initial_value, report.total_return, report.m_final, report.d_final, report.exit_age
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn load_schedule_for(path: &Path, env: &damagelab::EnvConfig) -> Result<damagelab::dp::ShareSchedule> {
    let schedule = read_schedule(path)?;
    if schedule.shares.first().map(Vec::len) != Some(env.num_activities()) {
        return Err(Error::Usage(format!(
            "schedule {} does not match the preset's activities",
            path.display()
        )));
    }
    Ok(schedule)
}

fn dp_eval(a: &DpEvalArgs) -> Result<()> {
    let env = a.preset.config();
    let schedule = load_schedule_for(&a.schedule, &env)?;
    let records = random_effort_evaluation(&env, &schedule, a.episodes, a.seed)?;
    let completed = records.iter().filter(|r| r.completed()).count();
    let violations: usize = records.iter().map(|r| r.role_violations).sum();
    let role_exits = records
        .iter()
        .filter(|r| r.termination == damagelab::Termination::RoleExit)
        .count();
    println!(
        "{} episodes: completion {:.4}, role exits {role_exits}, role violations {violations}",
        records.len(),
        completed as f64 / records.len().max(1) as f64
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut condition = Condition::for_algorithm(a.condition);
    if let Some(v) = a.no_exit {
        condition.no_exit = v;
    }
    if let Some(w) = a.penalty_weight {
        condition.penalty_weight = w;
    }
    condition.zero_proxy = a.zero_proxy;
    if let Some(b) = a.init_bias {
        condition.effort_bias = b;
    }
    let env = a.preset.config();
    let schedule = match (&a.schedule, condition.fixed_share) {
        (Some(path), true) => Some(load_schedule_for(path, &env)?),
        (None, true) => {
            return Err(Error::Usage(
                "dyna-fixed-share needs --schedule (write one with `damagelab dp-solve`)".into(),
            ))
        }
        (Some(_), false) => return Err(Error::Usage("--schedule only applies to dyna-fixed-share".into())),
        (None, false) => None,
    };
    let steps = a.steps.unwrap_or(1_000_000);
    let mut spec = TrainSpec {
        schedule,
        eval_episodes: a.eval_episodes,
        ..TrainSpec::new(a.preset, condition, a.seed, steps)
    };
    if let Some(h) = a.horizon {
        spec = spec.for_horizon(h);
        if let Some(s) = a.steps {
            spec.total_steps = s;
        }
    }
    spec.validate()?;
    let outcome = train_run(&spec)?;
    let mut id = format!("{}_seed{}", spec.condition.algorithm.as_str(), spec.seed);
    if let Some(h) = a.horizon {
        id = format!("{}_h{h}_seed{}", spec.condition.algorithm.as_str(), spec.seed);
    }
    let dir = a.out.root().join(a.preset.as_str()).join(id);
    write_run_artifacts(&dir, &spec, &outcome)?;
    print_summary(&outcome.summary)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn print_summary(s: &damagelab::stats::SeedSummary) -> Result<()> {
    println!(
        "completion {:.3}, exit age {:.1} ± {:.1}, M_final {:.4}, D_final {:.4}, return {:.3}, basin {}",
        s.completion_rate,
        s.exit_age_mean,
        s.exit_age_sd,
        s.m_final_mean,
        s.d_final_mean,
        s.return_mean,
        s.basin.map_or("-".to_string(), |b| format!("{b:?}").to_lowercase())
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.checkpoint).map_err(|e| Error::Usage(format!("{}: {e}", a.checkpoint.display())))?;
    let checkpoint = PolicyCheckpoint::from_json(&text)?;
    let env = a.preset.config();
    if checkpoint.env_config_hash != env.hash() {
        return Err(Error::Usage(format!(
            "checkpoint was trained on a different {} configuration",
            a.preset
        )));
    }
    let episodes = evaluate(&checkpoint.params, &env, a.episodes, a.seed)?;
    let ctx = SummaryContext {
        seed: checkpoint.seed,
        preset: a.preset,
        condition: Default::default(),
        training_steps: checkpoint.training_steps,
        config_hash: env.hash(),
        start_age: env.start_age,
        effort_profile: None,
        checkpoint_ages: checkpoint_ages(a.preset),
    };
    print_summary(&summarize_seed(&episodes, &ctx)?)
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let schedule = config
        .schedule
        .as_ref()
        .map(|p| load_schedule_for(p, &config.env()))
        .transpose()?;
    let runs = plan_runs(&config, schedule.as_ref())?;
    if a.dry_run {
        println!("{}", config.echo()?);
        for r in &runs {
            println!("{}", r.id);
        }
        println!("{} runs", runs.len());
        return Ok(());
    }
    let root = a.out.root().join(&config.name);
    let workers = a.workers.unwrap_or_else(default_workers);
    let results = run_parallel(&runs, workers, |run| {
        let outcome = train_run(&run.spec)?;
        write_run_artifacts(&root.join(&run.id), &run.spec, &outcome)?;
        Ok::<_, Error>(outcome.summary)
    });
    let mut failed = 0;
    for (run, r) in runs.iter().zip(results) {
        match r {
            Ok(s) => println!(
                "{}: completion {:.3}, exit age {:.1}, M_final {:.4}",
                run.id, s.completion_rate, s.exit_age_mean, s.m_final_mean
            ),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", run.id);
            }
        }
    }
    if failed > 0 {
        return Err(Error::Internal(format!("{failed} of {} runs failed", runs.len())));
    }
    println!("wrote {}", root.display());
    Ok(())
}

fn cmaes(a: &CmaesArgs) -> Result<()> {
    let mut env = a.preset.config();
    if let Some(h) = a.horizon {
        env = env.with_horizon(h);
    }
    let bounds = RelaxBounds::default();
    let cma = bounds.cma_config(env.horizon, a.population, a.generations, a.seed);
    let result = relax(&env, &bounds, &cma)?;
    let dir = a.out.root().join("cmaes").join(format!("{}_h{}_seed{}", a.preset, env.horizon, a.seed));
    let files = vec![
        write_atomic(&dir, "result.json", serde_json::to_string_pretty(&result)?.as_bytes())?,
        write_atomic(&dir, "schedule.json", serde_json::to_string_pretty(&result.schedule)?.as_bytes())?,
    ];
    write_manifest(&dir, &env.hash(), files)?;
    let o = &result.outcome;
    println!(
        "best return {:.4}, M_final {:.4}, D_final {:.4}, {} after {} evaluations",
        o.total_return,
        o.m_final,
        o.d_final,
        o.termination.as_str(),
        result.search.evaluations
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn synth(c: &SynthCommand) -> Result<()> {
    match c {
        SynthCommand::HStar(p) => {
            let p = p.build()?;
            println!("H* = {:.4}", h_star(&p)?);
        }
        SynthCommand::Gap { params, samples, seed } => {
            let p = params.build()?;
            let q = exact_q_origin(&p);
            let mc = mc_step0_gradient(&p, *samples, *seed)?;
            println!("Q(0,e_H) {:.6}  Q(0,e_L) {:.6}  gap {:.6}", q.q_high, q.q_low, q.gap);
            println!("Lipschitz bound {:.6}", lipschitz_bound(&p));
            println!("MC step-0 gradient {:.6} ± {:.6} ({} samples)", mc.estimate, mc.std_error, mc.samples);
        }
        SynthCommand::Verify { kappas, max_horizon } => {
            let rows = commitment_sweep(&standard_grid(kappas, 2..=*max_horizon))?;
            let bad = commitment_counterexamples(&rows);
            println!("{} configurations, {} counterexamples", rows.len(), bad.len());
            for r in &bad {
                println!("  kappa {} H {}: gap {:.6}, H* {:.3}", r.params.kappa, r.params.horizon, r.gap, r.h_star);
            }
        }
    }
    Ok(())
}

fn find_dp_references(root: &Path, refs: &mut BTreeMap<PresetId, f64>) {
    let Ok(entries) = std::fs::read_dir(root) else { return };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            find_dp_references(&path, refs);
        } else if path.file_name().is_some_and(|n| n == "dp_report.json") {
            if let Ok(r) = read_json::<DpReport>(&path) {
                refs.entry(r.preset).or_insert(r.m_final);
            }
        }
    }
}

fn report(a: &ReportArgs) -> Result<()> {
    let root = a.root.clone().unwrap_or_else(output_root);
    let summaries: Vec<_> = collect_summaries(&root)?.into_iter().map(|(_, s)| s).collect();
    if summaries.is_empty() {
        return Err(Error::Usage(format!("no summary.json files under {}", root.display())));
    }
    let mut refs: BTreeMap<PresetId, f64> = a.dp_reference.iter().copied().collect();
    find_dp_references(&root, &mut refs);
    let rows = build_report(&summaries, &refs)?;
    print!("{}", report_text(&rows));
    write_atomic(&root, "report.csv", report_csv(&rows).as_bytes())?;
    println!("wrote {}", root.join("report.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::DpSolve(a) => dp_solve(a),
        Command::DpEval(a) => dp_eval(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Cmaes(a) => cmaes(a),
        Command::Synth { command } => synth(command),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) | Error::Schema(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use damagelab::policy::LOW_EFFORT_BIAS;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn init_bias_flag_defaults_to_low_effort_value() {
        let cli = Cli::try_parse_from(["damagelab", "train", "--init-bias"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.init_bias, Some(LOW_EFFORT_BIAS));
        let cli = Cli::try_parse_from(["damagelab", "train", "--init-bias", "-0.5", "--no-exit"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.init_bias, Some(-0.5));
        assert_eq!(a.no_exit, Some(true));
    }

    #[test]
    fn reference_parser() {
        assert_eq!(parse_reference("bricklayer=0.794").unwrap(), (PresetId::Bricklayer, 0.794));
        assert!(parse_reference("bricklayer").is_err());
        assert!(parse_reference("chef=0.1").is_err());
    }
}
