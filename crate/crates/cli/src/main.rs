use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use beamtwin::agent::{write_episode_log, Agent, EpisodeStats, Policy, TrainConfig};
use beamtwin::env::{collect_random, AuditCounts, load_transitions, write_transitions, InteractionAudit, MdpParams, RealEnv, Transition};
use beamtwin::harness::{eval_seed, evaluate_policy, evaluate_random, logged_audit, mean_ci, run_plan, train_dt, train_offline, train_online, write_csv, ExperimentPlan};
use beamtwin::par::{stream_rng, Exec};
use beamtwin::scenario::{Scenario, ScenarioConfig, SimRng, TargetTrack};
use beamtwin::twin::{evaluate_twin, train_twin, TwinConfig, TwinModel};

const STREAM_DATA: u64 = 1;
const STREAM_HELD_OUT: u64 = 2;
const STREAM_TWIN: u64 = 3;
const STREAM_AGENT: u64 = 4;
const STREAM_FIDELITY: u64 = 6;

#[derive(Debug, Parser)]
#[command(name = "beamtwin", version, about = "Beam tracking for cell-free ISAC with a digital-twin assisted offline agent")]
struct Cli {
    /// Plan or scenario file (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run Monte-Carlo and evaluation loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Online,
    Offline,
    Twin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dump the P_D of every codeword for a stationary target.
    Simulate {
        /// Target position in metres; defaults to the scenario start.
        #[arg(long, num_args = 2, value_names = ["X", "Y"])]
        target: Option<Vec<f64>>,
    },
    /// Log random-policy episodes on the real environment.
    Collect {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the conditional GAN twin on a logged dataset.
    TrainTwin {
        /// Dataset CSV; collected afresh when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a beam-tracking agent.
    TrainAgent {
        #[arg(long, value_enum, default_value = "twin")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "on")]
        cql: Toggle,
        /// Dataset CSV for offline and twin modes; collected afresh when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained twin for twin mode; trained afresh when omitted.
        #[arg(long)]
        twin: Option<PathBuf>,
        /// Gradient-step cap for offline mode.
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Evaluate a frozen policy (or the random policy) on the real environment.
    Evaluate {
        #[arg(long, required_unless_present = "random")]
        policy: Option<PathBuf>,
        #[arg(long)]
        random: bool,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run an experiment plan and write records, summaries and plot data.
    Plan,
    /// Print the interaction counts of a finished run directory.
    Audit {
        run: PathBuf,
    },
}

/// Everything a command needs from the config file and flags.
struct Setup {
    plan: ExperimentPlan,
    scenario: Scenario,
    seed: u64,
    exec: Exec,
    out: PathBuf,
}

impl Setup {
    fn from_cli(cli: &Cli) -> Result<Self> {
        let mut plan = match &cli.config {
            Some(path) => load_config(path)?,
            None => ExperimentPlan::default(),
        };
        if let Some(seed) = cli.seed {
            plan.scenario.seed = seed;
        }
        plan.validate()?;
        let scenario = Scenario::new(plan.scenario.clone())?;
        let seed = plan.scenario.seed;
        let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
        Ok(Self { plan, scenario, seed, exec, out: cli.out.clone() })
    }

    fn rng(&self, stream: u64) -> SimRng {
        stream_rng(self.seed, stream)
    }

    fn params(&self) -> MdpParams {
        MdpParams::for_scenario(&self.scenario)
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    fn twin_config(&self) -> TwinConfig {
        TwinConfig { output_floor: self.plan.scenario.p_fa, ..self.plan.twin.clone() }
    }

    /// The logged dataset and the real interactions that produced it.
    fn dataset(&self, path: Option<&Path>) -> Result<(Vec<Transition>, AuditCounts)> {
        let data = match path {
            Some(p) => load_transitions(p, self.params().max_delta).with_context(|| format!("loading {}", p.display()))?,
            None => {
                let mut env = RealEnv::new(self.scenario.clone(), InteractionAudit::shared())?;
                collect_random(&mut env, self.plan.dataset_episodes, &mut self.rng(STREAM_DATA))?
            }
        };
        let counts = logged_audit(&data);
        Ok((data, counts))
    }
}

/// A plan file, or a bare scenario file wrapped in the default plan.
fn load_config(path: &Path) -> Result<ExperimentPlan> {
    match ExperimentPlan::load(path) {
        Ok(plan) => Ok(plan),
        Err(plan_err) => match ScenarioConfig::load(path) {
            Ok(scenario) => Ok(ExperimentPlan { scenario, ..ExperimentPlan::default() }),
            Err(_) => Err(plan_err).with_context(|| format!("reading {}", path.display())),
        },
    }
}

#[derive(Serialize)]
struct ProfileRow {
    beam: usize,
    pd: f64,
    beam_gain: f64,
    noncentrality: f64,
    threshold: f64,
}

fn simulate(s: &Setup, target: Option<Vec<f64>>) -> Result<()> {
    let position = match target.as_deref() {
        Some([x, y]) => [*x, *y],
        Some(_) => bail!("--target takes two coordinates"),
        None => s.plan.scenario.target_start,
    };
    let track = TargetTrack { position, speed: 0.0, heading: 0.0, step_interval: s.plan.scenario.step_interval_s };
    let profile = s.scenario.pd_profile(&track, &mut s.rng(0))?;
    let rows: Vec<ProfileRow> = profile
        .iter()
        .map(|o| ProfileRow { beam: o.beam, pd: o.pd, beam_gain: o.beam_gain, noncentrality: o.total_noncentrality(), threshold: o.threshold })
        .collect();
    let path = s.out_file("pd_profile.csv")?;
    write_csv(&path, &rows)?;
    let best = rows.iter().max_by(|a, b| a.pd.total_cmp(&b.pd)).expect("codebook is nonempty");
    println!("target at ({:.1}, {:.1}): best beam {} with P_D {:.4}", position[0], position[1], best.beam, best.pd);
    println!("wrote {}", path.display());
    Ok(())
}

fn collect(s: &Setup, episodes: Option<usize>) -> Result<()> {
    let audit = InteractionAudit::shared();
    let mut env = RealEnv::new(s.scenario.clone(), audit.clone())?;
    let data = collect_random(&mut env, episodes.unwrap_or(s.plan.dataset_episodes), &mut s.rng(STREAM_DATA))?;
    let path = s.out_file("dataset.csv")?;
    write_transitions(fs::File::create(&path)?, &data)?;
    println!("{} transitions, {} real calls", data.len(), audit.counts().real_env_calls);
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    generator: f64,
    discriminator: f64,
}

fn fit_twin(s: &Setup, data: &[Transition]) -> Result<TwinModel> {
    let twin = train_twin(data, s.twin_config(), &mut s.rng(STREAM_TWIN))?;
    let rows: Vec<LossRow> = twin
        .history
        .generator
        .iter()
        .zip(&twin.history.discriminator)
        .enumerate()
        .map(|(epoch, (&generator, &discriminator))| LossRow { epoch, generator, discriminator })
        .collect();
    write_csv(&s.out_file("twin_losses.csv")?, &rows)?;
    twin.save(&s.out_file("twin.bt")?)?;
    Ok(twin)
}

fn train_twin_cmd(s: &Setup, data: Option<&Path>) -> Result<()> {
    let (data, _) = s.dataset(data)?;
    let twin = fit_twin(s, &data)?;
    let mut env = RealEnv::new(s.scenario.clone(), InteractionAudit::shared())?;
    let held = collect_random(&mut env, s.plan.held_out_episodes, &mut s.rng(STREAM_HELD_OUT))?;
    let report = evaluate_twin(&twin, &held, &mut s.rng(STREAM_FIDELITY))?;
    fs::write(s.out_file("fidelity.json")?, serde_json::to_string_pretty(&report)?)?;
    if let (Some(g), Some(d)) = (twin.history.generator.last(), twin.history.discriminator.last()) {
        println!("final losses: generator {g:.4}, discriminator {d:.4}");
    }
    println!("fidelity: KL {:.4}, W1 {:.4}, MMD {:.4}", report.kl, report.wasserstein1, report.mmd);
    println!("wrote {}", s.out.display());
    Ok(())
}

fn train_agent(s: &Setup, mode: Mode, cql: Toggle, data: Option<&Path>, twin: Option<&Path>, budget: Option<u64>) -> Result<()> {
    let config = TrainConfig { cql_weight: if cql == Toggle::On { s.plan.train.cql_weight } else { 0.0 }, ..s.plan.train.clone() };
    let params = s.params();
    let mut rng = s.rng(STREAM_AGENT);
    let (agent, curve, audit): (Agent, Vec<EpisodeStats>, _) = match mode {
        Mode::Online => {
            let audit = InteractionAudit::shared();
            let (agent, curve) = train_online(&s.scenario, &config, audit.clone(), &mut rng)?;
            (agent, curve, audit.counts())
        }
        Mode::Offline => {
            let (data, logged) = s.dataset(data)?;
            let (agent, curve) = train_offline(&data, params.max_delta, &config, budget, &mut rng)?;
            (agent, curve, logged)
        }
        Mode::Twin => {
            let (data, logged) = s.dataset(data)?;
            let audit = InteractionAudit::shared();
            let model = match twin {
                Some(p) => TwinModel::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => fit_twin(s, &data)?,
            };
            let (agent, curve) = train_dt(Arc::new(model), &data, params, s.scenario.antennas(), &config, audit.clone(), &mut rng)?;
            (agent, curve, logged + audit.counts())
        }
    };
    agent.policy().save(&s.out_file("policy.bt")?)?;
    write_episode_log(fs::File::create(s.out_file("training.csv")?)?, &curve)?;
    fs::write(s.out_file("audit.json")?, serde_json::to_string_pretty(&audit)?)?;
    let tail = &curve[curve.len().saturating_sub(50)..];
    let avg = tail.iter().map(|c| c.steps as f64).sum::<f64>() / tail.len().max(1) as f64;
    println!("{} episodes, {} gradient steps, last-50 mean steps {avg:.2}", curve.len(), agent.grad_steps());
    println!("real calls {}, twin calls {}, real fraction {:.4}", audit.real_env_calls, audit.twin_calls, audit.real_fraction());
    println!("wrote {}", s.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    episode: usize,
    steps: usize,
    success: bool,
    cum_reward: f64,
    final_pd: f64,
}

fn evaluate(s: &Setup, policy: Option<&Path>, random: bool, episodes: Option<usize>) -> Result<()> {
    let n = episodes.unwrap_or(s.plan.eval_episodes);
    let seed = eval_seed(s.seed);
    let outcomes = if random {
        evaluate_random(&s.scenario, n, seed, s.exec)?
    } else {
        let path = policy.context("--policy or --random is required")?;
        let policy = Policy::load(path).with_context(|| format!("loading {}", path.display()))?;
        evaluate_policy(&s.scenario, &policy, n, seed, s.exec)?
    };
    let rows: Vec<EvalRow> = outcomes
        .iter()
        .enumerate()
        .map(|(episode, o)| EvalRow { episode, steps: o.steps, success: o.success, cum_reward: o.base_return, final_pd: o.final_pd })
        .collect();
    let path = s.out_file("evaluation.csv")?;
    write_csv(&path, &rows)?;
    let steps = mean_ci(&outcomes.iter().map(|o| o.steps as f64).collect::<Vec<_>>());
    let success = outcomes.iter().filter(|o| o.success).count() as f64 / n as f64;
    println!("{n} episodes: mean steps {:.2} [{:.2}, {:.2}], success rate {success:.2}", steps.mean, steps.ci_low, steps.ci_high);
    println!("wrote {}", path.display());
    Ok(())
}

fn plan(s: &Setup) -> Result<()> {
    let report = run_plan(&s.plan, s.exec)?;
    report.write(&s.out)?;
    for row in report.summary() {
        println!(
            "{}={} {:<13} steps {:>6.2} [{:.2}, {:.2}] success {:.2} real fraction {:.3}",
            row.axis, row.x, row.method.name(), row.mean_steps, row.ci_low, row.ci_high, row.success_rate, row.real_fraction
        );
    }
    for e in report.errors() {
        eprintln!("failed: {e}");
    }
    println!("wrote {}", s.out.display());
    Ok(())
}

fn audit(run: &Path) -> Result<()> {
    let single = run.join("audit.json");
    let table = run.join("audit.csv");
    if single.exists() {
        let counts: AuditCounts = serde_json::from_str(&fs::read_to_string(&single)?)?;
        println!("real_env_calls {}", counts.real_env_calls);
        println!("real_resets {}", counts.real_resets);
        println!("twin_calls {}", counts.twin_calls);
        println!("twin_resets {}", counts.twin_resets);
        println!("total_transitions {}", counts.total_transitions());
        println!("real_fraction {:.4}", counts.real_fraction());
    } else if table.exists() {
        print!("{}", fs::read_to_string(&table)?);
    } else {
        bail!("{} holds neither audit.json nor audit.csv", run.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Command::Audit { run } = &cli.command {
        return audit(run);
    }
    let s = Setup::from_cli(&cli)?;
    match cli.command {
        Command::Simulate { target } => simulate(&s, target),
        Command::Collect { episodes } => collect(&s, episodes),
        Command::TrainTwin { data } => train_twin_cmd(&s, data.as_deref()),
        Command::TrainAgent { mode, cql, data, twin, budget } => train_agent(&s, mode, cql, data.as_deref(), twin.as_deref(), budget),
        Command::Evaluate { policy, random, episodes } => evaluate(&s, policy.as_deref(), random, episodes),
        Command::Plan => plan(&s),
        Command::Audit { .. } => unreachable!("handled above"),
    }
}
