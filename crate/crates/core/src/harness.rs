//! Baselines, experiment plans, frozen-policy evaluation and interaction accounting.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, EpisodeStats, Policy, TrainConfig};
use crate::env::{base_reward, collect_random, run_episode, Action, AuditCounts, BeamEnv, InteractionAudit, MdpParams, RealEnv, Transition};
use crate::error::{invalid, Error, Result};
use crate::par::{self, mix_seed, Exec};
use crate::scenario::{Scenario, ScenarioConfig, SimRng};
use crate::twin::{evaluate_twin, train_twin, virtual_transitions, FidelityReport, LossHistory, TwinConfig, TwinEnv, TwinModel};

/// Moving-average window used when locating the training-curve crossover.
pub const CROSSOVER_WINDOW: usize = 50;

const STREAM_DATA: u64 = 1;
const STREAM_HELD_OUT: u64 = 2;
const STREAM_TWIN: u64 = 3;
const STREAM_AGENT: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_FIDELITY: u64 = 6;
const STREAM_BASELINE: u64 = 7;

/// Seed of the evaluation streams of a cell; shared by every method and axis point.
pub fn eval_seed(cell_seed: u64) -> u64 {
    mix_seed(cell_seed, STREAM_EVAL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sweep,
    Pso,
    OnlineDrl,
    OfflineDrl,
    DtDrlCql,
    DtDrlNocql,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Sweep, Method::Pso, Method::OnlineDrl, Method::OfflineDrl, Method::DtDrlCql, Method::DtDrlNocql];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sweep => "sweep",
            Method::Pso => "pso",
            Method::OnlineDrl => "online_drl",
            Method::OfflineDrl => "offline_drl",
            Method::DtDrlCql => "dt_drl_cql",
            Method::DtDrlNocql => "dt_drl_nocql",
        }
    }

    pub fn is_learned(self) -> bool {
        !matches!(self, Method::Sweep | Method::Pso)
    }

    /// Methods trained from the logged random-policy dataset.
    pub fn needs_dataset(self) -> bool {
        matches!(self, Method::OfflineDrl | Method::DtDrlCql | Method::DtDrlNocql)
    }

    pub fn uses_twin(self) -> bool {
        matches!(self, Method::DtDrlCql | Method::DtDrlNocql)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

/// Result of one probing-baseline episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub steps: usize,
    pub best_beam: usize,
    pub best_pd: f64,
    pub success: bool,
    pub base_return: f64,
}

struct ProbeLog {
    budget: usize,
    zeta: f64,
    params: MdpParams,
    out: ProbeOutcome,
}

impl ProbeLog {
    fn new(env: &RealEnv) -> Self {
        let params = *env.params();
        Self {
            budget: params.rewards.max_steps,
            zeta: params.rewards.success_threshold,
            params,
            out: ProbeOutcome { steps: 0, best_beam: 0, best_pd: f64::NEG_INFINITY, success: false, base_return: 0.0 },
        }
    }

    /// Probes `beam`; returns the detection probability and whether the episode is over.
    fn probe(&mut self, env: &mut RealEnv, beam: usize, rng: &mut SimRng) -> Result<(f64, bool)> {
        let pd = env.probe(beam, rng)?;
        self.out.steps += 1;
        self.out.base_return += base_reward(pd, &self.params.rewards);
        if pd > self.out.best_pd {
            self.out.best_pd = pd;
            self.out.best_beam = beam;
        }
        self.out.success = pd >= self.zeta;
        Ok((pd, self.out.success || self.out.steps >= self.budget))
    }
}

/// Exhaustive sweep in index order until a beam meets the threshold.
pub fn baseline_sweep(env: &mut RealEnv, rng: &mut SimRng) -> Result<ProbeOutcome> {
    env.start_probing(rng);
    let mut log = ProbeLog::new(env);
    for beam in 0..env.antennas() {
        if log.probe(env, beam, rng)?.1 {
            break;
        }
    }
    Ok(log.out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoConfig {
    pub particles: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self { particles: 4, inertia: 0.7, cognitive: 1.5, social: 1.5 }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("pso needs at least one particle".into()));
        }
        if [self.inertia, self.cognitive, self.social].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("pso coefficients must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Integer-position particle swarm over codebook indices. Every fitness
/// evaluation is one probe; stops at the first success or at the budget.
pub fn baseline_pso(env: &mut RealEnv, config: &PsoConfig, rng: &mut SimRng) -> Result<ProbeOutcome> {
    config.validate()?;
    env.start_probing(rng);
    let m = env.antennas();
    let top = (m - 1) as f64;
    let mut log = ProbeLog::new(env);
    let n = config.particles;
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0..m) as f64).collect();
    let mut v = vec![0.0; n];
    let mut pbest = x.clone();
    let mut pbest_val = vec![f64::NEG_INFINITY; n];
    let (mut gbest, mut gbest_val) = (x[0], f64::NEG_INFINITY);
    loop {
        for i in 0..n {
            let (pd, done) = log.probe(env, x[i] as usize, rng)?;
            if pd > pbest_val[i] {
                pbest_val[i] = pd;
                pbest[i] = x[i];
            }
            if pd > gbest_val {
                gbest_val = pd;
                gbest = x[i];
            }
            if done {
                return Ok(log.out);
            }
        }
        for i in 0..n {
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            v[i] = config.inertia * v[i] + config.cognitive * r1 * (pbest[i] - x[i]) + config.social * r2 * (gbest - x[i]);
            v[i] = v[i].clamp(-top, top);
            x[i] = (x[i] + v[i]).round().clamp(0.0, top);
        }
    }
}

/// Outcome of one frozen-policy evaluation episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub steps: usize,
    pub success: bool,
    pub base_return: f64,
    pub final_pd: f64,
}

impl From<ProbeOutcome> for EpisodeOutcome {
    fn from(p: ProbeOutcome) -> Self {
        Self { steps: p.steps, success: p.success, base_return: p.base_return, final_pd: p.best_pd }
    }
}

/// Runs `episodes` independent real-environment episodes. Episode `i` always
/// draws from stream `i` of `seed`, so methods evaluated with the same seed
/// face the same starts.
pub fn evaluate_with<F>(scenario: &Scenario, episodes: usize, seed: u64, exec: Exec, audit: &Arc<InteractionAudit>, run: F) -> Result<Vec<EpisodeOutcome>>
where
    F: Fn(&mut RealEnv, &mut SimRng) -> Result<EpisodeOutcome> + Sync + Send,
{
    par::map_indexed(exec, episodes, |i| {
        let mut env = RealEnv::new(scenario.clone(), audit.clone())?;
        let mut rng = par::stream_rng(seed, i as u64);
        run(&mut env, &mut rng)
    })
    .into_iter()
    .collect()
}

pub fn evaluate_policy(scenario: &Scenario, policy: &Policy, episodes: usize, seed: u64, exec: Exec) -> Result<Vec<EpisodeOutcome>> {
    evaluate_with(scenario, episodes, seed, exec, &InteractionAudit::shared(), |env, rng| {
        let ep = run_episode(env, rng, |s, _| policy.act(s))?;
        Ok(EpisodeOutcome { steps: ep.steps, success: ep.success, base_return: ep.base_return, final_pd: ep.final_pd })
    })
}

/// Uniform-random actions, the reference for learned policies.
pub fn evaluate_random(scenario: &Scenario, episodes: usize, seed: u64, exec: Exec) -> Result<Vec<EpisodeOutcome>> {
    evaluate_with(scenario, episodes, seed, exec, &InteractionAudit::shared(), |env, rng| {
        let max_delta = env.params().max_delta;
        let ep = run_episode(env, rng, |_, r| Ok(Action::random(max_delta, r)))?;
        Ok(EpisodeOutcome { steps: ep.steps, success: ep.success, base_return: ep.base_return, final_pd: ep.final_pd })
    })
}

/// Sample mean with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

pub fn mean_ci(xs: &[f64]) -> MeanCi {
    let n = xs.len();
    if n == 0 {
        return MeanCi { mean: f64::NAN, ci_low: f64::NAN, ci_high: f64::NAN, n };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let half = if n < 2 {
        0.0
    } else {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    };
    MeanCi { mean, ci_low: mean - half, ci_high: mean + half, n }
}

pub fn mean_steps(outcomes: &[EpisodeOutcome]) -> f64 {
    outcomes.iter().map(|o| o.steps as f64).sum::<f64>() / outcomes.len().max(1) as f64
}

/// Splits a logged dataset into its episodes (each starts at step 1).
pub fn split_episodes(data: &[Transition]) -> Vec<&[Transition]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=data.len() {
        if i == data.len() || data[i].step == 1 {
            if i > start {
                out.push(&data[start..i]);
            }
            start = i;
        }
    }
    out
}

/// Real interactions that produced a logged dataset: one call per transition
/// and one reset per episode.
pub fn logged_audit(data: &[Transition]) -> AuditCounts {
    AuditCounts { real_env_calls: data.len() as u64, real_resets: split_episodes(data).len() as u64, ..AuditCounts::default() }
}

/// Online DRL: the agent interacts with the real environment every step.
pub fn train_online(scenario: &Scenario, config: &TrainConfig, audit: Arc<InteractionAudit>, rng: &mut SimRng) -> Result<(Agent, Vec<EpisodeStats>)> {
    let mut env = RealEnv::new(scenario.clone(), audit)?;
    let mut agent = Agent::new(config.clone(), env.params().max_delta, rng)?;
    let curve = (0..config.episodes).map(|e| agent.train_episode(&mut env, e, rng)).collect::<Result<Vec<_>>>()?;
    Ok((agent, curve))
}

/// Offline DRL without a twin: pseudo-episodes cycle through the logged
/// episodes with one gradient step per logged transition, stopping early once
/// `gradient_budget` updates have been made.
pub fn train_offline(data: &[Transition], max_delta: usize, config: &TrainConfig, gradient_budget: Option<u64>, rng: &mut SimRng) -> Result<(Agent, Vec<EpisodeStats>)> {
    let episodes = split_episodes(data);
    if episodes.is_empty() {
        return Err(Error::Empty("offline dataset"));
    }
    let mut agent = Agent::new(config.clone(), max_delta, rng)?;
    if data.len() < config.batch_size {
        return Err(invalid(format!("offline dataset holds {} transitions, fewer than one batch", data.len())));
    }
    agent.replay.extend(data.iter().copied());
    let mut curve = Vec::new();
    for e in 0..config.episodes {
        let ep = episodes[e % episodes.len()];
        let ep = match gradient_budget {
            Some(b) if agent.grad_steps() >= b => break,
            Some(b) => &ep[..ep.len().min((b - agent.grad_steps()) as usize)],
            None => ep,
        };
        curve.push(agent.train_logged_episode(e, ep, rng)?);
    }
    Ok((agent, curve))
}

/// DT-assisted DRL: replay is seeded with twin-generated one-step transitions
/// and the logged data, then the agent trains by interacting with the twin only.
pub fn train_dt(twin: Arc<TwinModel>, data: &[Transition], params: MdpParams, antennas: usize, config: &TrainConfig, audit: Arc<InteractionAudit>, rng: &mut SimRng) -> Result<(Agent, Vec<EpisodeStats>)> {
    let mut agent = Agent::new(config.clone(), params.max_delta, rng)?;
    let count = twin.config.augment_factor * data.len();
    agent.replay.extend(virtual_transitions(&twin, data, count, &params, antennas, &audit, rng)?);
    agent.replay.extend(data.iter().copied());
    let mut env = TwinEnv::new(twin, params, antennas, data, audit)?;
    let curve = (0..config.episodes).map(|e| agent.train_episode(&mut env, e, rng)).collect::<Result<Vec<_>>>()?;
    Ok((agent, curve))
}

fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// First episode from which the candidate's moving-average training steps stay
/// at or below the reference's for the rest of training.
pub fn crossover_episode(candidate: &[EpisodeStats], reference: &[EpisodeStats], window: usize) -> Option<usize> {
    let n = candidate.len().min(reference.len());
    if n == 0 || window == 0 {
        return None;
    }
    let steps = |c: &[EpisodeStats]| c[..n].iter().map(|s| s.steps as f64).collect::<Vec<_>>();
    let a = moving_average(&steps(candidate), window);
    let b = moving_average(&steps(reference), window);
    let mut first = None;
    for e in (0..n).rev() {
        if a[e] <= b[e] {
            first = Some(e);
        } else {
            break;
        }
    }
    first
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PowerDbmw(Vec<f64>),
    PFa(Vec<f64>),
    /// Upper bound of the per-episode target speed, m/s.
    Velocity(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::PowerDbmw(_) => "power_dbmw",
            SweepAxis::PFa(_) => "p_fa",
            SweepAxis::Velocity(_) => "velocity",
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            SweepAxis::PowerDbmw(v) | SweepAxis::PFa(v) | SweepAxis::Velocity(v) => v,
        }
    }

    pub fn apply(&self, base: &ScenarioConfig, x: f64) -> ScenarioConfig {
        let mut cfg = base.clone();
        match self {
            SweepAxis::PowerDbmw(_) => cfg.tx_power_dbmw = x,
            SweepAxis::PFa(_) => cfg.p_fa = x,
            SweepAxis::Velocity(_) => cfg.target_speed_mps = x,
        }
        cfg
    }
}

/// A grid of scenario variants × replicates, each evaluated for every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub methods: Vec<Method>,
    pub scenario: ScenarioConfig,
    pub axis: SweepAxis,
    pub replicates: usize,
    /// One seed per replicate; derived from the scenario seed when empty.
    pub seeds: Vec<u64>,
    pub dataset_episodes: usize,
    /// Real episodes held out for twin fidelity; not part of any training run.
    pub held_out_episodes: usize,
    pub eval_episodes: usize,
    pub train: TrainConfig,
    pub twin: TwinConfig,
    pub pso: PsoConfig,
    /// Caps the offline baseline at the gradient steps of the DT-CQL run of
    /// the same cell, so both learn under identical update budgets.
    pub match_offline_budget: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            scenario: ScenarioConfig::default(),
            axis: SweepAxis::PowerDbmw(vec![10.0, 15.0, 20.0, 25.0, 30.0]),
            replicates: 1,
            seeds: Vec::new(),
            dataset_episodes: 200,
            held_out_episodes: 50,
            eval_episodes: 100,
            train: TrainConfig::default(),
            twin: TwinConfig::default(),
            pso: PsoConfig::default(),
            match_offline_budget: true,
        }
    }
}

impl ExperimentPlan {
    /// Reads a TOML or JSON plan, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let plan: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("plan lists no methods".into()));
        }
        if self.axis.values().is_empty() {
            return Err(Error::Config("plan axis is empty".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("plan needs at least one replicate".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.replicates {
            return Err(Error::Config(format!("{} seeds given for {} replicates", self.seeds.len(), self.replicates)));
        }
        let seeds = self.seeds();
        for (i, a) in seeds.iter().enumerate() {
            if seeds[i + 1..].contains(a) {
                return Err(Error::Config(format!("seed {a} appears more than once")));
            }
        }
        if self.dataset_episodes == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("dataset and evaluation episode counts must be positive".into()));
        }
        if self.methods.iter().any(|m| m.uses_twin()) && self.held_out_episodes == 0 {
            return Err(Error::Config("twin methods need held-out episodes for the fidelity report".into()));
        }
        for &x in self.axis.values() {
            self.axis.apply(&self.scenario, x).validate()?;
        }
        self.train.validate()?;
        self.twin.validate()?;
        self.pso.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.replicates as u64).map(|r| mix_seed(self.scenario.seed, r)).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn cell_count(&self) -> usize {
        self.axis.values().len() * self.replicates
    }
}

/// One method's training and evaluation inside a cell.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub outcomes: Vec<EpisodeOutcome>,
    pub curve: Vec<EpisodeStats>,
    /// Training-time interaction counts; for probing baselines, the evaluation probes.
    pub audit: AuditCounts,
    pub grad_steps: u64,
    pub wall_time_s: f64,
    pub policy: Option<Policy>,
    pub error: Option<String>,
}

impl MethodRun {
    fn failed(method: Method, err: impl fmt::Display) -> Self {
        Self {
            method,
            outcomes: Vec::new(),
            curve: Vec::new(),
            audit: AuditCounts::default(),
            grad_steps: 0,
            wall_time_s: 0.0,
            policy: None,
            error: Some(err.to_string()),
        }
    }

    pub fn mean_steps(&self) -> Option<f64> {
        (self.error.is_none() && !self.outcomes.is_empty()).then(|| mean_steps(&self.outcomes))
    }
}

pub fn interaction_audit(run: &MethodRun) -> AuditCounts {
    run.audit
}

/// All methods at one axis point and replicate.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub axis_index: usize,
    pub x: f64,
    pub replicate: usize,
    pub seed: u64,
    pub config_hash: u64,
    pub runs: Vec<MethodRun>,
    pub fidelity: Option<FidelityReport>,
    pub twin_history: Option<LossHistory>,
    /// Episode from which DT-CQL's training steps stay at or below online DRL's.
    pub crossover: Option<usize>,
}

impl CellResult {
    pub fn run(&self, method: Method) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == method)
    }
}

struct Shared {
    data: Vec<Transition>,
    collect: AuditCounts,
}

fn learned_run(method: Method, start: Instant, trained: Result<(Agent, Vec<EpisodeStats>)>, audit: AuditCounts, eval: impl FnOnce(&Policy) -> Result<Vec<EpisodeOutcome>>) -> MethodRun {
    let (agent, curve) = match trained {
        Ok(v) => v,
        Err(e) => return MethodRun::failed(method, e),
    };
    let policy = agent.policy();
    match eval(&policy) {
        Ok(outcomes) => MethodRun {
            method,
            outcomes,
            curve,
            audit,
            grad_steps: agent.grad_steps(),
            wall_time_s: start.elapsed().as_secs_f64(),
            policy: Some(policy),
            error: None,
        },
        Err(e) => MethodRun::failed(method, e),
    }
}

/// Runs every method of `plan` at one axis point and replicate. Stage
/// failures are recorded on the affected methods; the cell always completes.
pub fn run_cell(plan: &ExperimentPlan, axis_index: usize, replicate: usize, exec: Exec) -> CellResult {
    let x = plan.axis.values()[axis_index];
    let seed = plan.seeds()[replicate];
    let config = plan.axis.apply(&plan.scenario, x);
    let mut cell = CellResult {
        axis_index,
        x,
        replicate,
        seed,
        config_hash: config.digest(),
        runs: Vec::new(),
        fidelity: None,
        twin_history: None,
        crossover: None,
    };
    let scenario = match Scenario::new(config) {
        Ok(s) => s,
        Err(e) => {
            cell.runs = plan.methods.iter().map(|&m| MethodRun::failed(m, &e)).collect();
            return cell;
        }
    };
    let eval_seed = eval_seed(seed);
    let wants = |m: Method| plan.methods.contains(&m);
    let params = MdpParams::for_scenario(&scenario);
    let antennas = scenario.antennas();
    let mut runs: Vec<MethodRun> = Vec::new();

    for method in [Method::Sweep, Method::Pso].into_iter().filter(|&m| wants(m)) {
        let start = Instant::now();
        let audit = InteractionAudit::shared();
        let baseline_seed = mix_seed(eval_seed, STREAM_BASELINE);
        let result = evaluate_with(&scenario, plan.eval_episodes, baseline_seed, exec, &audit, |env, rng| {
            let out = match method {
                Method::Sweep => baseline_sweep(env, rng)?,
                _ => baseline_pso(env, &plan.pso, rng)?,
            };
            Ok(out.into())
        });
        runs.push(match result {
            Ok(outcomes) => MethodRun {
                method,
                outcomes,
                curve: Vec::new(),
                audit: audit.counts(),
                grad_steps: 0,
                wall_time_s: start.elapsed().as_secs_f64(),
                policy: None,
                error: None,
            },
            Err(e) => MethodRun::failed(method, e),
        });
    }

    let eval = |p: &Policy| evaluate_policy(&scenario, p, plan.eval_episodes, eval_seed, exec);

    if wants(Method::OnlineDrl) {
        let start = Instant::now();
        let audit = InteractionAudit::shared();
        let mut rng = par::stream_rng(seed, STREAM_AGENT);
        let trained = train_online(&scenario, &plan.train, audit.clone(), &mut rng);
        runs.push(learned_run(Method::OnlineDrl, start, trained, audit.counts(), eval));
    }

    let dataset_methods: Vec<Method> = plan.methods.iter().copied().filter(|m| m.needs_dataset()).collect();
    if !dataset_methods.is_empty() {
        let start = Instant::now();
        let shared = (|| -> Result<Shared> {
            let audit = InteractionAudit::shared();
            let mut env = RealEnv::new(scenario.clone(), audit.clone())?;
            let data = collect_random(&mut env, plan.dataset_episodes, &mut par::stream_rng(seed, STREAM_DATA))?;
            Ok(Shared { data, collect: audit.counts() })
        })();
        match shared {
            Err(e) => runs.extend(dataset_methods.iter().map(|&m| MethodRun::failed(m, &e))),
            Ok(shared) => {
                let collect_time = start.elapsed().as_secs_f64();
                let mut dt_budget = None;
                let twin_methods: Vec<Method> = dataset_methods.iter().copied().filter(|m| m.uses_twin()).collect();
                if !twin_methods.is_empty() {
                    let t0 = Instant::now();
                    let twin = (|| -> Result<TwinModel> {
                        let config = TwinConfig { output_floor: scenario.config.p_fa, ..plan.twin.clone() };
                        train_twin(&shared.data, config, &mut par::stream_rng(seed, STREAM_TWIN))
                    })();
                    match twin {
                        Err(e) => runs.extend(twin_methods.iter().map(|&m| MethodRun::failed(m, format!("twin training: {e}")))),
                        Ok(twin) => {
                            let twin = Arc::new(twin);
                            let twin_time = t0.elapsed().as_secs_f64() + collect_time;
                            cell.twin_history = Some(twin.history.clone());
                            cell.fidelity = (|| -> Result<FidelityReport> {
                                let mut env = RealEnv::new(scenario.clone(), InteractionAudit::shared())?;
                                let held = collect_random(&mut env, plan.held_out_episodes, &mut par::stream_rng(seed, STREAM_HELD_OUT))?;
                                evaluate_twin(&twin, &held, &mut par::stream_rng(seed, STREAM_FIDELITY))
                            })()
                            .map_err(|e| log::warn!("fidelity report failed: {e}"))
                            .ok();
                            for method in twin_methods {
                                let start = Instant::now();
                                let audit = InteractionAudit::shared();
                                let config = TrainConfig { cql_weight: if method == Method::DtDrlCql { plan.train.cql_weight } else { 0.0 }, ..plan.train.clone() };
                                let mut rng = par::stream_rng(seed, STREAM_AGENT);
                                let trained = train_dt(twin.clone(), &shared.data, params, antennas, &config, audit.clone(), &mut rng);
                                let mut run = learned_run(method, start, trained, shared.collect + audit.counts(), eval);
                                run.wall_time_s += twin_time;
                                if method == Method::DtDrlCql && run.error.is_none() {
                                    dt_budget = Some(run.grad_steps);
                                }
                                runs.push(run);
                            }
                        }
                    }
                }
                if wants(Method::OfflineDrl) {
                    let start = Instant::now();
                    let budget = if plan.match_offline_budget { dt_budget } else { None };
                    let mut rng = par::stream_rng(seed, STREAM_AGENT);
                    let trained = train_offline(&shared.data, params.max_delta, &plan.train, budget, &mut rng);
                    let mut run = learned_run(Method::OfflineDrl, start, trained, shared.collect, eval);
                    run.wall_time_s += collect_time;
                    runs.push(run);
                }
            }
        }
    }

    if let (Some(dt), Some(online)) = (runs.iter().find(|r| r.method == Method::DtDrlCql), runs.iter().find(|r| r.method == Method::OnlineDrl)) {
        cell.crossover = crossover_episode(&dt.curve, &online.curve, CROSSOVER_WINDOW);
    }
    cell.runs = plan.methods.iter().filter_map(|&m| runs.iter().find(|r| r.method == m).cloned()).collect();
    cell
}

/// Runs every cell of the plan; cells are independent jobs.
pub fn run_plan(plan: &ExperimentPlan, exec: Exec) -> Result<PlanReport> {
    plan.validate()?;
    let n_axis = plan.axis.values().len();
    let cells = par::map_indexed(exec, plan.cell_count(), |k| {
        let (axis_index, replicate) = (k % n_axis, k / n_axis);
        log::info!("cell {} = {} {} replicate {replicate}", k, plan.axis.name(), plan.axis.values()[axis_index]);
        run_cell(plan, axis_index, replicate, exec)
    });
    Ok(PlanReport { plan: plan.clone(), cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub config_hash: String,
    pub axis: String,
    pub x: f64,
    pub replicate: usize,
    pub seed: u64,
    pub episode: usize,
    pub cum_reward: f64,
    pub steps: usize,
    pub success: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis: String,
    pub x: f64,
    pub method: Method,
    pub replicates: usize,
    pub failed: usize,
    pub episodes: usize,
    pub mean_steps: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_reward: f64,
    pub reward_ci_low: f64,
    pub reward_ci_high: f64,
    pub success_rate: f64,
    pub real_env_calls: u64,
    pub twin_calls: u64,
    pub real_fraction: f64,
}

/// Twin fidelity per axis point, averaged over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub power_dbmw: f64,
    pub kl: f64,
    pub w1: f64,
    pub mmd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub axis: String,
    pub x: f64,
    pub replicate: usize,
    pub method: Method,
    pub real_env_calls: u64,
    pub real_resets: u64,
    pub twin_calls: u64,
    pub twin_resets: u64,
    pub total_transitions: u64,
    pub real_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow {
    pub axis: String,
    pub x: f64,
    pub replicate: usize,
    pub crossover_episode: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub x: f64,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl SeriesPoint {
    fn from_samples(x: f64, samples: &[f64]) -> Self {
        let m = mean_ci(samples);
        Self { x, mean: m.mean, ci_low: m.ci_low, ci_high: m.ci_high }
    }
}

/// Every cell of a finished plan.
#[derive(Debug, Clone)]
pub struct PlanReport {
    pub plan: ExperimentPlan,
    pub cells: Vec<CellResult>,
}

impl PlanReport {
    fn cells_at(&self, axis_index: usize) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(move |c| c.axis_index == axis_index)
    }

    fn successful_runs(&self, axis_index: usize, method: Method) -> Vec<&MethodRun> {
        self.cells_at(axis_index).filter_map(|c| c.run(method)).filter(|r| r.error.is_none()).collect()
    }

    /// Mean evaluation steps pooled over the replicates of one cell column.
    pub fn mean_steps(&self, method: Method, axis_index: usize) -> Option<f64> {
        let outcomes: Vec<EpisodeOutcome> = self.successful_runs(axis_index, method).iter().flat_map(|r| r.outcomes.iter().copied()).collect();
        (!outcomes.is_empty()).then(|| mean_steps(&outcomes))
    }

    pub fn audit(&self, method: Method, axis_index: usize) -> AuditCounts {
        self.successful_runs(axis_index, method).iter().fold(AuditCounts::default(), |acc, r| acc + r.audit)
    }

    pub fn records(&self) -> Vec<RunRecord> {
        let mut out = Vec::new();
        for c in &self.cells {
            for r in &c.runs {
                for (i, o) in r.outcomes.iter().enumerate() {
                    out.push(RunRecord {
                        method: r.method,
                        config_hash: format!("{:016x}", c.config_hash),
                        axis: self.plan.axis.name().into(),
                        x: c.x,
                        replicate: c.replicate,
                        seed: c.seed,
                        episode: i,
                        cum_reward: o.base_return,
                        steps: o.steps,
                        success: o.success,
                        wall_time_s: r.wall_time_s,
                    });
                }
            }
        }
        out
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for (i, &x) in self.plan.axis.values().iter().enumerate() {
            for &method in &self.plan.methods {
                let all: Vec<&MethodRun> = self.cells_at(i).filter_map(|c| c.run(method)).collect();
                let ok: Vec<&&MethodRun> = all.iter().filter(|r| r.error.is_none()).collect();
                let steps: Vec<f64> = ok.iter().flat_map(|r| r.outcomes.iter().map(|o| o.steps as f64)).collect();
                let rewards: Vec<f64> = ok.iter().flat_map(|r| r.outcomes.iter().map(|o| o.base_return)).collect();
                let successes = ok.iter().flat_map(|r| r.outcomes.iter()).filter(|o| o.success).count();
                let s = mean_ci(&steps);
                let w = mean_ci(&rewards);
                let audit = self.audit(method, i);
                rows.push(SummaryRow {
                    axis: self.plan.axis.name().into(),
                    x,
                    method,
                    replicates: ok.len(),
                    failed: all.len() - ok.len(),
                    episodes: steps.len(),
                    mean_steps: s.mean,
                    ci_low: s.ci_low,
                    ci_high: s.ci_high,
                    mean_reward: w.mean,
                    reward_ci_low: w.ci_low,
                    reward_ci_high: w.ci_high,
                    success_rate: successes as f64 / steps.len().max(1) as f64,
                    real_env_calls: audit.real_env_calls,
                    twin_calls: audit.twin_calls,
                    real_fraction: audit.real_fraction(),
                });
            }
        }
        rows
    }

    pub fn fidelity_rows(&self) -> Vec<FidelityRow> {
        let mut rows = Vec::new();
        for (i, &x) in self.plan.axis.values().iter().enumerate() {
            let reports: Vec<&FidelityReport> = self.cells_at(i).filter_map(|c| c.fidelity.as_ref()).collect();
            if reports.is_empty() {
                continue;
            }
            let n = reports.len() as f64;
            let mean = |f: fn(&FidelityReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
            rows.push(FidelityRow {
                power_dbmw: self.plan.axis.apply(&self.plan.scenario, x).tx_power_dbmw,
                kl: mean(|r| r.kl),
                w1: mean(|r| r.wasserstein1),
                mmd: mean(|r| r.mmd),
            });
        }
        rows
    }

    pub fn audit_rows(&self) -> Vec<AuditRow> {
        let mut rows = Vec::new();
        for c in &self.cells {
            for r in c.runs.iter().filter(|r| r.error.is_none()) {
                rows.push(AuditRow {
                    axis: self.plan.axis.name().into(),
                    x: c.x,
                    replicate: c.replicate,
                    method: r.method,
                    real_env_calls: r.audit.real_env_calls,
                    real_resets: r.audit.real_resets,
                    twin_calls: r.audit.twin_calls,
                    twin_resets: r.audit.twin_resets,
                    total_transitions: r.audit.total_transitions(),
                    real_fraction: r.audit.real_fraction(),
                });
            }
        }
        rows
    }

    pub fn crossover_rows(&self) -> Vec<CrossoverRow> {
        self.cells
            .iter()
            .filter(|c| c.run(Method::DtDrlCql).is_some() && c.run(Method::OnlineDrl).is_some())
            .map(|c| CrossoverRow { axis: self.plan.axis.name().into(), x: c.x, replicate: c.replicate, crossover_episode: c.crossover })
            .collect()
    }

    pub fn errors(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.cells {
            for r in &c.runs {
                if let Some(e) = &r.error {
                    out.push(format!("{} {} replicate {} {}: {e}", self.plan.axis.name(), c.x, c.replicate, r.method));
                }
            }
        }
        out
    }

    /// Evaluation steps and returns against the axis, one series per method.
    pub fn axis_series(&self, method: Method) -> (Vec<SeriesPoint>, Vec<SeriesPoint>) {
        let mut steps = Vec::new();
        let mut rewards = Vec::new();
        for (i, &x) in self.plan.axis.values().iter().enumerate() {
            let runs = self.successful_runs(i, method);
            if runs.is_empty() {
                continue;
            }
            let s: Vec<f64> = runs.iter().flat_map(|r| r.outcomes.iter().map(|o| o.steps as f64)).collect();
            let w: Vec<f64> = runs.iter().flat_map(|r| r.outcomes.iter().map(|o| o.base_return)).collect();
            steps.push(SeriesPoint::from_samples(x, &s));
            rewards.push(SeriesPoint::from_samples(x, &w));
        }
        (steps, rewards)
    }

    /// Per-episode training steps and rewards, with the interval taken across replicates.
    pub fn training_series(&self, method: Method, axis_index: usize) -> (Vec<SeriesPoint>, Vec<SeriesPoint>) {
        let runs = self.successful_runs(axis_index, method);
        let len = runs.iter().map(|r| r.curve.len()).max().unwrap_or(0);
        let mut steps = Vec::with_capacity(len);
        let mut rewards = Vec::with_capacity(len);
        for e in 0..len {
            let s: Vec<f64> = runs.iter().filter_map(|r| r.curve.get(e)).map(|c| c.steps as f64).collect();
            let w: Vec<f64> = runs.iter().filter_map(|r| r.curve.get(e)).map(|c| c.cum_reward).collect();
            steps.push(SeriesPoint::from_samples(e as f64, &s));
            rewards.push(SeriesPoint::from_samples(e as f64, &w));
        }
        (steps, rewards)
    }

    /// Twin loss curves, with the interval taken across replicates.
    pub fn twin_loss_series(&self, axis_index: usize) -> (Vec<SeriesPoint>, Vec<SeriesPoint>) {
        let hs: Vec<&LossHistory> = self.cells_at(axis_index).filter_map(|c| c.twin_history.as_ref()).collect();
        let len = hs.iter().map(|h| h.generator.len()).min().unwrap_or(0);
        let series = |f: fn(&LossHistory) -> &Vec<f64>| {
            (0..len).map(|e| SeriesPoint::from_samples(e as f64, &hs.iter().map(|h| f(h)[e]).collect::<Vec<_>>())).collect()
        };
        (series(|h| &h.generator), series(|h| &h.discriminator))
    }

    /// Writes `records.csv`, `summary.csv`, `audit.csv`, `fidelity.csv`,
    /// `crossover.csv` and the `plot-data` tree under `dir`. Everything except
    /// `records.csv` is a pure function of the plan and seeds.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("records.csv"), &self.records())?;
        write_csv(&dir.join("summary.csv"), &self.summary())?;
        write_csv(&dir.join("audit.csv"), &self.audit_rows())?;
        if self.plan.methods.iter().any(|m| m.uses_twin()) {
            write_csv(&dir.join("fidelity.csv"), &self.fidelity_rows())?;
        }
        if self.plan.methods.contains(&Method::DtDrlCql) && self.plan.methods.contains(&Method::OnlineDrl) {
            write_csv(&dir.join("crossover.csv"), &self.crossover_rows())?;
        }
        fs::write(dir.join("plan.toml"), self.plan.to_toml()?)?;
        let plots = dir.join("plot-data");
        let axis = self.plan.axis.name();
        for &method in &self.plan.methods {
            let (steps, rewards) = self.axis_series(method);
            write_series(&plots.join(format!("steps_vs_{axis}")), method.name(), &steps)?;
            write_series(&plots.join(format!("reward_vs_{axis}")), method.name(), &rewards)?;
            if method.is_learned() {
                for (i, x) in self.plan.axis.values().iter().enumerate() {
                    let (steps, rewards) = self.training_series(method, i);
                    let name = format!("{}_{axis}_{x}", method.name());
                    write_series(&plots.join("training_steps"), &name, &steps)?;
                    write_series(&plots.join("training_reward"), &name, &rewards)?;
                }
            }
        }
        for (i, x) in self.plan.axis.values().iter().enumerate() {
            let (g, d) = self.twin_loss_series(i);
            if !g.is_empty() {
                write_series(&plots.join("twin_loss"), &format!("generator_{axis}_{x}"), &g)?;
                write_series(&plots.join("twin_loss"), &format!("discriminator_{axis}_{x}"), &d)?;
            }
        }
        Ok(())
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_series(dir: &Path, name: &str, points: &[SeriesPoint]) -> Result<()> {
    if points.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    write_csv(&dir.join(format!("{name}.csv")), points)
}
