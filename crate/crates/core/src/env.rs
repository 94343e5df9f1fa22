//! Beam-tracking MDP: states, actions, rewards, episodes and transition logs.

use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scenario::{advance_target, Scenario, SimRng, TargetTrack};

pub const DEFAULT_MAX_DELTA: usize = 5;

/// `(mu_t, P_D^t, f_g^t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpState {
    pub beam: usize,
    pub pd: f64,
    pub feedback: i8,
}

impl MdpState {
    pub fn initial(beam: usize, pd: f64) -> Self {
        Self { beam, pd, feedback: 0 }
    }
}

/// Signed codebook step, never zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    delta: i32,
}

impl Action {
    pub fn new(delta: i32, max_delta: usize) -> Result<Self> {
        if delta == 0 || delta.unsigned_abs() as usize > max_delta {
            return Err(invalid(format!("action delta must be in +-[1, {max_delta}], got {delta}")));
        }
        Ok(Self { delta })
    }

    pub fn delta(self) -> i32 {
        self.delta
    }

    /// Maps `0..2*max_delta` onto `-max_delta..=-1, 1..=max_delta`.
    pub fn from_index(index: usize, max_delta: usize) -> Result<Self> {
        if index >= 2 * max_delta {
            return Err(invalid(format!("action index {index} out of range 0..{}", 2 * max_delta)));
        }
        let k = index as i32 - max_delta as i32;
        Self::new(if k < 0 { k } else { k + 1 }, max_delta)
    }

    pub fn index(self, max_delta: usize) -> usize {
        let m = max_delta as i32;
        (if self.delta < 0 { self.delta + m } else { self.delta + m - 1 }) as usize
    }

    pub fn random(max_delta: usize, rng: &mut SimRng) -> Self {
        Self::from_index(rng.random_range(0..2 * max_delta), max_delta).expect("index in range")
    }
}

/// `b_0, b_1, b_2, rho, zeta, T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub success_bonus: f64,
    pub shaping_scale: f64,
    pub shaping_slope: f64,
    pub discount: f64,
    pub success_threshold: f64,
    pub max_steps: usize,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self { success_bonus: 5.0, shaping_scale: 1.0, shaping_slope: 5.0, discount: 0.99, success_threshold: 0.9, max_steps: 64 }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.success_bonus > 0.0) {
            return Err(invalid("success bonus must be positive"));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(invalid("discount must lie in (0, 1)"));
        }
        if !(self.success_threshold > 0.0 && self.success_threshold < 1.0) {
            return Err(invalid("success threshold must lie in (0, 1)"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be positive"));
        }
        Ok(())
    }
}

/// Reward parameters plus the action range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpParams {
    pub max_delta: usize,
    pub rewards: RewardParams,
}

impl Default for MdpParams {
    fn default() -> Self {
        Self { max_delta: DEFAULT_MAX_DELTA, rewards: RewardParams::default() }
    }
}

impl MdpParams {
    pub fn for_scenario(scenario: &Scenario) -> Self {
        let mut p = Self::default();
        p.rewards.success_threshold = scenario.config.zeta;
        p
    }

    pub fn n_actions(&self) -> usize {
        2 * self.max_delta
    }
}

/// `clamp(mu + delta, 0, M-1)`.
pub fn apply_action(beam: usize, delta: i32, antennas: usize) -> Result<usize> {
    if delta == 0 {
        return Err(invalid("zero action delta"));
    }
    if beam >= antennas {
        return Err(invalid(format!("beam {beam} out of range 0..{antennas}")));
    }
    Ok((beam as i64 + i64::from(delta)).clamp(0, antennas as i64 - 1) as usize)
}

pub fn base_reward(pd_next: f64, params: &RewardParams) -> f64 {
    if pd_next < params.success_threshold {
        -1.0
    } else {
        params.success_bonus
    }
}

/// `Phi(x) = b_1 / (1 + exp(-b_2 x))`.
pub fn potential(pd: f64, params: &RewardParams) -> f64 {
    params.shaping_scale / (1.0 + (-params.shaping_slope * pd).exp())
}

pub fn shaping_reward(pd: f64, pd_next: f64, params: &RewardParams) -> f64 {
    params.discount * potential(pd_next, params) - potential(pd, params)
}

/// `sgn((P_D^{t+1} - P_D^t) * delta)` with `sgn(0) = 0`.
pub fn feedback_flag(pd: f64, pd_next: f64, delta: i32) -> i8 {
    let v = (pd_next - pd) * f64::from(delta);
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// One logged step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub episode: u64,
    /// 1-based index of this step within its episode.
    pub step: usize,
    pub state: MdpState,
    pub action: Action,
    pub reward_base: f64,
    pub reward_shaping: f64,
    pub next_state: MdpState,
    pub done: bool,
}

impl Transition {
    pub fn reward(&self) -> f64 {
        self.reward_base + self.reward_shaping
    }
}

/// Episode bookkeeping shared by the real and the twin environment, so reward,
/// feedback and termination logic has a single implementation.
#[derive(Debug, Clone)]
pub struct EpisodeCore {
    params: MdpParams,
    antennas: usize,
    next_episode: u64,
    episode: u64,
    step: usize,
    state: Option<MdpState>,
    done: bool,
}

impl EpisodeCore {
    pub fn new(params: MdpParams, antennas: usize) -> Result<Self> {
        params.rewards.validate()?;
        if params.max_delta == 0 {
            return Err(invalid("max_delta must be positive"));
        }
        Ok(Self { params, antennas, next_episode: 0, episode: 0, step: 0, state: None, done: true })
    }

    pub fn params(&self) -> &MdpParams {
        &self.params
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn state(&self) -> Option<MdpState> {
        self.state
    }

    pub fn is_active(&self) -> bool {
        self.state.is_some() && !self.done
    }

    pub fn begin(&mut self, beam: usize, pd: f64) -> MdpState {
        let s = MdpState::initial(beam, pd);
        self.episode = self.next_episode;
        self.next_episode += 1;
        self.step = 0;
        self.done = false;
        self.state = Some(s);
        s
    }

    /// Beam the action leads to; fails once the episode has ended.
    pub fn next_beam(&self, action: Action) -> Result<usize> {
        let s = self.state.ok_or(Error::EpisodeFinished)?;
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        apply_action(s.beam, action.delta(), self.antennas)
    }

    pub fn commit(&mut self, action: Action, pd_next: f64) -> Result<Transition> {
        self.next_beam(action)?;
        let s = self.state.expect("checked by next_beam");
        let t = make_transition(s, action, pd_next, &self.params, self.antennas, self.episode, self.step + 1)?;
        self.step += 1;
        self.state = Some(t.next_state);
        self.done = t.done;
        Ok(t)
    }
}

/// Builds the transition from `state` under `action` landing on `pd_next`.
/// Terminal when `pd_next >= zeta` or `step` reaches the episode cap.
pub fn make_transition(
    state: MdpState,
    action: Action,
    pd_next: f64,
    params: &MdpParams,
    antennas: usize,
    episode: u64,
    step: usize,
) -> Result<Transition> {
    if !(0.0..=1.0).contains(&pd_next) {
        return Err(Error::NonFinite(format!("P_D {pd_next} outside [0, 1]")));
    }
    let r = &params.rewards;
    let beam_next = apply_action(state.beam, action.delta(), antennas)?;
    let next = MdpState { beam: beam_next, pd: pd_next, feedback: feedback_flag(state.pd, pd_next, action.delta()) };
    Ok(Transition {
        episode,
        step,
        state,
        action,
        reward_base: base_reward(pd_next, r),
        reward_shaping: shaping_reward(state.pd, pd_next, r),
        next_state: next,
        done: pd_next >= r.success_threshold || step >= r.max_steps,
    })
}

/// Interaction counts, shared by every environment of one run.
#[derive(Debug, Default)]
pub struct InteractionAudit {
    real_steps: AtomicU64,
    real_resets: AtomicU64,
    real_probes: AtomicU64,
    twin_steps: AtomicU64,
    twin_resets: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditCounts {
    /// Real-environment transitions (MDP steps and baseline probes).
    pub real_env_calls: u64,
    /// Sensing calls made while resetting real episodes.
    pub real_resets: u64,
    pub twin_calls: u64,
    pub twin_resets: u64,
}

impl AuditCounts {
    pub fn total_transitions(&self) -> u64 {
        self.real_env_calls + self.twin_calls
    }

    /// Every sensing query issued to the real environment.
    pub fn real_sensing_calls(&self) -> u64 {
        self.real_env_calls + self.real_resets
    }

    pub fn real_fraction(&self) -> f64 {
        let t = self.total_transitions();
        if t == 0 { 0.0 } else { self.real_env_calls as f64 / t as f64 }
    }
}

impl std::ops::Add for AuditCounts {
    type Output = AuditCounts;

    fn add(self, o: Self) -> Self {
        AuditCounts {
            real_env_calls: self.real_env_calls + o.real_env_calls,
            real_resets: self.real_resets + o.real_resets,
            twin_calls: self.twin_calls + o.twin_calls,
            twin_resets: self.twin_resets + o.twin_resets,
        }
    }
}

impl std::ops::Sub for AuditCounts {
    type Output = AuditCounts;

    fn sub(self, o: Self) -> Self {
        AuditCounts {
            real_env_calls: self.real_env_calls - o.real_env_calls,
            real_resets: self.real_resets - o.real_resets,
            twin_calls: self.twin_calls - o.twin_calls,
            twin_resets: self.twin_resets - o.twin_resets,
        }
    }
}

impl InteractionAudit {
    pub fn shared() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn counts(&self) -> AuditCounts {
        AuditCounts {
            real_env_calls: self.real_steps.load(Ordering::Relaxed) + self.real_probes.load(Ordering::Relaxed),
            real_resets: self.real_resets.load(Ordering::Relaxed),
            twin_calls: self.twin_steps.load(Ordering::Relaxed),
            twin_resets: self.twin_resets.load(Ordering::Relaxed),
        }
    }

    pub fn record_twin_step(&self) {
        self.twin_steps.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_twin_reset(&self) {
        self.twin_resets.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Real,
    Twin,
}

/// Reset/step contract implemented by the real scene and by the digital twin.
pub trait BeamEnv {
    fn reset(&mut self, rng: &mut SimRng) -> Result<MdpState>;
    fn step(&mut self, action: Action, rng: &mut SimRng) -> Result<(Transition, bool)>;
    fn params(&self) -> &MdpParams;
    fn antennas(&self) -> usize;
    fn kind(&self) -> EnvKind;
}

/// The environment backed by the closed-form sensing model.
#[derive(Debug, Clone)]
pub struct RealEnv {
    scenario: Scenario,
    core: EpisodeCore,
    target: TargetTrack,
    audit: Arc<InteractionAudit>,
}

impl RealEnv {
    pub fn new(scenario: Scenario, audit: Arc<InteractionAudit>) -> Result<Self> {
        let params = MdpParams::for_scenario(&scenario);
        Self::with_params(scenario, params, audit)
    }

    pub fn with_params(scenario: Scenario, params: MdpParams, audit: Arc<InteractionAudit>) -> Result<Self> {
        let core = EpisodeCore::new(params, scenario.antennas())?;
        let target = TargetTrack {
            position: scenario.config.target_start,
            speed: 0.0,
            heading: 0.0,
            step_interval: scenario.config.step_interval_s,
        };
        Ok(Self { scenario, core, target, audit })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn target(&self) -> &TargetTrack {
        &self.target
    }

    pub fn audit(&self) -> &Arc<InteractionAudit> {
        &self.audit
    }

    /// Starts a fresh target for a probing baseline; no sensing call.
    pub fn start_probing(&mut self, rng: &mut SimRng) {
        self.target = self.scenario.spawn_target(rng);
    }

    /// One baseline probe: sense beam `beam`, then let the target move.
    pub fn probe(&mut self, beam: usize, rng: &mut SimRng) -> Result<f64> {
        let obs = self.scenario.sensing_observation(beam, &self.target, rng)?;
        self.audit.real_probes.fetch_add(1, Ordering::Relaxed);
        self.target = advance_target(&self.target, self.scenario.config.area_m, rng);
        Ok(obs.pd)
    }
}

impl BeamEnv for RealEnv {
    fn reset(&mut self, rng: &mut SimRng) -> Result<MdpState> {
        self.target = self.scenario.spawn_target(rng);
        let beam = rng.random_range(0..self.scenario.antennas());
        let obs = self.scenario.sensing_observation(beam, &self.target, rng)?;
        self.audit.real_resets.fetch_add(1, Ordering::Relaxed);
        Ok(self.core.begin(beam, obs.pd))
    }

    fn step(&mut self, action: Action, rng: &mut SimRng) -> Result<(Transition, bool)> {
        let beam = self.core.next_beam(action)?;
        self.target = advance_target(&self.target, self.scenario.config.area_m, rng);
        let obs = self.scenario.sensing_observation(beam, &self.target, rng)?;
        self.audit.real_steps.fetch_add(1, Ordering::Relaxed);
        let t = self.core.commit(action, obs.pd)?;
        Ok((t, t.done))
    }

    fn params(&self) -> &MdpParams {
        self.core.params()
    }

    fn antennas(&self) -> usize {
        self.core.antennas()
    }

    fn kind(&self) -> EnvKind {
        EnvKind::Real
    }
}

/// Outcome of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub transitions: Vec<Transition>,
    pub steps: usize,
    pub success: bool,
    pub base_return: f64,
    pub total_return: f64,
    pub final_pd: f64,
}

/// Runs one episode to termination under `policy`.
pub fn run_episode<E, P>(env: &mut E, rng: &mut SimRng, mut policy: P) -> Result<EpisodeSummary>
where
    E: BeamEnv + ?Sized,
    P: FnMut(&MdpState, &mut SimRng) -> Result<Action>,
{
    let mut s = env.reset(rng)?;
    let mut transitions = Vec::new();
    loop {
        let a = policy(&s, rng)?;
        let (t, done) = env.step(a, rng)?;
        transitions.push(t);
        s = t.next_state;
        if done {
            break;
        }
    }
    Ok(summarize(transitions, env.params().rewards.success_threshold))
}

pub fn summarize(transitions: Vec<Transition>, zeta: f64) -> EpisodeSummary {
    let final_pd = transitions.last().map_or(0.0, |t| t.next_state.pd);
    EpisodeSummary {
        steps: transitions.len(),
        success: final_pd >= zeta,
        base_return: transitions.iter().map(|t| t.reward_base).sum(),
        total_return: transitions.iter().map(Transition::reward).sum(),
        final_pd,
        transitions,
    }
}

/// Uniform-random-action episodes, the default data-collection policy.
pub fn collect_random<E: BeamEnv + ?Sized>(env: &mut E, episodes: usize, rng: &mut SimRng) -> Result<Vec<Transition>> {
    let max_delta = env.params().max_delta;
    let mut out = Vec::new();
    for _ in 0..episodes {
        let ep = run_episode(env, rng, |_, r| Ok(Action::random(max_delta, r)))?;
        out.extend(ep.transitions);
    }
    Ok(out)
}

/// Flat CSV row of a [`Transition`]. `reward_shaped` holds the shaping term only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub episode: u64,
    pub step: usize,
    pub mu_t: usize,
    pub pd_t: f64,
    pub fg_t: i8,
    pub action: i32,
    pub reward_base: f64,
    pub reward_shaped: f64,
    pub mu_next: usize,
    pub pd_next: f64,
    pub fg_next: i8,
    pub done: u8,
}

impl From<&Transition> for TransitionRow {
    fn from(t: &Transition) -> Self {
        Self {
            episode: t.episode,
            step: t.step,
            mu_t: t.state.beam,
            pd_t: t.state.pd,
            fg_t: t.state.feedback,
            action: t.action.delta(),
            reward_base: t.reward_base,
            reward_shaped: t.reward_shaping,
            mu_next: t.next_state.beam,
            pd_next: t.next_state.pd,
            fg_next: t.next_state.feedback,
            done: u8::from(t.done),
        }
    }
}

impl TransitionRow {
    pub fn into_transition(self, max_delta: usize) -> Result<Transition> {
        let check_fg = |f: i8| if (-1..=1).contains(&f) { Ok(f) } else { Err(invalid(format!("feedback flag {f}"))) };
        let check_pd = |p: f64| if (0.0..=1.0).contains(&p) { Ok(p) } else { Err(invalid(format!("P_D {p} outside [0, 1]"))) };
        Ok(Transition {
            episode: self.episode,
            step: self.step,
            state: MdpState { beam: self.mu_t, pd: check_pd(self.pd_t)?, feedback: check_fg(self.fg_t)? },
            action: Action::new(self.action, max_delta)?,
            reward_base: self.reward_base,
            reward_shaping: self.reward_shaped,
            next_state: MdpState { beam: self.mu_next, pd: check_pd(self.pd_next)?, feedback: check_fg(self.fg_next)? },
            done: self.done != 0,
        })
    }
}

/// Appends transitions to a CSV file, writing the header only when the file is new or empty.
pub fn append_transitions(path: &Path, transitions: &[Transition]) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let fresh = file.metadata()?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(&mut file);
    for t in transitions {
        w.serialize(TransitionRow::from(t))?;
    }
    w.flush()?;
    drop(w);
    file.flush()?;
    Ok(())
}

pub fn write_transitions<W: Write>(writer: W, transitions: &[Transition]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in transitions {
        w.serialize(TransitionRow::from(t))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_transitions<R: Read>(reader: R, max_delta: usize) -> Result<Vec<Transition>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize::<TransitionRow>().map(|row| row?.into_transition(max_delta)).collect()
}

pub fn load_transitions(path: &Path, max_delta: usize) -> Result<Vec<Transition>> {
    read_transitions(std::fs::File::open(path)?, max_delta)
}

/// Small known-dynamics MDPs for checking shaping invariance.
pub mod tabular {
    /// `transitions[s][a]` lists `(probability, next_state)`; `rewards[s][a]` is the expected reward.
    #[derive(Debug, Clone)]
    pub struct TabularMdp {
        pub transitions: Vec<Vec<Vec<(f64, usize)>>>,
        pub rewards: Vec<Vec<f64>>,
        pub terminal: Vec<bool>,
        pub discount: f64,
    }

    impl TabularMdp {
        pub fn n_states(&self) -> usize {
            self.rewards.len()
        }

        /// Adds `rho * Phi(s') - Phi(s)` to every expected reward. Terminal states
        /// carry zero potential so episodic returns telescope cleanly.
        pub fn shaped(&self, phi: &[f64]) -> Self {
            let pot = |s: usize| if self.terminal[s] { 0.0 } else { phi[s] };
            let mut out = self.clone();
            for (s, row) in out.rewards.iter_mut().enumerate() {
                for (a, r) in row.iter_mut().enumerate() {
                    let next: f64 = self.transitions[s][a].iter().map(|&(p, n)| p * pot(n)).sum();
                    *r += self.discount * next - pot(s);
                }
            }
            out
        }

        /// Converged action values.
        pub fn value_iteration(&self, tol: f64) -> Vec<Vec<f64>> {
            let n = self.n_states();
            let mut v = vec![0.0; n];
            loop {
                let q = self.q_from(&v);
                let nv: Vec<f64> = (0..n)
                    .map(|s| if self.terminal[s] { 0.0 } else { q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max) })
                    .collect();
                let delta = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                v = nv;
                if delta < tol {
                    return self.q_from(&v);
                }
            }
        }

        fn q_from(&self, v: &[f64]) -> Vec<Vec<f64>> {
            self.rewards
                .iter()
                .enumerate()
                .map(|(s, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(a, r)| r + self.discount * self.transitions[s][a].iter().map(|&(p, n)| p * v[n]).sum::<f64>())
                        .collect()
                })
                .collect()
        }
    }

    /// Index of the largest value, lowest index on ties.
    pub fn argmax(values: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in values.iter().enumerate() {
            if v > values[best] {
                best = i;
            }
        }
        best
    }

    pub fn greedy_policy(q: &[Vec<f64>]) -> Vec<usize> {
        q.iter().map(|row| argmax(row)).collect()
    }
}
