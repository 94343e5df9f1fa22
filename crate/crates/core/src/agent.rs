//! Dueling double-Q agent with replay, epsilon-greedy exploration and the
//! conservative (CQL) penalty.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, BeamEnv, MdpState, Transition};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Adam, Checkpoint, DenseNet, LayerSpec, Mode};
use crate::scenario::SimRng;

pub const DEFAULT_EMBED_DIM: usize = 16;
/// `b_3` of the variant sigmoid.
pub const VARIANT_SLOPE: f64 = 5.0;

/// `[embedding(mu), sigma_v(P_D), f_g]`, length `embed_dim + 2`.
pub fn encode_state(s: &MdpState, embed_dim: usize) -> Result<Vec<f64>> {
    let mut v = nn::sinusoidal_embedding(s.beam, embed_dim)?;
    v.push(nn::variant_sigmoid(s.pd, VARIANT_SLOPE));
    v.push(f64::from(s.feedback));
    Ok(v)
}

pub fn encode_batch(states: &[MdpState], embed_dim: usize) -> Result<Array2<f64>> {
    let width = embed_dim + 2;
    let mut flat = Vec::with_capacity(states.len() * width);
    for s in states {
        flat.extend(encode_state(s, embed_dim)?);
    }
    Array2::from_shape_vec((states.len(), width), flat).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Shared trunk with value and advantage heads: `Q = U + A - max_a A`.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    trunk: DenseNet,
    value: DenseNet,
    advantage: DenseNet,
    embed_dim: usize,
    argmax_adv: Vec<usize>,
}

impl QNetwork {
    pub fn new(n_actions: usize, embed_dim: usize, hidden: &[usize], rng: &mut SimRng) -> Result<Self> {
        let width = *hidden.last().ok_or(Error::Empty("hidden layers"))?;
        let trunk_specs = nn::mlp(embed_dim + 2, &hidden[..hidden.len() - 1], width, Activation::Relu, Activation::Relu, false);
        Ok(Self {
            trunk: DenseNet::new(&trunk_specs, rng)?,
            value: DenseNet::new(&[LayerSpec::new(width, 1, Activation::Linear)], rng)?,
            advantage: DenseNet::new(&[LayerSpec::new(width, n_actions, Activation::Linear)], rng)?,
            embed_dim,
            argmax_adv: Vec::new(),
        })
    }

    pub fn n_actions(&self) -> usize {
        self.advantage.outputs()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn combine(u: &Array2<f64>, a: &Array2<f64>) -> (Array2<f64>, Vec<usize>) {
        let mut q = a.clone();
        let mut arg = Vec::with_capacity(a.nrows());
        for (mut row, uu) in q.rows_mut().into_iter().zip(u.column(0)) {
            let k = argmax(row.as_slice().expect("standard layout"));
            let m = row[k];
            row.mapv_inplace(|v| v - m + uu);
            arg.push(k);
        }
        (q, arg)
    }

    /// Training forward pass; caches activations for [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let h = self.trunk.forward(x, Mode::Train)?;
        let u = self.value.forward(&h, Mode::Train)?;
        let a = self.advantage.forward(&h, Mode::Train)?;
        let (q, arg) = Self::combine(&u, &a);
        self.argmax_adv = arg;
        Ok(q)
    }

    pub fn q_values(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let h = self.trunk.infer(x)?;
        let (q, _) = Self::combine(&self.value.infer(&h)?, &self.advantage.infer(&h)?);
        Ok(q)
    }

    pub fn state_value(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        let h = self.trunk.infer(x)?;
        Ok(self.value.infer(&h)?.column(0).to_vec())
    }

    pub fn q_state(&self, s: &MdpState) -> Result<Vec<f64>> {
        let x = encode_batch(std::slice::from_ref(s), self.embed_dim)?;
        Ok(self.q_values(&x)?.row(0).to_vec())
    }

    /// Parameter gradients (trunk, value, advantage order) for `dq = dL/dQ`.
    pub fn backward(&self, dq: &Array2<f64>) -> Result<Vec<f64>> {
        if self.argmax_adv.len() != dq.nrows() {
            return Err(Error::MissingCache);
        }
        let du = dq.sum_axis(Axis(1)).insert_axis(Axis(1));
        let mut da = dq.clone();
        for (mut row, (&k, &s)) in da.rows_mut().into_iter().zip(self.argmax_adv.iter().zip(du.column(0))) {
            row[k] -= s;
        }
        let (gv, hv) = self.value.backward(&du)?;
        let (ga, ha) = self.advantage.backward(&da)?;
        let (gt, _) = self.trunk.backward(&(hv + ha))?;
        Ok([gt, gv, ga].concat())
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.value.param_count() + self.advantage.param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        [self.trunk.params(), self.value.params(), self.advantage.params()].concat()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::DimensionMismatch { expected: self.param_count(), got: p.len() });
        }
        let (t, rest) = p.split_at(self.trunk.param_count());
        let (v, a) = rest.split_at(self.value.param_count());
        self.trunk.set_params(t)?;
        self.value.set_params(v)?;
        self.advantage.set_params(a)?;
        self.argmax_adv.clear();
        Ok(())
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: "q_network".into(),
            nets: vec![
                ("trunk".into(), self.trunk.clone()),
                ("value".into(), self.value.clone()),
                ("advantage".into(), self.advantage.clone()),
            ],
            meta: serde_json::json!({ "embed_dim": self.embed_dim, "extra": meta }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "q_network" {
            return Err(Error::Config(format!("expected a q_network checkpoint, found {}", ck.kind)));
        }
        let embed_dim = ck.meta["embed_dim"].as_u64().ok_or_else(|| Error::Config("missing embed_dim".into()))? as usize;
        let q = Self {
            trunk: ck.net("trunk")?.clone(),
            value: ck.net("value")?.clone(),
            advantage: ck.net("advantage")?.clone(),
            embed_dim,
            argmax_adv: Vec::new(),
        };
        if q.trunk.inputs() != embed_dim + 2 || q.value.inputs() != q.trunk.outputs() || q.advantage.inputs() != q.trunk.outputs() {
            return Err(Error::Config("q_network checkpoint has inconsistent layer sizes".into()));
        }
        Ok(q)
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

/// Fixed-capacity FIFO replay memory.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        ts.into_iter().for_each(|t| self.push(t));
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        Ok((0..n).map(|_| self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub discount: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Gradient steps between target-network syncs.
    pub target_sync: u64,
    pub episodes: usize,
    pub cql_weight: f64,
    pub epsilon_start: f64,
    pub replay_capacity: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Optional multiplicative decay applied to `lr` every `lr_decay_every` episodes.
    pub lr_decay: Option<f64>,
    pub lr_decay_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            batch_size: 16,
            lr: 1e-4,
            target_sync: 200,
            episodes: 1000,
            cql_weight: 0.1,
            epsilon_start: 0.2,
            replay_capacity: 50_000,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden: vec![128, 128, 128],
            lr_decay: None,
            lr_decay_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.target_sync == 0 || self.episodes == 0 || self.replay_capacity == 0 {
            return bad("batch_size, target_sync, episodes and replay_capacity must be positive");
        }
        if !(self.lr > 0.0) || !(self.cql_weight >= 0.0) {
            return bad("lr must be positive and cql_weight nonnegative");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) {
            return bad("epsilon_start must lie in [0, 1]");
        }
        if self.hidden.is_empty() {
            return bad("need at least one hidden layer");
        }
        Ok(())
    }

    /// `P_e = eps_0 (1 - e/E)`.
    pub fn epsilon(&self, episode: usize) -> f64 {
        epsilon_schedule(self.epsilon_start, episode, self.episodes)
    }
}

pub fn epsilon_schedule(start: f64, episode: usize, episodes: usize) -> f64 {
    (start * (1.0 - episode as f64 / episodes as f64)).clamp(0.0, start)
}

/// `r + rho Q^-(s', argmax_a Q(s', a))`, or `r` at terminal transitions.
pub fn ddqn_targets(batch: &[Transition], q: &QNetwork, q_target: &QNetwork, discount: f64) -> Result<Vec<f64>> {
    let next: Vec<MdpState> = batch.iter().map(|t| t.next_state).collect();
    let x = encode_batch(&next, q.embed_dim)?;
    let online = q.q_values(&x)?;
    let frozen = q_target.q_values(&x)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.done {
                t.reward()
            } else {
                let a = argmax(online.row(i).as_slice().expect("standard layout"));
                t.reward() + discount * frozen[[i, a]]
            }
        })
        .collect())
}

/// Mean squared TD error over the taken actions; returns loss and `dL/dQ`.
pub fn td_loss(q: &Array2<f64>, actions: &[usize], targets: &[f64]) -> Result<(f64, Array2<f64>)> {
    if actions.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n = actions.len() as f64;
    let mut grad = Array2::zeros(q.dim());
    let mut loss = 0.0;
    for (i, (&a, &y)) in actions.iter().zip(targets).enumerate() {
        let d = q[[i, a]] - y;
        loss += d * d / n;
        grad[[i, a]] = 2.0 * d / n;
    }
    Ok((loss, grad))
}

/// Mean of `logsumexp_a Q(s, a) - Q(s, a_data)`; returns penalty and `dPenalty/dQ`.
pub fn cql_penalty(q: &Array2<f64>, actions: &[usize]) -> Result<(f64, Array2<f64>)> {
    if actions.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n = actions.len() as f64;
    let mut grad = Array2::zeros(q.dim());
    let mut total = 0.0;
    for (i, &a) in actions.iter().enumerate() {
        let row = q.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += (m + z.ln() - row[a]) / n;
        for (j, v) in row.iter().enumerate() {
            grad[[i, j]] = (v - m).exp() / z / n;
        }
        grad[[i, a]] -= 1.0 / n;
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub td: f64,
    pub cql: f64,
}

/// Per-episode training metrics (one CSV row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub cum_reward: f64,
    pub steps: usize,
    pub epsilon: f64,
    pub loss_td: f64,
    pub loss_cql: f64,
}

pub fn write_episode_log<W: Write>(writer: W, stats: &[EpisodeStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Online network, frozen target, optimizer and replay memory.
#[derive(Debug, Clone)]
pub struct Agent {
    pub q: QNetwork,
    pub target: QNetwork,
    pub replay: ReplayBuffer,
    pub config: TrainConfig,
    opt: Adam,
    grad_steps: u64,
    max_delta: usize,
}

impl Agent {
    pub fn new(config: TrainConfig, max_delta: usize, rng: &mut SimRng) -> Result<Self> {
        config.validate()?;
        let q = QNetwork::new(2 * max_delta, config.embed_dim, &config.hidden, rng)?;
        let opt = Adam::new(q.param_count(), config.lr, 0.9, 0.999);
        Ok(Self {
            target: q.clone(),
            q,
            replay: ReplayBuffer::new(config.replay_capacity),
            config,
            opt,
            grad_steps: 0,
            max_delta,
        })
    }

    pub fn max_delta(&self) -> usize {
        self.max_delta
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn policy(&self) -> Policy {
        Policy { q: self.q.clone(), max_delta: self.max_delta }
    }

    pub fn select_action(&self, s: &MdpState, epsilon: f64, rng: &mut SimRng) -> Result<Action> {
        select_action(&self.q, s, epsilon, self.max_delta, rng)
    }

    /// One minibatch update of the combined TD + CQL loss.
    pub fn gradient_step(&mut self, rng: &mut SimRng) -> Result<LossStats> {
        let batch = self.replay.sample(self.config.batch_size, rng)?;
        self.update_on(&batch)
    }

    pub fn update_on(&mut self, batch: &[Transition]) -> Result<LossStats> {
        let targets = ddqn_targets(batch, &self.q, &self.target, self.config.discount)?;
        let states: Vec<MdpState> = batch.iter().map(|t| t.state).collect();
        let actions: Vec<usize> = batch.iter().map(|t| t.action.index(self.max_delta)).collect();
        let x = encode_batch(&states, self.config.embed_dim)?;
        let q = self.q.forward(&x)?;
        let (td, mut dq) = td_loss(&q, &actions, &targets)?;
        let mut cql = 0.0;
        if self.config.cql_weight > 0.0 {
            let (pen, g) = cql_penalty(&q, &actions)?;
            cql = pen;
            dq.scaled_add(self.config.cql_weight, &g);
        }
        if !td.is_finite() || !cql.is_finite() {
            return Err(Error::Diverged(format!("td loss {td}, cql penalty {cql}")));
        }
        let grads = self.q.backward(&dq)?;
        let mut p = self.q.params();
        self.opt.step(&mut p, &grads)?;
        self.q.set_params(&p)?;
        self.grad_steps += 1;
        if self.grad_steps % self.config.target_sync == 0 {
            self.sync_target();
        }
        Ok(LossStats { td, cql })
    }

    pub fn sync_target(&mut self) {
        self.target = self.q.clone();
    }

    /// Applies the optional step decay of the learning rate for `episode`.
    fn schedule_lr(&mut self, episode: usize) {
        if let Some(decay) = self.config.lr_decay {
            let k = (episode / self.config.lr_decay_every.max(1)) as i32;
            self.opt.lr = self.config.lr * decay.powi(k);
        }
    }

    /// Interacts with `env` for one episode, storing every transition and taking
    /// one gradient step per environment step once the replay holds a batch.
    pub fn train_episode<E: BeamEnv + ?Sized>(&mut self, env: &mut E, episode: usize, rng: &mut SimRng) -> Result<EpisodeStats> {
        self.schedule_lr(episode);
        let eps = self.config.epsilon(episode);
        let mut s = env.reset(rng)?;
        let (mut cum, mut steps) = (0.0, 0);
        let mut loss = LossStats::default();
        let mut updates = 0;
        loop {
            let a = self.select_action(&s, eps, rng)?;
            let (t, done) = env.step(a, rng)?;
            self.replay.push(t);
            cum += t.reward();
            steps += 1;
            if self.replay.len() >= self.config.batch_size {
                let l = self.gradient_step(rng)?;
                loss.td += l.td;
                loss.cql += l.cql;
                updates += 1;
            }
            s = t.next_state;
            if done {
                break;
            }
        }
        let k = f64::from(updates.max(1));
        Ok(EpisodeStats { episode, cum_reward: cum, steps, epsilon: eps, loss_td: loss.td / k, loss_cql: loss.cql / k })
    }

    /// Offline pass over one logged episode: one gradient step per logged transition.
    pub fn train_logged_episode(&mut self, episode: usize, logged: &[Transition], rng: &mut SimRng) -> Result<EpisodeStats> {
        self.schedule_lr(episode);
        let mut loss = LossStats::default();
        for _ in logged {
            let l = self.gradient_step(rng)?;
            loss.td += l.td;
            loss.cql += l.cql;
        }
        let k = logged.len().max(1) as f64;
        Ok(EpisodeStats {
            episode,
            cum_reward: logged.iter().map(Transition::reward).sum(),
            steps: logged.len(),
            epsilon: 0.0,
            loss_td: loss.td / k,
            loss_cql: loss.cql / k,
        })
    }
}

pub fn select_action(q: &QNetwork, s: &MdpState, epsilon: f64, max_delta: usize, rng: &mut SimRng) -> Result<Action> {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(Action::random(max_delta, rng));
    }
    Action::from_index(argmax(&q.q_state(s)?), max_delta)
}

/// A frozen greedy policy, cheap to clone into evaluation jobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub q: QNetwork,
    pub max_delta: usize,
}

impl Policy {
    pub fn act(&self, s: &MdpState) -> Result<Action> {
        Action::from_index(argmax(&self.q.q_state(s)?), self.max_delta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.q.to_checkpoint(serde_json::json!({ "max_delta": self.max_delta })).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let q = QNetwork::from_checkpoint(&ck)?;
        let max_delta = ck.meta["extra"]["max_delta"].as_u64().ok_or_else(|| Error::Config("missing max_delta".into()))? as usize;
        if q.n_actions() != 2 * max_delta {
            return Err(Error::Config("action count disagrees with max_delta".into()));
        }
        Ok(Self { q, max_delta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{InteractionAudit, RealEnv};
    use crate::nn::gradient_check;
    use crate::scenario::{Scenario, ScenarioConfig};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    fn small_q(seed: u64) -> QNetwork {
        QNetwork::new(10, 16, &[12, 12], &mut rng(seed)).unwrap()
    }

    fn tr(beam: usize, pd: f64, delta: i32, reward: f64, next_beam: usize, next_pd: f64, done: bool) -> Transition {
        Transition {
            episode: 0,
            step: 1,
            state: MdpState { beam, pd, feedback: 0 },
            action: Action::new(delta, 5).unwrap(),
            reward_base: reward,
            reward_shaping: 0.0,
            next_state: MdpState { beam: next_beam, pd: next_pd, feedback: 1 },
            done,
        }
    }

    #[test]
    fn encoding_examples() {
        let v = encode_state(&MdpState { beam: 0, pd: 0.0, feedback: 0 }, 16).unwrap();
        assert_eq!(v.len(), 18);
        for pair in v[..16].chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        assert_eq!(&v[16..], [0.0, 0.0]);
        let all: Vec<Vec<f64>> = (0..64).map(|mu| encode_state(&MdpState { beam: mu, pd: 0.3, feedback: 1 }, 16).unwrap()).collect();
        for i in 0..64 {
            for j in i + 1..64 {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn dueling_identity() {
        let q = small_q(1);
        let states: Vec<MdpState> = (0..20).map(|k| MdpState { beam: k * 3, pd: k as f64 / 20.0, feedback: (k % 3) as i8 - 1 }).collect();
        let x = encode_batch(&states, 16).unwrap();
        let qv = q.q_values(&x).unwrap();
        let u = q.state_value(&x).unwrap();
        for (row, uu) in qv.rows().into_iter().zip(u) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((m - uu).abs() < 1e-10);
        }
    }

    #[test]
    fn q_network_gradients_match_finite_differences() {
        let mut q = small_q(2);
        let states: Vec<MdpState> = (0..6).map(|k| MdpState { beam: 7 * k + 1, pd: 0.1 * k as f64, feedback: 1 }).collect();
        let x = encode_batch(&states, 16).unwrap();
        let actions = [0, 3, 9, 4, 4, 7];
        let targets = [1.0, -0.5, 0.2, 2.0, 0.0, -1.0];
        let loss = |q: &mut QNetwork| {
            let out = q.forward(&x).unwrap();
            let (td, g1) = td_loss(&out, &actions, &targets).unwrap();
            let (c, g2) = cql_penalty(&out, &actions).unwrap();
            (td + 0.1 * c, g1 + g2 * 0.1)
        };
        let (_, dq) = loss(&mut q);
        let grads = q.backward(&dq).unwrap();
        let base = q.clone();
        let err = gradient_check(&base.params(), &grads, |p| {
            let mut n = base.clone();
            n.set_params(p).unwrap();
            loss(&mut n).0
        }, 1e-5, 1e-6);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn loss_examples() {
        let q = array![[0.0, 1.0]];
        let (l, _) = td_loss(&q, &[0], &[2.0]).unwrap();
        assert_eq!(l, 4.0);
        let (l, g) = td_loss(&q, &[1], &[1.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let flat = Array2::from_elem((3, 10), 0.7);
        let (p, _) = cql_penalty(&flat, &[0, 4, 9]).unwrap();
        assert_relative_eq!(p, std::f64::consts::LN_10, max_relative = 1e-12);
        let mut peaked = Array2::zeros((1, 10));
        peaked[[0, 2]] = 60.0;
        let (p, _) = cql_penalty(&peaked, &[2]).unwrap();
        assert!(p >= 0.0 && p < 1e-20);
    }

    #[test]
    fn cql_step_pushes_down_unseen_actions() {
        let mut q = small_q(3);
        let states: Vec<MdpState> = (0..16).map(|k| MdpState { beam: 4 * k, pd: 0.05, feedback: 0 }).collect();
        let x = encode_batch(&states, 16).unwrap();
        let data_action = 6;
        let gap = |q: &QNetwork| {
            let v = q.q_values(&x).unwrap();
            v.rows().into_iter().map(|r| r[data_action] - (r.sum() - r[data_action]) / 9.0).sum::<f64>()
        };
        let before = gap(&q);
        let out = q.forward(&x).unwrap();
        let (_, g) = cql_penalty(&out, &[data_action; 16]).unwrap();
        let grads = q.backward(&g).unwrap();
        let mut opt = Adam::new(q.param_count(), 1e-3, 0.9, 0.999);
        let mut p = q.params();
        opt.step(&mut p, &grads).unwrap();
        q.set_params(&p).unwrap();
        assert!(gap(&q) > before);
    }

    #[test]
    fn ddqn_target_examples() {
        let q = small_q(4);
        let other = small_q(5);
        let live = tr(3, 0.1, 2, -1.0, 5, 0.3, false);
        let term = tr(3, 0.1, 2, 5.0, 5, 0.95, true);
        let y = ddqn_targets(&[live, term], &q, &other, 0.0).unwrap();
        assert_eq!(y[0], -1.0);
        assert_eq!(y[1], 5.0);
        let y = ddqn_targets(&[term], &q, &other, 0.99).unwrap();
        assert_eq!(y[0], 5.0);
        // with q == q_target the target is the max-Q target
        let y = ddqn_targets(&[live], &q, &q, 0.99).unwrap();
        let qs = q.q_state(&live.next_state).unwrap();
        let m = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(y[0], -1.0 + 0.99 * m, max_relative = 1e-12);
    }

    #[test]
    fn action_selection() {
        let q = small_q(6);
        let mut r = rng(7);
        let s = MdpState { beam: 10, pd: 0.2, feedback: 0 };
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[select_action(&q, &s, 1.0, 5, &mut r).unwrap().index(5)] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        assert!(crate::special::gamma_q(4.5, chi2 / 2.0).unwrap() > 1e-3);
        let greedy = argmax(&q.q_state(&s).unwrap());
        for _ in 0..20 {
            assert_eq!(select_action(&q, &s, 0.0, 5, &mut r).unwrap().index(5), greedy);
        }
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epsilon(0), 0.2);
        assert_eq!(cfg.epsilon(1000), 0.0);
    }

    #[test]
    fn replay_is_fifo_and_bounded() {
        let mut buf = ReplayBuffer::new(3);
        for k in 0..5 {
            buf.push(tr(k, 0.0, 1, 0.0, k + 1, 0.0, false));
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.iter().map(|t| t.state.beam).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert!(ReplayBuffer::new(2).sample(1, &mut rng(0)).is_err());
    }

    #[test]
    fn target_network_syncs_on_schedule() {
        let cfg = TrainConfig { hidden: vec![8, 8], target_sync: 3, batch_size: 2, ..TrainConfig::default() };
        let mut agent = Agent::new(cfg, 5, &mut rng(8)).unwrap();
        for k in 0..10 {
            agent.replay.push(tr(k, 0.1, 1, -1.0, k + 1, 0.2, false));
        }
        let snapshot = agent.target.params();
        let mut r = rng(9);
        agent.gradient_step(&mut r).unwrap();
        agent.gradient_step(&mut r).unwrap();
        assert_eq!(agent.target.params(), snapshot);
        assert_ne!(agent.q.params(), snapshot);
        agent.gradient_step(&mut r).unwrap();
        assert_eq!(agent.target.params(), agent.q.params());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let env_cfg = ScenarioConfig::default();
            let mut env = RealEnv::new(Scenario::new(env_cfg).unwrap(), InteractionAudit::shared()).unwrap();
            let cfg = TrainConfig { hidden: vec![16, 16], episodes: 3, ..TrainConfig::default() };
            let mut r = rng(10);
            let mut agent = Agent::new(cfg, 5, &mut r).unwrap();
            for e in 0..3 {
                agent.train_episode(&mut env, e, &mut r).unwrap();
            }
            agent.q.params()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn policy_checkpoint_round_trip() {
        let agent = Agent::new(TrainConfig { hidden: vec![8, 8], ..TrainConfig::default() }, 5, &mut rng(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.btnn");
        agent.policy().save(&path).unwrap();
        let back = Policy::load(&path).unwrap();
        assert_eq!(back, agent.policy());
    }
}
