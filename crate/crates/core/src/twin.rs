//! Conditional-GAN digital twin of the P_D transition kernel, the environment
//! it drives, and distribution-fidelity metrics.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::VARIANT_SLOPE;
use crate::env::{make_transition, Action, BeamEnv, EnvKind, EpisodeCore, InteractionAudit, MdpParams, MdpState, Transition};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, sigmoid, Activation, Adam, Checkpoint, DenseNet, Mode};
use crate::scenario::SimRng;

/// Offset of the logarithmic P_D feature seen by the discriminator.
pub const LOG_FEATURE_EPS: f64 = 1e-6;
const D_FEATURES: usize = 2;

/// `u_t = [mu_{t+1}, mu_t, P_D^t, f_g^t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub next_beam: usize,
    pub beam: usize,
    pub pd: f64,
    pub feedback: i8,
}

impl Condition {
    pub fn from_transition(t: &Transition) -> Self {
        Self { next_beam: t.next_state.beam, beam: t.state.beam, pd: t.state.pd, feedback: t.state.feedback }
    }

    /// `[emb(mu_{t+1}), emb(mu_t), sigma_v(P_D^t), f_g^t]`, length `2I + 2`.
    pub fn encode(&self, embed_dim: usize) -> Result<Vec<f64>> {
        let mut v = nn::sinusoidal_embedding(self.next_beam, embed_dim)?;
        v.extend(nn::sinusoidal_embedding(self.beam, embed_dim)?);
        v.push(nn::variant_sigmoid(self.pd, VARIANT_SLOPE));
        v.push(f64::from(self.feedback));
        Ok(v)
    }
}

pub fn encode_conditions(conds: &[Condition], embed_dim: usize) -> Result<Array2<f64>> {
    let width = 2 * embed_dim + 2;
    let mut flat = Vec::with_capacity(conds.len() * width);
    for c in conds {
        flat.extend(c.encode(embed_dim)?);
    }
    Array2::from_shape_vec((conds.len(), width), flat).map_err(|e| invalid(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinConfig {
    pub epochs: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Virtual transitions generated per real transition when seeding replay.
    pub augment_factor: usize,
    pub generator_batch_norm: bool,
    /// Lower end of the generator range; samples lie in `[output_floor, 1]`.
    pub output_floor: f64,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            d_steps: 1,
            batch_size: 64,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            latent_dim: 16,
            hidden: vec![128, 128, 128],
            embed_dim: 16,
            augment_factor: 4,
            generator_batch_norm: false,
            output_floor: 1e-3,
        }
    }
}

impl TwinConfig {
    /// Defaults with the output floor at the scenario's false-alarm rate.
    pub fn for_false_alarm(p_fa: f64) -> Self {
        Self { output_floor: p_fa, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.d_steps == 0 || self.batch_size < 2 || self.latent_dim == 0 || self.hidden.is_empty() {
            return Err(Error::Config("twin epochs, d_steps, latent_dim and hidden must be positive, batch_size >= 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("twin lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.output_floor) {
            return Err(Error::Config("twin output_floor must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn cond_dim(&self) -> usize {
        2 * self.embed_dim + 2
    }
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub generator: Vec<f64>,
    pub discriminator: Vec<f64>,
}

/// `softplus(x) = ln(1 + e^x)`, stable for large `|x|`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Discriminator view of a P_D value: the value itself and a log-scaled
/// excess over `floor` that resolves the crowded low end.
fn d_features(x: f64, floor: f64) -> [f64; 2] {
    let lo = LOG_FEATURE_EPS.ln();
    let span = (1.0 - floor + LOG_FEATURE_EPS).ln() - lo;
    [x, (((x - floor).max(0.0) + LOG_FEATURE_EPS).ln() - lo) / span]
}

fn d_features_grad(x: f64, floor: f64) -> [f64; 2] {
    let lo = LOG_FEATURE_EPS.ln();
    let span = (1.0 - floor + LOG_FEATURE_EPS).ln() - lo;
    let excess = x - floor;
    [1.0, if excess < 0.0 { 0.0 } else { 1.0 / ((excess + LOG_FEATURE_EPS) * span) }]
}

/// Generator, discriminator and training record.
#[derive(Debug, Clone)]
pub struct TwinModel {
    pub generator: DenseNet,
    pub discriminator: DenseNet,
    pub config: TwinConfig,
    pub history: LossHistory,
    trained: bool,
}

impl TwinModel {
    pub fn new(config: TwinConfig, rng: &mut SimRng) -> Result<Self> {
        config.validate()?;
        let g_specs = nn::mlp(config.cond_dim() + config.latent_dim, &config.hidden, 1, Activation::Relu, Activation::Sigmoid, config.generator_batch_norm);
        let d_specs = nn::mlp(D_FEATURES + config.cond_dim(), &config.hidden, 1, Activation::Relu, Activation::Linear, false);
        Ok(Self {
            generator: DenseNet::new(&g_specs, rng)?,
            discriminator: DenseNet::new(&d_specs, rng)?,
            config,
            history: LossHistory::default(),
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn latent(&self, rows: usize, rng: &mut SimRng) -> Array2<f64> {
        Array2::from_shape_fn((rows, self.config.latent_dim), |_| rng.sample(StandardNormal))
    }

    fn g_input(cond: &Array2<f64>, z: &Array2<f64>) -> Result<Array2<f64>> {
        ndarray::concatenate(Axis(1), &[cond.view(), z.view()]).map_err(|e| invalid(e.to_string()))
    }

    fn d_input(&self, x: &[f64], cond: &Array2<f64>) -> Result<Array2<f64>> {
        let mut feats = Array2::zeros((x.len(), D_FEATURES));
        for (mut row, &v) in feats.rows_mut().into_iter().zip(x) {
            let f = d_features(v, self.config.output_floor);
            row[0] = f[0];
            row[1] = f[1];
        }
        ndarray::concatenate(Axis(1), &[feats.view(), cond.view()]).map_err(|e| invalid(e.to_string()))
    }

    /// Maps the generator's sigmoid output onto `[output_floor, 1]`.
    fn rescale(&self, s: f64) -> f64 {
        let f = self.config.output_floor;
        f + (1.0 - f) * s
    }

    /// Eval-mode generator output for encoded conditions and latents, clamped to `[0, 1]`.
    pub fn generate(&self, cond: &Array2<f64>, z: &Array2<f64>) -> Result<Vec<f64>> {
        let out = self.generator.infer(&Self::g_input(cond, z)?)?;
        Ok(out.column(0).iter().map(|&v| self.rescale(v).clamp(0.0, 1.0)).collect())
    }

    /// `D(x | u)` in `(0, 1)`.
    pub fn discriminate(&self, x: &[f64], cond: &Array2<f64>) -> Result<Vec<f64>> {
        let logits = self.discriminator.infer(&self.d_input(x, cond)?)?;
        Ok(logits.column(0).iter().map(|&l| sigmoid(l)).collect())
    }

    pub fn sample_transition(&self, cond: &Condition, rng: &mut SimRng) -> Result<f64> {
        Ok(self.sample_batch(std::slice::from_ref(cond), rng)?[0])
    }

    pub fn sample_batch(&self, conds: &[Condition], rng: &mut SimRng) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        if conds.is_empty() {
            return Ok(Vec::new());
        }
        let c = encode_conditions(conds, self.config.embed_dim)?;
        let z = self.latent(conds.len(), rng);
        self.generate(&c, &z)
    }

    /// Discriminator loss `-ln D(real) - ln(1 - D(fake))` (batch means) and its parameter gradients.
    pub fn discriminator_loss(&mut self, real: &[f64], fake: &[f64], cond_real: &Array2<f64>, cond_fake: &Array2<f64>) -> Result<(f64, Vec<f64>)> {
        let (nr, nf) = (real.len() as f64, fake.len() as f64);
        let xr = self.d_input(real, cond_real)?;
        let xf = self.d_input(fake, cond_fake)?;
        let x = ndarray::concatenate(Axis(0), &[xr.view(), xf.view()]).map_err(|e| invalid(e.to_string()))?;
        let logits = self.discriminator.forward(&x, Mode::Train)?;
        let mut loss = 0.0;
        let mut g = Array2::zeros(logits.dim());
        for (i, &l) in logits.column(0).iter().enumerate() {
            if i < real.len() {
                loss += softplus(-l) / nr;
                g[[i, 0]] = (sigmoid(l) - 1.0) / nr;
            } else {
                loss += softplus(l) / nf;
                g[[i, 0]] = sigmoid(l) / nf;
            }
        }
        let (grads, _) = self.discriminator.backward(&g)?;
        Ok((loss, grads))
    }

    /// Non-saturating generator loss `-ln D(G(z | u))` and generator gradients.
    pub fn generator_loss(&mut self, cond: &Array2<f64>, z: &Array2<f64>) -> Result<(f64, Vec<f64>)> {
        let out = self.generator.forward(&Self::g_input(cond, z)?, Mode::Train)?;
        let x: Vec<f64> = out.column(0).iter().map(|&v| self.rescale(v)).collect();
        let logits = self.discriminator.forward(&self.d_input(&x, cond)?, Mode::Train)?;
        let n = x.len() as f64;
        let mut loss = 0.0;
        let mut g = Array2::zeros(logits.dim());
        for (i, &l) in logits.column(0).iter().enumerate() {
            loss += softplus(-l) / n;
            g[[i, 0]] = (sigmoid(l) - 1.0) / n;
        }
        let (_, d_in) = self.discriminator.backward(&g)?;
        self.discriminator.clear_cache();
        let mut dx = Array2::zeros((x.len(), 1));
        for (i, &v) in x.iter().enumerate() {
            let fg = d_features_grad(v, self.config.output_floor);
            dx[[i, 0]] = (d_in[[i, 0]] * fg[0] + d_in[[i, 1]] * fg[1]) * (1.0 - self.config.output_floor);
        }
        let (grads, _) = self.generator.backward(&dx)?;
        Ok((loss, grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "twin".into(),
            nets: vec![("generator".into(), self.generator.clone()), ("discriminator".into(), self.discriminator.clone())],
            meta: serde_json::json!({ "config": self.config, "history": self.history, "trained": self.trained }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "twin" {
            return Err(Error::Config(format!("expected a twin checkpoint, found {}", ck.kind)));
        }
        let config: TwinConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let history: LossHistory = serde_json::from_value(ck.meta["history"].clone())?;
        let generator = ck.net("generator")?.clone();
        let discriminator = ck.net("discriminator")?.clone();
        if generator.inputs() != config.cond_dim() + config.latent_dim || discriminator.inputs() != D_FEATURES + config.cond_dim() {
            return Err(Error::Config("twin checkpoint layer sizes disagree with its config".into()));
        }
        Ok(Self { generator, discriminator, config, history, trained: ck.meta["trained"].as_bool().unwrap_or(false) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Adversarial training on logged transitions: per minibatch, `d_steps`
/// discriminator updates then one generator update.
pub fn train_twin(data: &[Transition], config: TwinConfig, rng: &mut SimRng) -> Result<TwinModel> {
    if data.is_empty() {
        return Err(Error::Empty("twin training dataset"));
    }
    let mut model = TwinModel::new(config, rng)?;
    let cfg = model.config.clone();
    let conds: Vec<Condition> = data.iter().map(Condition::from_transition).collect();
    let all_cond = encode_conditions(&conds, cfg.embed_dim)?;
    let all_pd: Vec<f64> = data.iter().map(|t| t.next_state.pd).collect();
    let mut g_opt = Adam::new(model.generator.param_count(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut d_opt = Adam::new(model.discriminator.param_count(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.min(data.len().max(2));

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut g_sum, mut d_sum, mut n_batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let cond = all_cond.select(Axis(0), chunk);
            let real: Vec<f64> = chunk.iter().map(|&i| all_pd[i]).collect();
            let mut d_loss = 0.0;
            for _ in 0..cfg.d_steps {
                let z = model.latent(chunk.len(), rng);
                let fake_out = model.generator.forward(&TwinModel::g_input(&cond, &z)?, Mode::Train)?;
                model.generator.clear_cache();
                let fake: Vec<f64> = fake_out.column(0).iter().map(|&v| model.rescale(v)).collect();
                let (l, grads) = model.discriminator_loss(&real, &fake, &cond, &cond)?;
                d_opt.apply(&mut model.discriminator, &grads)?;
                d_loss += l / cfg.d_steps as f64;
            }
            let z = model.latent(chunk.len(), rng);
            let (g_loss, grads) = model.generator_loss(&cond, &z)?;
            g_opt.apply(&mut model.generator, &grads)?;
            if !g_loss.is_finite() || !d_loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}: generator loss {g_loss}, discriminator loss {d_loss}")));
            }
            g_sum += g_loss;
            d_sum += d_loss;
            n_batches += 1;
        }
        let k = n_batches.max(1) as f64;
        model.history.generator.push(g_sum / k);
        model.history.discriminator.push(d_sum / k);
        log::debug!("twin epoch {epoch}: G {:.4} D {:.4}", g_sum / k, d_sum / k);
    }
    if !model.generator.is_finite() || !model.discriminator.is_finite() {
        return Err(Error::Diverged("non-finite twin parameters after training".into()));
    }
    model.trained = true;
    Ok(model)
}

/// Initial P_D values observed per beam in the logged data.
#[derive(Debug, Clone, Default)]
pub struct StartPool {
    by_beam: HashMap<usize, Vec<f64>>,
    all: Vec<f64>,
}

impl StartPool {
    pub fn from_transitions(data: &[Transition]) -> Self {
        let mut by_beam: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut all = Vec::with_capacity(2 * data.len());
        for t in data {
            for s in [t.state, t.next_state] {
                by_beam.entry(s.beam).or_default().push(s.pd);
                all.push(s.pd);
            }
        }
        Self { by_beam, all }
    }

    pub fn draw(&self, beam: usize, rng: &mut SimRng) -> Result<f64> {
        let pool = self.by_beam.get(&beam).filter(|v| !v.is_empty()).unwrap_or(&self.all);
        if pool.is_empty() {
            return Err(Error::Empty("start pool"));
        }
        Ok(pool[rng.random_range(0..pool.len())])
    }
}

/// Environment whose P_D transitions come from the generator.
#[derive(Debug, Clone)]
pub struct TwinEnv {
    twin: Arc<TwinModel>,
    core: EpisodeCore,
    starts: StartPool,
    audit: Arc<InteractionAudit>,
}

impl TwinEnv {
    pub fn new(twin: Arc<TwinModel>, params: MdpParams, antennas: usize, data: &[Transition], audit: Arc<InteractionAudit>) -> Result<Self> {
        if !twin.is_trained() {
            return Err(Error::Untrained);
        }
        Ok(Self { twin, core: EpisodeCore::new(params, antennas)?, starts: StartPool::from_transitions(data), audit })
    }

    /// Test hook: start an episode at a chosen state.
    pub fn begin_at(&mut self, beam: usize, pd: f64) -> MdpState {
        self.core.begin(beam, pd)
    }
}

impl BeamEnv for TwinEnv {
    fn reset(&mut self, rng: &mut SimRng) -> Result<MdpState> {
        let beam = rng.random_range(0..self.core.antennas());
        let pd = self.starts.draw(beam, rng)?;
        self.audit.record_twin_reset();
        Ok(self.core.begin(beam, pd))
    }

    fn step(&mut self, action: Action, rng: &mut SimRng) -> Result<(Transition, bool)> {
        let next_beam = self.core.next_beam(action)?;
        let s = self.core.state().expect("active episode");
        let cond = Condition { next_beam, beam: s.beam, pd: s.pd, feedback: s.feedback };
        let pd = self.twin.sample_transition(&cond, rng)?;
        self.audit.record_twin_step();
        let t = self.core.commit(action, pd)?;
        Ok((t, t.done))
    }

    fn params(&self) -> &MdpParams {
        self.core.params()
    }

    fn antennas(&self) -> usize {
        self.core.antennas()
    }

    fn kind(&self) -> EnvKind {
        EnvKind::Twin
    }
}

/// Synthetic one-step transitions from logged states under random actions,
/// with next P_D drawn from the twin.
pub fn virtual_transitions(
    twin: &TwinModel,
    data: &[Transition],
    count: usize,
    params: &MdpParams,
    antennas: usize,
    audit: &InteractionAudit,
    rng: &mut SimRng,
) -> Result<Vec<Transition>> {
    if data.is_empty() {
        return Err(Error::Empty("logged transitions"));
    }
    let mut starts = Vec::with_capacity(count);
    let mut actions = Vec::with_capacity(count);
    let mut conds = Vec::with_capacity(count);
    for _ in 0..count {
        let t = &data[rng.random_range(0..data.len())];
        let s = if rng.random::<bool>() || t.done { t.state } else { t.next_state };
        let a = Action::random(params.max_delta, rng);
        let next_beam = crate::env::apply_action(s.beam, a.delta(), antennas)?;
        conds.push(Condition { next_beam, beam: s.beam, pd: s.pd, feedback: s.feedback });
        starts.push(s);
        actions.push(a);
    }
    let mut out = Vec::with_capacity(count);
    for (k, chunk) in conds.chunks(1024).enumerate() {
        let pds = twin.sample_batch(chunk, rng)?;
        for (j, pd) in pds.into_iter().enumerate() {
            let i = k * 1024 + j;
            out.push(make_transition(starts[i], actions[i], pd, params, antennas, u64::MAX, 1)?);
            audit.record_twin_step();
        }
    }
    Ok(out)
}

pub const KL_BINS: usize = 50;

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample value".into()));
    }
    Ok(())
}

/// Add-one-smoothed histogram on `[0, 1]`.
pub fn histogram(samples: &[f64], bins: usize) -> Vec<f64> {
    let mut counts = vec![1.0; bins];
    for &v in samples {
        let k = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[k] += 1.0;
    }
    let total = (samples.len() + bins) as f64;
    counts.iter().map(|c| c / total).collect()
}

/// `sum p_hat ln(p_hat / p)` over matching bins.
pub fn kl_discrete(p_hat: &[f64], p: &[f64]) -> Result<f64> {
    if p_hat.len() != p.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: p_hat.len() });
    }
    Ok(p_hat.iter().zip(p).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum())
}

/// KL of the twin histogram against the real one, `E_twin[ln(twin / real)]`.
pub fn kl_divergence(real: &[f64], twin: &[f64]) -> Result<f64> {
    check_samples(real, twin)?;
    Ok(kl_discrete(&histogram(twin, KL_BINS), &histogram(real, KL_BINS))?.max(0.0))
}

/// Exact 1-D Wasserstein-1 distance, the area between empirical CDFs.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    check_samples(a, b)?;
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = xs[0].min(ys[0]);
    let mut area = 0.0;
    while i < xs.len() || j < ys.len() {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        area += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < xs.len() && xs[i] == next {
            i += 1;
        }
        while j < ys.len() && ys[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(area)
}

/// Median of pairwise absolute differences of the pooled sample.
pub fn median_bandwidth(a: &[f64], b: &[f64]) -> f64 {
    const MAX_POOL: usize = 3000;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let stride = pooled.len().div_ceil(MAX_POOL).max(1);
    let pool: Vec<f64> = pooled.iter().step_by(stride).copied().collect();
    let mut d = Vec::with_capacity(pool.len() * pool.len().saturating_sub(1) / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            d.push((pool[i] - pool[j]).abs());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    *d.select_nth_unstable_by(mid, f64::total_cmp).1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// `max(MMD^2_u, 0)`, the reported discrepancy.
    pub value: f64,
    /// Raw unbiased estimate; slightly negative when the sets agree.
    pub squared: f64,
    pub bandwidth: f64,
}

impl MmdEstimate {
    /// `sqrt(value)`, the RKHS mean-embedding distance itself.
    pub fn root(&self) -> f64 {
        self.value.sqrt()
    }
}

/// Unbiased Gaussian-kernel MMD at the given bandwidth.
pub fn mmd_with_bandwidth(a: &[f64], b: &[f64], bandwidth: f64) -> Result<MmdEstimate> {
    check_samples(a, b)?;
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("unbiased MMD needs at least two samples per set"));
    }
    if !(bandwidth > 0.0) {
        return Err(invalid(format!("MMD bandwidth must be positive, got {bandwidth}")));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: f64, y: f64| (-(x - y).powi(2) * inv).exp();
    let within = |s: &[f64]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += k(s[i], s[j]);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for &x in a {
        for &y in b {
            cross += k(x, y);
        }
    }
    cross /= (a.len() * b.len()) as f64;
    let sq = within(a) + within(b) - 2.0 * cross;
    Ok(MmdEstimate { value: sq.max(0.0), squared: sq, bandwidth })
}

/// MMD at the median-heuristic bandwidth.
pub fn mmd(a: &[f64], b: &[f64]) -> Result<MmdEstimate> {
    check_samples(a, b)?;
    let h = median_bandwidth(a, b);
    if h > 0.0 {
        mmd_with_bandwidth(a, b, h)
    } else if a.iter().chain(b).all(|&v| v == a[0]) {
        Ok(MmdEstimate { value: 0.0, squared: 0.0, bandwidth: 0.0 })
    } else {
        // more than half the pairs coincide; fall back to the spread of the pooled sample
        let (lo, hi) = a.iter().chain(b).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        mmd_with_bandwidth(a, b, hi - lo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: String,
    pub samples: usize,
    pub kl: f64,
    pub wasserstein1: f64,
    pub mmd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub kl: f64,
    pub wasserstein1: f64,
    pub mmd: f64,
    pub mmd_bandwidth: f64,
    pub buckets: Vec<BucketReport>,
}

pub fn fidelity_metrics(real: &[f64], twin: &[f64]) -> Result<FidelityReport> {
    let m = mmd(real, twin)?;
    Ok(FidelityReport {
        kl: kl_divergence(real, twin)?,
        wasserstein1: wasserstein1(real, twin)?,
        mmd: m.value,
        mmd_bandwidth: m.bandwidth,
        buckets: Vec::new(),
    })
}

/// Compares real next-P_D values of held-out transitions against twin samples
/// drawn under the same conditions, overall and per current-P_D bucket.
pub fn evaluate_twin(twin: &TwinModel, held_out: &[Transition], rng: &mut SimRng) -> Result<FidelityReport> {
    let conds: Vec<Condition> = held_out.iter().map(Condition::from_transition).collect();
    let real: Vec<f64> = held_out.iter().map(|t| t.next_state.pd).collect();
    let fake = twin.sample_batch(&conds, rng)?;
    let mut report = fidelity_metrics(&real, &fake)?;
    let buckets: [(&str, fn(f64) -> bool); 3] =
        [("pd_t<0.1", |p| p < 0.1), ("0.1<=pd_t<0.9", |p| (0.1..0.9).contains(&p)), ("pd_t>=0.9", |p| p >= 0.9)];
    for (name, pick) in buckets {
        let idx: Vec<usize> = (0..held_out.len()).filter(|&i| pick(held_out[i].state.pd)).collect();
        if idx.len() < 2 {
            continue;
        }
        let r: Vec<f64> = idx.iter().map(|&i| real[i]).collect();
        let f: Vec<f64> = idx.iter().map(|&i| fake[i]).collect();
        let m = fidelity_metrics(&r, &f)?;
        report.buckets.push(BucketReport { bucket: name.into(), samples: idx.len(), kl: m.kl, wasserstein1: m.wasserstein1, mmd: m.mmd });
    }
    Ok(report)
}

/// Mean generator and discriminator losses over the last `last` epochs.
pub fn tail_means(history: &LossHistory, last: usize) -> (f64, f64) {
    let mean = |v: &[f64]| {
        let s = &v[v.len().saturating_sub(last.max(1))..];
        if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 }
    };
    (mean(&history.generator), mean(&history.discriminator))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_random, RealEnv};
    use crate::nn::gradient_check;
    use crate::scenario::{Scenario, ScenarioConfig};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    fn tiny_config() -> TwinConfig {
        TwinConfig { hidden: vec![10, 10], epochs: 2, batch_size: 8, ..TwinConfig::default() }
    }

    fn small_data(episodes: usize, seed: u64) -> Vec<Transition> {
        let mut env = RealEnv::new(Scenario::new(ScenarioConfig::default()).unwrap(), InteractionAudit::shared()).unwrap();
        collect_random(&mut env, episodes, &mut rng(seed)).unwrap()
    }

    #[test]
    fn condition_encoding_length() {
        let c = Condition { next_beam: 3, beam: 1, pd: 0.2, feedback: -1 };
        assert_eq!(c.encode(16).unwrap().len(), 34);
    }

    #[test]
    fn metric_examples() {
        assert_relative_eq!(kl_discrete(&[0.5, 0.5], &[0.25, 0.75]).unwrap(), 0.143_841_036_225_890_42, max_relative = 1e-12);
        assert_relative_eq!(wasserstein1(&[0.0; 5], &[1.0; 7]).unwrap(), 1.0);
        let xs: Vec<f64> = (0..300).map(|k| (k as f64 * 0.618).fract()).collect();
        assert_eq!(kl_divergence(&xs, &xs).unwrap(), 0.0);
        assert_eq!(wasserstein1(&xs, &xs).unwrap(), 0.0);
        assert!(mmd(&xs, &xs).unwrap().value < 1e-3);
        assert!(mmd(&xs, &xs.iter().map(|v| v * 0.5).collect::<Vec<_>>()).unwrap().value > 0.01);
        assert!(kl_divergence(&[], &xs).is_err());
    }

    #[test]
    fn wasserstein_matches_brute_force_coupling() {
        // equal-size sets: the optimal coupling is a permutation
        let mut r = rng(1);
        for n in 1..=6usize {
            let a: Vec<f64> = (0..n).map(|_| r.random()).collect();
            let b: Vec<f64> = (0..n).map(|_| r.random()).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                let c: f64 = p.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).abs()).sum::<f64>() / n as f64;
                best = best.min(c);
            });
            assert_relative_eq!(wasserstein1(&a, &b).unwrap(), best, max_relative = 1e-12);
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn untrained_twin_refuses_to_sample() {
        let m = TwinModel::new(tiny_config(), &mut rng(0)).unwrap();
        let c = Condition { next_beam: 1, beam: 0, pd: 0.0, feedback: 0 };
        assert!(matches!(m.sample_transition(&c, &mut rng(1)), Err(Error::Untrained)));
        assert!(train_twin(&[], tiny_config(), &mut rng(0)).is_err());
    }

    #[test]
    fn twin_gradients_match_finite_differences() {
        let mut m = TwinModel::new(tiny_config(), &mut rng(2)).unwrap();
        let conds: Vec<Condition> = (0..5).map(|k| Condition { next_beam: 3 * k, beam: 2 * k, pd: 0.1 * k as f64, feedback: 1 }).collect();
        let c = encode_conditions(&conds, 16).unwrap();
        let z = m.latent(5, &mut rng(3));
        let (_, g) = m.generator_loss(&c, &z).unwrap();
        let base = m.clone();
        let err_g = gradient_check(&base.generator.params(), &g, |p| {
            let mut mm = base.clone();
            mm.generator.set_params(p).unwrap();
            mm.generator_loss(&c, &z).unwrap().0
        }, 1e-5, 1e-6);
        assert!(err_g < 1e-4, "generator {err_g}");

        let real = [0.01, 0.5, 0.93, 0.2, 0.001];
        let fake = [0.3, 0.7, 0.05, 0.99, 0.4];
        let (_, g) = m.discriminator_loss(&real, &fake, &c, &c).unwrap();
        let err_d = gradient_check(&base.discriminator.params(), &g, |p| {
            let mut mm = base.clone();
            mm.discriminator.set_params(p).unwrap();
            mm.discriminator_loss(&real, &fake, &c, &c).unwrap().0
        }, 1e-5, 1e-6);
        assert!(err_d < 1e-4, "discriminator {err_d}");
    }

    #[test]
    fn discriminator_separates_disjoint_supports() {
        let mut m = TwinModel::new(TwinConfig { hidden: vec![16, 16], ..TwinConfig::default() }, &mut rng(4)).unwrap();
        let mut r = rng(5);
        let mut opt = Adam::new(m.discriminator.param_count(), 2e-3, 0.5, 0.999);
        let cond_of = |r: &mut SimRng| {
            let cs: Vec<Condition> = (0..32).map(|_| Condition { next_beam: r.random_range(0..64), beam: r.random_range(0..64), pd: r.random(), feedback: 0 }).collect();
            encode_conditions(&cs, 16).unwrap()
        };
        for _ in 0..300 {
            let c = cond_of(&mut r);
            let real: Vec<f64> = (0..32).map(|_| r.random_range(0.6..1.0)).collect();
            let fake: Vec<f64> = (0..32).map(|_| r.random_range(0.0..0.4)).collect();
            let (_, g) = m.discriminator_loss(&real, &fake, &c, &c).unwrap();
            opt.apply(&mut m.discriminator, &g).unwrap();
        }
        let c = cond_of(&mut r);
        let real: Vec<f64> = (0..32).map(|_| r.random_range(0.6..1.0)).collect();
        let fake: Vec<f64> = (0..32).map(|_| r.random_range(0.0..0.4)).collect();
        let correct = m.discriminate(&real, &c).unwrap().iter().filter(|&&p| p > 0.5).count()
            + m.discriminate(&fake, &c).unwrap().iter().filter(|&&p| p < 0.5).count();
        assert!(correct as f64 / 64.0 > 0.95, "accuracy {}", correct as f64 / 64.0);
    }

    #[test]
    fn sampling_contract_and_determinism() {
        let data = small_data(4, 6);
        let m = train_twin(&data, tiny_config(), &mut rng(7)).unwrap();
        assert_eq!(m.history.generator.len(), 2);
        let conds: Vec<Condition> = data.iter().map(Condition::from_transition).collect();
        let out = m.sample_batch(&conds, &mut rng(8)).unwrap();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out, m.sample_batch(&conds, &mut rng(8)).unwrap());
        let again = train_twin(&data, tiny_config(), &mut rng(7)).unwrap();
        assert_eq!(again.generator, m.generator);
    }

    #[test]
    fn twin_env_counts_only_twin_calls() {
        let data = small_data(4, 9);
        let twin = Arc::new(train_twin(&data, tiny_config(), &mut rng(10)).unwrap());
        let audit = InteractionAudit::shared();
        let mut env = TwinEnv::new(twin.clone(), MdpParams::default(), 64, &data, audit.clone()).unwrap();
        let ts = collect_random(&mut env, 3, &mut rng(11)).unwrap();
        let c = audit.counts();
        assert_eq!(c.real_sensing_calls(), 0);
        assert_eq!(c.twin_calls, ts.len() as u64);
        assert_eq!(c.twin_resets, 3);
        let v = virtual_transitions(&twin, &data, 50, &MdpParams::default(), 64, &audit, &mut rng(12)).unwrap();
        assert_eq!(v.len(), 50);
        assert_eq!(audit.counts().twin_calls, ts.len() as u64 + 50);
    }

    #[test]
    fn twin_checkpoint_round_trip() {
        let data = small_data(2, 13);
        let m = train_twin(&data, tiny_config(), &mut rng(14)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("twin.btnn");
        m.save(&path).unwrap();
        let back = TwinModel::load(&path).unwrap();
        assert_eq!(back.generator, m.generator);
        assert_eq!(back.history, m.history);
        assert!(back.is_trained());
    }
}
