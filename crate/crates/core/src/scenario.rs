//! Geometry, DFT codebook, large-scale fading and target motion.
//!
//! All arrays are ULAs whose broadside points at the area center. Angles are
//! measured from broadside, so the steering phase uses the projection of the
//! unit direction onto the array axis. Targets behind an array fold onto the
//! front half-plane, as they do for a real ULA.

use std::f64::consts::{FRAC_PI_8, PI, TAU};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::detect::{self, DetectionSetup};
use crate::error::{invalid, Error, Result};
use crate::par;

pub type SimRng = rand_chacha::ChaCha8Rng;

pub type Point = [f64; 2];

/// How the target is placed at the start of each episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetReset {
    /// Back to `target_start` with a fresh speed and heading.
    #[default]
    Fixed,
    /// Uniformly anywhere in the area.
    Uniform,
}

/// Reflection-coefficient model used for P_D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RcsMode {
    /// `|alpha|^2 = rcs_var` (deterministic P_D for a given geometry).
    #[default]
    MeanPower,
    /// `alpha ~ CN(0, rcs_var)` redrawn on every observation.
    Sampled,
}

/// Scenario file contents. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub area_m: f64,
    pub ap_tx: Point,
    pub ap_rx: Vec<Point>,
    pub antennas: usize,
    pub tx_power_dbmw: f64,
    pub noise_power_w: f64,
    pub rcs_var: f64,
    pub pathloss_ref: f64,
    pub pathloss_exponent: f64,
    pub shadowing_db: f64,
    pub p_fa: f64,
    pub zeta: f64,
    /// Upper bound of the per-episode speed draw.
    pub target_speed_mps: f64,
    pub seed: u64,
    pub target_start: Point,
    pub target_reset: TargetReset,
    pub step_interval_s: f64,
    pub rcs_mode: RcsMode,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            area_m: 400.0,
            ap_tx: [250.0, 250.0],
            ap_rx: vec![[100.0, 100.0], [100.0, 400.0], [400.0, 100.0], [400.0, 400.0]],
            antennas: 64,
            tx_power_dbmw: 20.0,
            noise_power_w: 4e-14,
            rcs_var: 1.0,
            pathloss_ref: 3.7e-9,
            pathloss_exponent: 2.0,
            shadowing_db: 0.0,
            p_fa: 1e-3,
            zeta: 0.9,
            target_speed_mps: 5.0,
            seed: 2024,
            target_start: [300.0, 150.0],
            target_reset: TargetReset::Fixed,
            step_interval_s: 0.1,
            rcs_mode: RcsMode::MeanPower,
        }
    }
}

impl ScenarioConfig {
    /// Reads a TOML or JSON scenario file, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.area_m > 0.0) {
            return bad("area_m must be positive");
        }
        if self.antennas < 2 {
            return bad("antennas must be >= 2");
        }
        if self.ap_rx.is_empty() {
            return bad("need at least one receive AP");
        }
        let mut all = vec![self.ap_tx];
        all.extend(&self.ap_rx);
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                if a == b {
                    return bad("AP positions must be distinct");
                }
            }
        }
        if !(self.noise_power_w > 0.0 && self.rcs_var > 0.0 && self.pathloss_ref > 0.0 && self.pathloss_exponent > 0.0) {
            return bad("noise_power_w, rcs_var, pathloss_ref and pathloss_exponent must be positive");
        }
        if !(self.shadowing_db >= 0.0) {
            return bad("shadowing_db must be >= 0");
        }
        if !(self.p_fa > 0.0 && self.p_fa < 1.0) {
            return bad("p_fa must lie in (0, 1)");
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return bad("zeta must lie in (0, 1)");
        }
        if !(self.target_speed_mps >= 0.0 && self.step_interval_s > 0.0) {
            return bad("target_speed_mps must be >= 0 and step_interval_s > 0");
        }
        if !inside(self.target_start, self.area_m) {
            return bad("target_start must lie inside the area");
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a digest of the serialized config.
    pub fn digest(&self) -> u64 {
        let text = serde_json::to_string(self).expect("scenario config serializes");
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
    }
}

fn inside(p: Point, area: f64) -> bool {
    (0.0..=area).contains(&p[0]) && (0.0..=area).contains(&p[1])
}

fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// One transmit and `N` receive ULAs with `M` antennas each.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    pub antennas: usize,
    pub tx: Point,
    pub rx: Vec<Point>,
    pub center: Point,
}

impl ArrayGeometry {
    pub fn new(antennas: usize, tx: Point, rx: Vec<Point>, center: Point) -> Result<Self> {
        if antennas < 2 {
            return Err(invalid("antennas must be >= 2"));
        }
        Ok(Self { antennas, tx, rx, center })
    }

    pub fn receivers(&self) -> usize {
        self.rx.len()
    }

    /// Sine of the angle between broadside of the array at `ap` and the
    /// direction to `target`.
    pub fn sine_from_broadside(&self, ap: Point, target: Point) -> f64 {
        let (mut nx, mut ny) = (self.center[0] - ap[0], self.center[1] - ap[1]);
        let nn = (nx * nx + ny * ny).sqrt();
        if nn == 0.0 {
            (nx, ny) = (1.0, 0.0);
        } else {
            (nx, ny) = (nx / nn, ny / nn);
        }
        // array axis: broadside rotated by +90 degrees
        let (ax, ay) = (-ny, nx);
        let (ux, uy) = (target[0] - ap[0], target[1] - ap[1]);
        let d = (ux * ux + uy * uy).sqrt();
        if d == 0.0 {
            return 0.0;
        }
        ((ux * ax + uy * ay) / d).clamp(-1.0, 1.0)
    }

    pub fn angle_from_broadside(&self, ap: Point, target: Point) -> f64 {
        self.sine_from_broadside(ap, target).asin()
    }
}

/// ULA response `[exp(j m pi sin(angle))]_{m=0..M-1}`.
pub fn steering_vector(angle: f64, antennas: usize) -> Vec<Complex64> {
    steering_from_sine(angle.sin(), antennas)
}

pub fn steering_from_sine(sine: f64, antennas: usize) -> Vec<Complex64> {
    (0..antennas).map(|m| Complex64::from_polar(1.0, m as f64 * PI * sine)).collect()
}

/// Column `index` of the normalized DFT codebook: `exp(-j 2 pi m index / M) / sqrt(M)`.
pub fn dft_codeword(index: usize, antennas: usize) -> Result<Vec<Complex64>> {
    if index >= antennas {
        return Err(invalid(format!("beam index {index} out of range 0..{antennas}")));
    }
    let scale = 1.0 / (antennas as f64).sqrt();
    Ok((0..antennas)
        .map(|m| Complex64::from_polar(scale, -TAU * (m * index % antennas) as f64 / antennas as f64))
        .collect())
}

/// Sine of the direction codeword `index` steers to: `2 index / M`, wrapped into `[-1, 1)`.
pub fn design_sine(index: usize, antennas: usize) -> f64 {
    let s = 2.0 * index as f64 / antennas as f64;
    if s >= 1.0 { s - 2.0 } else { s }
}

/// The `M x M` DFT codebook, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    columns: Vec<Vec<Complex64>>,
}

impl Codebook {
    pub fn dft(antennas: usize) -> Self {
        let columns = (0..antennas).map(|i| dft_codeword(i, antennas).expect("index in range")).collect();
        Self { columns }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, index: usize) -> Result<&[Complex64]> {
        self.columns
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid(format!("beam index {index} out of range 0..{}", self.columns.len())))
    }

    /// `|a(phi)^T w|^2` for the direction with the given sine.
    pub fn gain(&self, index: usize, sine: f64) -> Result<f64> {
        let w = self.column(index)?;
        let a = steering_from_sine(sine, w.len());
        Ok(a.iter().zip(w).map(|(x, y)| x * y).sum::<Complex64>().norm_sqr())
    }

    /// Largest deviation of `W^H W` from the identity.
    pub fn unitarity_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.columns.iter().enumerate() {
            for (j, b) in self.columns.iter().enumerate() {
                let v = detect::inner(a, b);
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - Complex64::new(target, 0.0)).norm());
            }
        }
        worst
    }
}

/// Large-scale channel parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    /// Linear transmit power; the path-loss reference is calibrated for mW.
    pub tx_power: f64,
    pub noise_power: f64,
    pub rcs_variance: f64,
    pub pathloss_ref: f64,
    pub pathloss_exponent: f64,
    pub shadowing_sigma_db: f64,
}

impl ChannelParams {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            tx_power: dbm_to_linear(cfg.tx_power_dbmw),
            noise_power: cfg.noise_power_w,
            rcs_variance: cfg.rcs_var,
            pathloss_ref: cfg.pathloss_ref,
            pathloss_exponent: cfg.pathloss_exponent,
            shadowing_sigma_db: cfg.shadowing_db,
        }
    }
}

pub fn dbm_to_linear(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// Two-leg large-scale fading `beta_ref / (d_tx^e d_rx^e)`, times log-normal
/// shadowing when enabled.
pub fn pathloss(d_tx: f64, d_rx: f64, params: &ChannelParams, rng: &mut SimRng) -> Result<f64> {
    if !(d_tx > 0.0 && d_rx > 0.0) {
        return Err(invalid(format!("path-loss distances must be positive (d_tx={d_tx}, d_rx={d_rx})")));
    }
    let e = params.pathloss_exponent;
    let mut beta = params.pathloss_ref / (d_tx.powf(e) * d_rx.powf(e));
    if params.shadowing_sigma_db > 0.0 {
        let db = Normal::new(0.0, params.shadowing_sigma_db).expect("positive sigma").sample(rng);
        beta *= 10f64.powf(db / 10.0);
    }
    Ok(beta)
}

/// Target kinematic state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetTrack {
    pub position: Point,
    pub speed: f64,
    pub heading: f64,
    pub step_interval: f64,
}

/// Random-direction motion step with specular reflection at the area edges.
pub fn advance_target(track: &TargetTrack, area: f64, rng: &mut SimRng) -> TargetTrack {
    if track.speed == 0.0 {
        return *track;
    }
    let mut heading = track.heading + rng.random_range(-FRAC_PI_8..FRAC_PI_8);
    let step = track.speed * track.step_interval;
    let mut x = track.position[0] + step * heading.cos();
    let mut y = track.position[1] + step * heading.sin();
    if x < 0.0 {
        x = -x;
        heading = PI - heading;
    } else if x > area {
        x = 2.0 * area - x;
        heading = PI - heading;
    }
    if y < 0.0 {
        y = -y;
        heading = -heading;
    } else if y > area {
        y = 2.0 * area - y;
        heading = -heading;
    }
    TargetTrack {
        position: [x.clamp(0.0, area), y.clamp(0.0, area)],
        heading: heading.rem_euclid(TAU),
        ..*track
    }
}

/// Detection probability together with the quantities that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingObservation {
    pub beam: usize,
    pub pd: f64,
    pub threshold: f64,
    pub noncentrality: Vec<f64>,
    /// `|a(phi_0)^T w|^2`
    pub beam_gain: f64,
}

impl SensingObservation {
    pub fn total_noncentrality(&self) -> f64 {
        self.noncentrality.iter().sum()
    }
}

/// A fully built scene: geometry, codebook, channel and CFAR threshold.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub geometry: ArrayGeometry,
    pub codebook: Codebook,
    pub channel: ChannelParams,
    pub threshold: f64,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let center = [config.area_m / 2.0, config.area_m / 2.0];
        let geometry = ArrayGeometry::new(config.antennas, config.ap_tx, config.ap_rx.clone(), center)?;
        let codebook = Codebook::dft(config.antennas);
        let channel = ChannelParams::from_config(&config);
        let threshold = detect::cfar_threshold(config.p_fa, geometry.receivers())?;
        Ok(Self { config, geometry, codebook, channel, threshold })
    }

    pub fn antennas(&self) -> usize {
        self.geometry.antennas
    }

    pub fn receivers(&self) -> usize {
        self.geometry.receivers()
    }

    /// Transmit-side beam gain `|a(phi_0)^T w_mu|^2` toward `position`.
    pub fn beam_gain(&self, beam: usize, position: Point) -> Result<f64> {
        let sine = self.geometry.sine_from_broadside(self.geometry.tx, position);
        self.codebook.gain(beam, sine)
    }

    /// Mean large-scale fading for each receive leg (shadowing excluded).
    pub fn mean_pathloss(&self, position: Point) -> Result<Vec<f64>> {
        let d0 = distance(self.geometry.tx, position);
        let mut quiet = self.channel.clone();
        quiet.shadowing_sigma_db = 0.0;
        let mut rng = par::stream_rng(0, 0);
        self.geometry.rx.iter().map(|&rx| pathloss(d0, distance(rx, position), &quiet, &mut rng)).collect()
    }

    /// Noiseless reflected signals `eta_n = a(phi_n) a(phi_0)^T w_mu`.
    pub fn reflected_signals(&self, beam: usize, position: Point) -> Result<Vec<Vec<Complex64>>> {
        let w = self.codebook.column(beam)?;
        let m = self.antennas();
        let a0 = steering_from_sine(self.geometry.sine_from_broadside(self.geometry.tx, position), m);
        let proj: Complex64 = a0.iter().zip(w).map(|(x, y)| x * y).sum();
        Ok(self
            .geometry
            .rx
            .iter()
            .map(|&rx| {
                steering_from_sine(self.geometry.sine_from_broadside(rx, position), m)
                    .into_iter()
                    .map(|a| a * proj)
                    .collect()
            })
            .collect())
    }

    /// Closed-form P_D for beam `beam` with the target at `target.position`.
    pub fn sensing_observation(&self, beam: usize, target: &TargetTrack, rng: &mut SimRng) -> Result<SensingObservation> {
        let position = target.position;
        if !inside(position, self.config.area_m) {
            return Err(invalid(format!("target {position:?} outside the area")));
        }
        let gain = self.beam_gain(beam, position)?;
        let eta_energy = self.antennas() as f64 * gain;
        let d0 = distance(self.geometry.tx, position);
        let mut noncentrality = Vec::with_capacity(self.receivers());
        for &rx in &self.geometry.rx {
            let beta = pathloss(d0, distance(rx, position), &self.channel, rng)?;
            let rcs = match self.config.rcs_mode {
                RcsMode::MeanPower => self.channel.rcs_variance,
                RcsMode::Sampled => {
                    let e: f64 = Exp1.sample(rng);
                    self.channel.rcs_variance * e
                }
            };
            noncentrality.push(self.channel.tx_power * rcs * beta * eta_energy / self.channel.noise_power);
        }
        let setup = DetectionSetup::with_threshold(self.threshold, self.config.p_fa, self.channel.noise_power, noncentrality)?;
        let pd = detect::detection_probability(&setup, self.receivers())?;
        Ok(SensingObservation { beam, pd, threshold: self.threshold, noncentrality: setup.per_ap_noncentrality, beam_gain: gain })
    }

    /// P_D for every codeword with the target held at `target.position`.
    pub fn pd_profile(&self, target: &TargetTrack, rng: &mut SimRng) -> Result<Vec<SensingObservation>> {
        (0..self.antennas()).map(|mu| self.sensing_observation(mu, target, rng)).collect()
    }

    /// Initial target state for a new episode.
    pub fn spawn_target(&self, rng: &mut SimRng) -> TargetTrack {
        let area = self.config.area_m;
        let position = match self.config.target_reset {
            TargetReset::Fixed => self.config.target_start,
            TargetReset::Uniform => [rng.random_range(0.0..=area), rng.random_range(0.0..=area)],
        };
        let speed = if self.config.target_speed_mps > 0.0 {
            rng.random_range(0.0..=self.config.target_speed_mps)
        } else {
            0.0
        };
        TargetTrack { position, speed, heading: rng.random_range(0.0..TAU), step_interval: self.config.step_interval_s }
    }
}
