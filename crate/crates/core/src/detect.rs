//! Joint GLRT detection across distributed receive APs.
//!
//! Noise convention: the matched-filter noise on every antenna has variance
//! `noise_power` per real component. Under that convention the GLRT statistic
//! is exactly chi-squared with `2N` degrees of freedom under H0 and
//! non-central chi-squared with non-centrality `sum_n |g_n|^2 |eta_n|^2 / noise_power`
//! under H1.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::par::{self, Exec};
use crate::special;

/// Receivers whose reflected signal energy falls below this are degenerate.
pub const DEGENERATE_FLOOR: f64 = 1e-30;

/// A (possibly non-central) chi-squared law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareSpec {
    pub dof: u32,
    pub noncentrality: f64,
}

impl ChiSquareSpec {
    pub fn new(dof: u32, noncentrality: f64) -> Result<Self> {
        if dof < 2 || dof % 2 != 0 {
            return Err(invalid(format!("dof must be even and >= 2, got {dof}")));
        }
        if !(noncentrality >= 0.0) {
            return Err(invalid(format!("noncentrality must be >= 0, got {noncentrality}")));
        }
        Ok(Self { dof, noncentrality })
    }

    /// Law of the joint statistic over `n_receivers` APs.
    pub fn joint(n_receivers: usize, per_ap_noncentrality: &[f64]) -> Result<Self> {
        Self::new(2 * n_receivers as u32, per_ap_noncentrality.iter().sum())
    }

    pub fn ccdf(&self, x: f64) -> Result<f64> {
        special::noncentral_chi2_ccdf(x, self.dof, self.noncentrality)
    }
}

/// CFAR threshold plus the per-receiver non-centralities it is applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSetup {
    pub threshold: f64,
    pub per_ap_noncentrality: Vec<f64>,
    pub noise_power: f64,
    pub false_alarm: f64,
}

impl DetectionSetup {
    /// Builds a setup whose threshold satisfies the CFAR constraint for
    /// `per_ap_noncentrality.len()` receivers.
    pub fn new(false_alarm: f64, noise_power: f64, per_ap_noncentrality: Vec<f64>) -> Result<Self> {
        let n = per_ap_noncentrality.len();
        if n == 0 {
            return Err(Error::Empty("per-AP non-centralities"));
        }
        let threshold = cfar_threshold(false_alarm, n)?;
        Self::with_threshold(threshold, false_alarm, noise_power, per_ap_noncentrality)
    }

    pub fn with_threshold(
        threshold: f64,
        false_alarm: f64,
        noise_power: f64,
        per_ap_noncentrality: Vec<f64>,
    ) -> Result<Self> {
        if !(false_alarm > 0.0 && false_alarm < 1.0) {
            return Err(invalid(format!("false-alarm probability must lie in (0, 1), got {false_alarm}")));
        }
        if !(noise_power > 0.0) {
            return Err(invalid(format!("noise power must be positive, got {noise_power}")));
        }
        if !(threshold >= 0.0) {
            return Err(invalid(format!("threshold must be >= 0, got {threshold}")));
        }
        if let Some(bad) = per_ap_noncentrality.iter().find(|v| !(**v >= 0.0)) {
            return Err(invalid(format!("non-centrality must be >= 0, got {bad}")));
        }
        Ok(Self { threshold, per_ap_noncentrality, noise_power, false_alarm })
    }

    pub fn total_noncentrality(&self) -> f64 {
        self.per_ap_noncentrality.iter().sum()
    }
}

/// GLRT threshold giving false-alarm probability `false_alarm` over `n_receivers` APs.
pub fn cfar_threshold(false_alarm: f64, n_receivers: usize) -> Result<f64> {
    if n_receivers == 0 {
        return Err(invalid("need at least one receiver"));
    }
    special::chi2_ccdf_inverse(false_alarm, 2 * n_receivers as u32)
}

/// Probability that the joint statistic exceeds the CFAR threshold under H1.
pub fn detection_probability(setup: &DetectionSetup, n_receivers: usize) -> Result<f64> {
    if setup.per_ap_noncentrality.len() != n_receivers {
        return Err(Error::DimensionMismatch { expected: n_receivers, got: setup.per_ap_noncentrality.len() });
    }
    ChiSquareSpec::joint(n_receivers, &setup.per_ap_noncentrality)?.ccdf(setup.threshold)
}

/// Matched-filter outputs `y_n` and noiseless reflected signals `eta_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlrtInputs {
    pub filtered: Vec<Vec<Complex64>>,
    pub reflected: Vec<Vec<Complex64>>,
}

impl GlrtInputs {
    pub fn new(filtered: Vec<Vec<Complex64>>, reflected: Vec<Vec<Complex64>>) -> Result<Self> {
        if filtered.len() != reflected.len() {
            return Err(Error::DimensionMismatch { expected: reflected.len(), got: filtered.len() });
        }
        let m = reflected.first().map_or(0, Vec::len);
        for v in filtered.iter().chain(reflected.iter()) {
            if v.len() != m {
                return Err(Error::DimensionMismatch { expected: m, got: v.len() });
            }
        }
        Ok(Self { filtered, reflected })
    }

    /// Drops receivers whose reflected energy is below [`DEGENERATE_FLOOR`].
    pub fn without_degenerate(self) -> Self {
        let (filtered, reflected) = self
            .filtered
            .into_iter()
            .zip(self.reflected)
            .enumerate()
            .filter(|(n, (_, eta))| {
                let keep = norm_sq(eta) > DEGENERATE_FLOOR;
                if !keep {
                    log::warn!("receiver {n} excluded from GLRT: degenerate reflected signal");
                }
                keep
            })
            .map(|(_, pair)| pair)
            .unzip();
        Self { filtered, reflected }
    }

    pub fn receivers(&self) -> usize {
        self.reflected.len()
    }
}

pub fn norm_sq(v: &[Complex64]) -> f64 {
    v.iter().map(Complex64::norm_sqr).sum()
}

/// `a^H b`
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Least-squares reflection coefficient `eta^H y / |eta|^2`.
pub fn reflection_coefficient_estimate(y: &[Complex64], eta: &[Complex64]) -> Result<Complex64> {
    if y.len() != eta.len() {
        return Err(Error::DimensionMismatch { expected: eta.len(), got: y.len() });
    }
    let energy = norm_sq(eta);
    if energy <= DEGENERATE_FLOOR {
        return Err(Error::DegenerateSignal { receiver: 0, norm_sq: energy });
    }
    Ok(inner(eta, y) / energy)
}

/// Log generalized likelihood ratio `(1/noise) sum_n |eta_n^H y_n|^2 / |eta_n|^2`.
pub fn glrt_statistic(inputs: &GlrtInputs, noise_power: f64) -> Result<f64> {
    if !(noise_power > 0.0) {
        return Err(invalid(format!("noise power must be positive, got {noise_power}")));
    }
    let mut acc = 0.0;
    for (n, (y, eta)) in inputs.filtered.iter().zip(&inputs.reflected).enumerate() {
        let energy = norm_sq(eta);
        if energy <= DEGENERATE_FLOOR {
            return Err(Error::DegenerateSignal { receiver: n, norm_sq: energy });
        }
        acc += inner(eta, y).norm_sqr() / energy;
    }
    Ok(acc / noise_power)
}

/// How the per-receiver reflection coefficient is drawn in simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcsDraw {
    /// `|gamma_n|^2` fixed at its mean, uniformly random phase.
    MeanPower,
    /// `alpha_n ~ CN(0, rcs_var)` per trial.
    Rayleigh,
}

/// Outcome of a Monte-Carlo detection run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exceedance {
    pub trials: usize,
    pub rate: f64,
    /// Mean over trials of the closed-form P_D conditioned on the trial's
    /// reflection coefficients. Equals the closed form for `MeanPower`.
    pub mean_conditional_pd: f64,
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, per_component_var: f64) -> Complex64 {
    let s = per_component_var.sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Simulates the GLRT end to end on the given reflected signals.
///
/// `mean_gain_sq[n]` is `E|g_n|^2`, the mean power of the complex amplitude
/// multiplying `eta_n` (transmit power, RCS and path loss folded together).
/// Pass all zeros to simulate H0. The statistic is recomputed from scratch
/// each trial: noise is drawn on every antenna, the reflection coefficient
/// is estimated, and `glrt_statistic` is compared with `threshold`.
pub fn simulate_glrt(
    reflected: &[Vec<Complex64>],
    mean_gain_sq: &[f64],
    draw: RcsDraw,
    noise_power: f64,
    threshold: f64,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<Exceedance> {
    if reflected.len() != mean_gain_sq.len() {
        return Err(Error::DimensionMismatch { expected: reflected.len(), got: mean_gain_sq.len() });
    }
    if trials == 0 {
        return Err(Error::Empty("Monte-Carlo trials"));
    }
    let energies: Vec<f64> = reflected.iter().map(|e| norm_sq(e)).collect();
    if let Some((n, &e)) = energies.iter().enumerate().find(|(_, e)| **e <= DEGENERATE_FLOOR) {
        return Err(Error::DegenerateSignal { receiver: n, norm_sq: e });
    }
    let n_rx = reflected.len();
    let setup_nc = |gains: &[Complex64]| -> Vec<f64> {
        gains.iter().zip(&energies).map(|(g, e)| g.norm_sqr() * e / noise_power).collect()
    };
    let closed_form = |nc: Vec<f64>| -> f64 {
        ChiSquareSpec::joint(n_rx, &nc).and_then(|c| c.ccdf(threshold)).unwrap_or(f64::NAN)
    };
    let fixed_pd = match draw {
        RcsDraw::MeanPower => {
            let nc: Vec<f64> = mean_gain_sq.iter().zip(&energies).map(|(g, e)| g * e / noise_power).collect();
            Some(closed_form(nc))
        }
        RcsDraw::Rayleigh => None,
    };

    let hits_and_pd = |rng: &mut rand_chacha::ChaCha8Rng, count: usize| -> (f64, f64) {
        let mut hits = 0.0;
        let mut pd_sum = 0.0;
        let mut gains = vec![Complex64::new(0.0, 0.0); n_rx];
        let mut filtered: Vec<Vec<Complex64>> = reflected.iter().map(|e| vec![Complex64::new(0.0, 0.0); e.len()]).collect();
        for _ in 0..count {
            for (g, &p) in gains.iter_mut().zip(mean_gain_sq) {
                *g = match draw {
                    RcsDraw::MeanPower => {
                        let phase = rng.random::<f64>() * std::f64::consts::TAU;
                        Complex64::from_polar(p.sqrt(), phase)
                    }
                    RcsDraw::Rayleigh => complex_normal(rng, p / 2.0),
                };
            }
            for ((y, eta), g) in filtered.iter_mut().zip(reflected).zip(&gains) {
                for (yi, ei) in y.iter_mut().zip(eta) {
                    *yi = g * ei + complex_normal(rng, noise_power);
                }
            }
            let mut stat = 0.0;
            for ((y, eta), e) in filtered.iter().zip(reflected).zip(&energies) {
                stat += inner(eta, y).norm_sqr() / e;
            }
            stat /= noise_power;
            if stat > threshold {
                hits += 1.0;
            }
            pd_sum += match fixed_pd {
                Some(p) => p,
                None => closed_form(setup_nc(&gains)),
            };
        }
        (hits, pd_sum)
    };

    // Two sums over the same chunk streams: pack both into one pass by
    // running chunks once and collecting pairs.
    let chunks = trials.div_ceil(par::CHUNK);
    let parts = par::map_indexed(exec, chunks, |c| {
        let count = par::CHUNK.min(trials - c * par::CHUNK);
        let mut rng = par::stream_rng(seed, c as u64);
        hits_and_pd(&mut rng, count)
    });
    let (hits, pd_sum) = parts.into_iter().fold((0.0, 0.0), |(h, p), (a, b)| (h + a, p + b));
    let mean_conditional_pd = pd_sum / trials as f64;
    if mean_conditional_pd.is_nan() {
        return Err(Error::NonFinite("conditional detection probability".into()));
    }
    Ok(Exceedance { trials, rate: hits / trials as f64, mean_conditional_pd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_vec(rng: &mut impl Rng, m: usize) -> Vec<Complex64> {
        (0..m).map(|_| complex_normal(rng, 1.0)).collect()
    }

    #[test]
    fn coefficient_of_scaled_signal() {
        let eta = vec![c(1.0, 0.5), c(-0.3, 2.0), c(0.7, -1.1)];
        let y: Vec<_> = eta.iter().map(|e| e * 3.0).collect();
        let g = reflection_coefficient_estimate(&y, &eta).unwrap();
        assert!((g - c(3.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn coefficient_of_orthogonal_signal_is_zero() {
        let eta = vec![c(1.0, 0.0), c(0.0, 0.0)];
        let y = vec![c(0.0, 0.0), c(2.0, -1.0)];
        assert_eq!(reflection_coefficient_estimate(&y, &eta).unwrap(), c(0.0, 0.0));
    }

    #[test]
    fn coefficient_recovered_under_orthogonal_residual() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let eta = random_vec(&mut rng, 6);
        // Gram-Schmidt: strip the eta component from a random vector.
        let raw = random_vec(&mut rng, 6);
        let proj = inner(&eta, &raw) / norm_sq(&eta);
        let e: Vec<_> = raw.iter().zip(&eta).map(|(r, t)| r - proj * t).collect();
        let gamma = c(2.0, 1.0);
        let y: Vec<_> = eta.iter().zip(&e).map(|(t, r)| gamma * t + r).collect();
        let est = reflection_coefficient_estimate(&y, &eta).unwrap();
        assert!((est - gamma).norm() < 1e-10);
        let residual: Vec<_> = y.iter().zip(&eta).map(|(yy, t)| yy - est * t).collect();
        assert!(inner(&eta, &residual).norm() < 1e-10);
    }

    #[test]
    fn degenerate_eta_rejected() {
        let eta = vec![c(0.0, 0.0); 4];
        let y = vec![c(1.0, 0.0); 4];
        assert!(matches!(reflection_coefficient_estimate(&y, &eta), Err(Error::DegenerateSignal { .. })));
        let inputs = GlrtInputs::new(vec![y.clone(), y], vec![vec![c(1.0, 0.0); 4], eta]).unwrap();
        assert!(matches!(glrt_statistic(&inputs, 1.0), Err(Error::DegenerateSignal { receiver: 1, .. })));
        let kept = inputs.without_degenerate();
        assert_eq!(kept.receivers(), 1);
        assert!(glrt_statistic(&kept, 1.0).is_ok());
    }

    #[test]
    fn statistic_trivial_cases() {
        let eta = vec![c(1.0, 2.0), c(0.5, -1.0), c(3.0, 0.0)];
        let zero = GlrtInputs::new(vec![vec![c(0.0, 0.0); 3]; 2], vec![eta.clone(); 2]).unwrap();
        assert_eq!(glrt_statistic(&zero, 1.0).unwrap(), 0.0);
        let echo = GlrtInputs::new(vec![eta.clone()], vec![eta.clone()]).unwrap();
        assert_relative_eq!(glrt_statistic(&echo, 1.0).unwrap(), norm_sq(&eta), max_relative = 1e-12);
    }

    #[test]
    fn statistic_scale_invariant_in_eta() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let ys: Vec<_> = (0..3).map(|_| random_vec(&mut rng, 5)).collect();
            let etas: Vec<_> = (0..3).map(|_| random_vec(&mut rng, 5)).collect();
            let k = complex_normal(&mut rng, 4.0);
            let scaled: Vec<Vec<_>> = etas.iter().map(|e| e.iter().map(|x| x * k).collect()).collect();
            let a = glrt_statistic(&GlrtInputs::new(ys.clone(), etas).unwrap(), 0.7).unwrap();
            let b = glrt_statistic(&GlrtInputs::new(ys, scaled).unwrap(), 0.7).unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-10);
        }
    }

    #[test]
    fn inputs_validate_lengths() {
        assert!(GlrtInputs::new(vec![vec![c(0.0, 0.0); 2]], vec![vec![c(1.0, 0.0); 3]]).is_err());
        assert!(GlrtInputs::new(vec![], vec![vec![c(1.0, 0.0); 3]]).is_err());
    }

    #[test]
    fn null_hypothesis_mean_is_two_n() {
        // Chi-squared with 2N dof has mean 2N; sample mean over 1e5 draws.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let etas: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 8)).collect();
        let trials = 100_000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let ys: Vec<_> = (0..n).map(|_| (0..8).map(|_| complex_normal(&mut rng, 2.5)).collect()).collect();
            sum += glrt_statistic(&GlrtInputs::new(ys, etas.clone()).unwrap(), 2.5).unwrap();
        }
        let mean = sum / trials as f64;
        assert!((mean - 8.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn detection_probability_limits() {
        let zero = DetectionSetup::new(1e-3, 1.0, vec![0.0; 4]).unwrap();
        assert_relative_eq!(detection_probability(&zero, 4).unwrap(), 1e-3, max_relative = 1e-9);
        let strong = DetectionSetup::new(1e-3, 1.0, vec![50.0; 4]).unwrap();
        assert!(detection_probability(&strong, 4).unwrap() >= 0.999);
        assert!(detection_probability(&strong, 3).is_err());
        assert!(DetectionSetup::new(1e-3, 1.0, vec![-1.0]).is_err());
        assert!(DetectionSetup::new(0.0, 1.0, vec![1.0]).is_err());
        assert!(DetectionSetup::new(1e-3, 0.0, vec![1.0]).is_err());
    }

    #[test]
    fn single_receiver_matches_marcum() {
        // Remark: for N = 1, P_D = Q_1(sqrt(nc), sqrt(threshold)).
        let setup = DetectionSetup::new(0.1, 1.0, vec![9.0]).unwrap();
        let pd = detection_probability(&setup, 1).unwrap();
        let q = special::marcum_q(1, 3.0, setup.threshold.sqrt()).unwrap();
        assert!((pd - q).abs() < 1e-10);
        assert_relative_eq!(pd, 0.854_511_675_784_8, max_relative = 1e-6);
    }

    #[test]
    fn simulation_is_reproducible_across_exec_modes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let etas: Vec<_> = (0..2).map(|_| random_vec(&mut rng, 4)).collect();
        let a = simulate_glrt(&etas, &[0.3, 0.2], RcsDraw::Rayleigh, 1.0, 10.0, 9000, 42, Exec::Parallel).unwrap();
        let b = simulate_glrt(&etas, &[0.3, 0.2], RcsDraw::Rayleigh, 1.0, 10.0, 9000, 42, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }
}
