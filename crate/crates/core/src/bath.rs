//! Stochastic transition-frequency fluctuations Δ(t) and their calibration
//! against a target echo decay time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Grid spacing must resolve the correlation time at least this finely.
pub const GRID_PER_TAU_C: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BathModel {
    #[default]
    GaussMarkov,
    TwoStateTelegraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathParams {
    /// Fluctuation amplitude (rad/s).
    pub delta_rms: f64,
    /// Correlation time (s).
    pub tau_c: f64,
    pub model: BathModel,
}

impl BathParams {
    pub fn new(delta_rms: f64, tau_c: f64, model: BathModel) -> Result<Self> {
        let p = Self {
            delta_rms,
            tau_c,
            model,
        };
        p.validate()?;
        Ok(p)
    }

    /// A bath that never perturbs the transition.
    pub fn off() -> Self {
        Self {
            delta_rms: 0.0,
            tau_c: 1.0,
            model: BathModel::GaussMarkov,
        }
    }

    pub fn is_off(&self) -> bool {
        self.delta_rms == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite(self.delta_rms, "bath amplitude")?;
        ensure_finite(self.tau_c, "bath correlation time")?;
        if self.delta_rms < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bath amplitude must be >= 0, got {}",
                self.delta_rms
            )));
        }
        if self.tau_c <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bath correlation time must be > 0, got {}",
                self.tau_c
            )));
        }
        Ok(())
    }

    /// Coarsest admissible sampling grid.
    pub fn max_grid_dt(&self) -> f64 {
        self.tau_c / GRID_PER_TAU_C
    }
}

/// One sampled detuning trajectory on a uniform grid starting at t = 0.
///
/// Between grid points the detuning is linearly interpolated; beyond the last
/// sample it is held constant.
#[derive(Debug, Clone, PartialEq)]
pub struct BathRealization {
    samples: Vec<f64>,
    dt: f64,
    stream_id: u64,
    tau_c: Option<f64>,
    /// Running integral at each grid point.
    cumulative: Vec<f64>,
    max_abs: f64,
}

impl BathRealization {
    /// The identically zero realization.
    pub fn zero() -> Self {
        Self {
            samples: Vec::new(),
            dt: 1.0,
            stream_id: 0,
            tau_c: None,
            cumulative: Vec::new(),
            max_abs: 0.0,
        }
    }

    pub fn from_samples(samples: Vec<f64>, dt: f64, stream_id: u64) -> Result<Self> {
        ensure_finite(dt, "bath grid spacing")?;
        if dt <= 0.0 {
            return Err(Error::InvalidArgument(format!("bath grid spacing must be > 0, got {dt}")));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("bath samples"));
        }
        let mut cumulative = Vec::with_capacity(samples.len());
        let mut acc = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            if i > 0 {
                acc += 0.5 * dt * (samples[i - 1] + x);
            }
            cumulative.push(acc);
        }
        let max_abs = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        Ok(Self {
            samples,
            dt,
            stream_id,
            tau_c: None,
            cumulative,
            max_abs,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    /// Correlation time of the generating process, if known.
    pub fn tau_c(&self) -> Option<f64> {
        self.tau_c
    }

    pub fn is_zero(&self) -> bool {
        self.max_abs == 0.0
    }

    /// Time span covered by the samples.
    pub fn duration(&self) -> f64 {
        self.samples.len().saturating_sub(1) as f64 * self.dt
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let x = (t / self.dt).max(0.0);
        let last = self.samples.len() - 1;
        let i = (x.floor() as usize).min(last);
        (i, x - i as f64)
    }

    /// Detuning offset at time t.
    pub fn at(&self, t: f64) -> f64 {
        if self.samples.len() < 2 {
            return self.samples.first().copied().unwrap_or(0.0);
        }
        let (i, frac) = self.locate(t);
        if i + 1 >= self.samples.len() {
            return self.samples[i];
        }
        self.samples[i] + frac * (self.samples[i + 1] - self.samples[i])
    }

    fn antiderivative(&self, t: f64) -> f64 {
        match self.samples.len() {
            0 => 0.0,
            1 => self.samples[0] * t,
            _ => {
                let (i, frac) = self.locate(t);
                if i + 1 >= self.samples.len() {
                    let tail = t - i as f64 * self.dt;
                    return self.cumulative[i] + self.samples[i] * tail;
                }
                let (a, b) = (self.samples[i], self.samples[i + 1]);
                let h = frac * self.dt;
                self.cumulative[i] + h * (a + 0.5 * frac * (b - a))
            }
        }
    }

    /// ∫ Δ(t) dt over [a, b], exact for the interpolated trajectory.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.antiderivative(b) - self.antiderivative(a)
    }
}

/// Draws one realization covering `duration` on a grid of spacing `dt`.
///
/// The stream for a given `(seed, stream_id)` is fixed, so the same pair
/// always yields the same samples regardless of the order in which
/// realizations are generated.
pub fn sample_realization(
    params: &BathParams,
    duration: f64,
    dt: f64,
    seed: u64,
    stream_id: u64,
) -> Result<BathRealization> {
    params.validate()?;
    ensure_finite(duration, "bath duration")?;
    ensure_finite(dt, "bath grid spacing")?;
    if duration < 0.0 || dt <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "bath needs duration >= 0 and dt > 0, got {duration} and {dt}"
        )));
    }
    let limit = params.max_grid_dt();
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::BathGridTooCoarse { dt, limit });
    }
    let n = (duration / dt).ceil() as usize + 1;
    let n = n.max(2);
    if params.is_off() {
        return BathRealization::from_samples(vec![0.0; n], dt, stream_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    let delta = params.delta_rms;
    let mut samples = Vec::with_capacity(n);
    match params.model {
        BathModel::GaussMarkov => {
            let a = (-dt / params.tau_c).exp();
            let b = delta * (1.0 - a * a).sqrt();
            let mut x = delta * rng.sample::<f64, _>(StandardNormal);
            samples.push(x);
            for _ in 1..n {
                x = a * x + b * rng.sample::<f64, _>(StandardNormal);
                samples.push(x);
            }
        }
        BathModel::TwoStateTelegraph => {
            // Symmetric switching at rate 1/tau_c in each direction.
            let p_flip = 0.5 * (1.0 - (-2.0 * dt / params.tau_c).exp());
            let mut x = if rng.random::<bool>() { delta } else { -delta };
            samples.push(x);
            for _ in 1..n {
                if rng.random::<f64>() < p_flip {
                    x = -x;
                }
                samples.push(x);
            }
        }
    }
    let mut r = BathRealization::from_samples(samples, dt, stream_id)?;
    r.tau_c = Some(params.tau_c);
    Ok(r)
}

/// Motional-narrowing estimate of the bath-limited coherence time.
///
/// Only meaningful for δ·τ_c < 1; outside that regime the estimate is
/// returned inside the error so callers can still inspect it.
pub fn effective_t2(params: &BathParams) -> Result<f64> {
    params.validate()?;
    if params.is_off() {
        return Ok(f64::INFINITY);
    }
    let d2tc = params.delta_rms * params.delta_rms * params.tau_c;
    let estimate = match params.model {
        BathModel::GaussMarkov => 1.0 / d2tc,
        // Correlation time of the telegraph process is tau_c / 2.
        BathModel::TwoStateTelegraph => 2.0 / d2tc,
    };
    let product = params.delta_rms * params.tau_c;
    if product >= 1.0 {
        return Err(Error::RegimeViolation { product, estimate });
    }
    Ok(estimate)
}

/// τ_c that makes [`effective_t2`] equal `target_t2`.
pub fn narrowing_tau_c(target_t2: f64, delta_rms: f64, model: BathModel) -> f64 {
    let base = 1.0 / (delta_rms * delta_rms * target_t2);
    match model {
        BathModel::GaussMarkov => base,
        BathModel::TwoStateTelegraph => 2.0 * base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub tau_c: f64,
    pub t2_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: BathParams,
    pub t2_sim: f64,
    pub target_t2: f64,
    pub seed_tau_c: f64,
    pub log: Vec<CalibrationStep>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    /// Relative tolerance on the simulated decay time.
    pub rel_tol: f64,
    pub max_iterations: usize,
    /// Geometric bracket expansion steps allowed before giving up.
    pub max_expansions: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            rel_tol: 0.02,
            max_iterations: 30,
            max_expansions: 12,
        }
    }
}

/// Finds τ_c so that `oracle(params)` (a simulated echo decay time) matches
/// `target_t2`.
///
/// Starts at the motional-narrowing seed and searches the narrowing branch,
/// where the decay time falls as τ_c grows: the bracket is widened by factors
/// of two until it straddles the target, then bisected in log τ_c.
pub fn calibrate<F>(
    target_t2: f64,
    delta_rms: f64,
    model: BathModel,
    opts: CalibrationOptions,
    mut oracle: F,
) -> Result<Calibration>
where
    F: FnMut(&BathParams) -> Result<f64>,
{
    ensure_finite(target_t2, "target T2")?;
    ensure_finite(delta_rms, "bath amplitude")?;
    if target_t2 <= 0.0 {
        return Err(Error::InvalidArgument(format!("target T2 must be > 0, got {target_t2}")));
    }
    if delta_rms <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "bath amplitude must be > 0 to reach a finite T2, got {delta_rms}"
        )));
    }
    let seed_tau_c = narrowing_tau_c(target_t2, delta_rms, model);
    let mut log = Vec::new();
    let mut eval = |tau_c: f64, log: &mut Vec<CalibrationStep>| -> Result<f64> {
        let params = BathParams::new(delta_rms, tau_c, model)?;
        let t2_sim = oracle(&params)?;
        ensure_finite(t2_sim, "simulated T2")?;
        log.push(CalibrationStep { tau_c, t2_sim });
        Ok(t2_sim)
    };
    let done = |t2: f64| ((t2 - target_t2) / target_t2).abs() <= opts.rel_tol;
    let finish = |tau_c: f64, t2_sim: f64, log: Vec<CalibrationStep>| Calibration {
        params: BathParams {
            delta_rms,
            tau_c,
            model,
        },
        t2_sim,
        target_t2,
        seed_tau_c,
        log,
    };

    let t_seed = eval(seed_tau_c, &mut log)?;
    if done(t_seed) {
        return Ok(finish(seed_tau_c, t_seed, log));
    }
    // Decay time decreases with tau_c on the narrowing branch.
    let (mut lo, mut t_lo, mut hi, mut t_hi) = (seed_tau_c, t_seed, seed_tau_c, t_seed);
    let mut expansions = 0;
    while !(t_lo >= target_t2 && t_hi <= target_t2) {
        if expansions >= opts.max_expansions {
            return Err(Error::Calibration(format!(
                "no bracket after {expansions} expansions: tau_c in [{lo:e}, {hi:e}] s gives T2 in [{t_hi:e}, {t_lo:e}] s, target {target_t2:e} s; log {:?}",
                log.iter().map(|s| (s.tau_c, s.t2_sim)).collect::<Vec<_>>()
            )));
        }
        expansions += 1;
        if t_lo < target_t2 {
            lo /= 2.0;
            t_lo = eval(lo, &mut log)?;
            if done(t_lo) {
                return Ok(finish(lo, t_lo, log));
            }
        } else {
            hi *= 2.0;
            t_hi = eval(hi, &mut log)?;
            if done(t_hi) {
                return Ok(finish(hi, t_hi, log));
            }
        }
    }
    for _ in 0..opts.max_iterations {
        let mid = (lo * hi).sqrt();
        let t_mid = eval(mid, &mut log)?;
        if done(t_mid) {
            return Ok(finish(mid, t_mid, log));
        }
        if t_mid > target_t2 {
            lo = mid;
            t_lo = t_mid;
        } else {
            hi = mid;
            t_hi = t_mid;
        }
        if hi / lo < 1.0 + 1e-6 {
            break;
        }
    }
    Err(Error::Calibration(format!(
        "bisection did not reach {:.1}% after {} evaluations: bracket tau_c in [{lo:e}, {hi:e}] s with T2 in [{t_hi:e}, {t_lo:e}] s, target {target_t2:e} s",
        100.0 * opts.rel_tol,
        log.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn khz(x: f64) -> f64 {
        TAU * x * 1e3
    }

    #[test]
    fn zero_amplitude_gives_zero_samples() {
        let p = BathParams::new(0.0, 1e-3, BathModel::GaussMarkov).unwrap();
        let r = sample_realization(&p, 1e-2, 1e-5, 1, 2).unwrap();
        assert!(r.samples().iter().all(|&x| x == 0.0));
        assert!(r.is_zero());
    }

    #[test]
    fn same_stream_is_bit_identical() {
        let p = BathParams::new(khz(10.0), 1e-5, BathModel::GaussMarkov).unwrap();
        let a = sample_realization(&p, 1e-3, 1e-6, 7, 11).unwrap();
        let b = sample_realization(&p, 1e-3, 1e-6, 7, 11).unwrap();
        let c = sample_realization(&p, 1e-3, 1e-6, 7, 12).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn longer_realization_extends_shorter_one() {
        let p = BathParams::new(khz(10.0), 1e-5, BathModel::GaussMarkov).unwrap();
        let a = sample_realization(&p, 1e-4, 1e-6, 3, 4).unwrap();
        let b = sample_realization(&p, 2e-4, 1e-6, 3, 4).unwrap();
        assert_eq!(a.samples(), &b.samples()[..a.samples().len()]);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let p = BathParams::new(khz(10.0), 1e-5, BathModel::GaussMarkov).unwrap();
        assert!(matches!(
            sample_realization(&p, 1e-4, 2e-6, 0, 0),
            Err(Error::BathGridTooCoarse { .. })
        ));
    }

    #[test]
    fn gauss_markov_statistics() {
        // Independent check: pooled sample variance and lag-tau_c
        // autocorrelation over many short realizations.
        let delta = khz(10.0);
        let tau_c = 1e-3;
        let dt = tau_c / 10.0;
        let p = BathParams::new(delta, tau_c, BathModel::GaussMarkov).unwrap();
        let lag = 10;
        let (mut s2, mut n2, mut c, mut nc) = (0.0, 0usize, 0.0, 0usize);
        for stream in 0..10_000u64 {
            let r = sample_realization(&p, 2.0 * tau_c, dt, 99, stream).unwrap();
            let x = r.samples();
            s2 += x[0] * x[0] + x[lag] * x[lag];
            n2 += 2;
            c += x[0] * x[lag];
            nc += 1;
        }
        let var = s2 / n2 as f64;
        let rho = (c / nc as f64) / var;
        assert!((var / (delta * delta) - 1.0).abs() < 0.05, "variance ratio {}", var / (delta * delta));
        assert!((rho / (-1f64).exp() - 1.0).abs() < 0.10, "autocorrelation {rho}");
    }

    #[test]
    fn gauss_markov_long_run_variance() {
        let delta = khz(10.0);
        let tau_c = 1e-3;
        let p = BathParams::new(delta, tau_c, BathModel::GaussMarkov).unwrap();
        let r = sample_realization(&p, 0.1, tau_c / 10.0, 5, 0).unwrap();
        let x = r.samples();
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        // Only 100 correlation times: loose bound.
        assert!((var / (delta * delta) - 1.0).abs() < 0.35);
    }

    #[test]
    fn telegraph_levels_and_correlation() {
        let delta = khz(10.0);
        let tau_c = 1e-4;
        let dt = tau_c / 10.0;
        let p = BathParams::new(delta, tau_c, BathModel::TwoStateTelegraph).unwrap();
        let lag = 5; // t = tau_c / 2, expected correlation e^{-1}
        let (mut c, mut n) = (0.0, 0usize);
        for stream in 0..10_000u64 {
            let r = sample_realization(&p, tau_c, dt, 3, stream).unwrap();
            let x = r.samples();
            assert!(x.iter().all(|&v| v == delta || v == -delta));
            c += x[0] * x[lag];
            n += 1;
        }
        let rho = c / n as f64 / (delta * delta);
        assert!((rho / (-1f64).exp() - 1.0).abs() < 0.10, "autocorrelation {rho}");
    }

    #[test]
    fn interpolation_and_integral() {
        let r = BathRealization::from_samples(vec![0.0, 2.0, 2.0, -2.0], 0.5, 0).unwrap();
        assert_eq!(r.at(0.25), 1.0);
        assert_eq!(r.at(0.75), 2.0);
        assert_eq!(r.at(1.25), 0.0);
        assert_eq!(r.at(10.0), -2.0);
        // Trapezoids: 0.5, 1.0, 0.0
        assert_relative_eq!(r.integral(0.0, 1.5), 1.5, epsilon = 1e-15);
        // ∫_0^0.25 4t dt = 0.125
        assert_relative_eq!(r.integral(0.0, 0.25), 0.125, epsilon = 1e-15);
        assert_relative_eq!(r.integral(1.5, 2.5), -2.0, epsilon = 1e-15);
        assert_relative_eq!(r.integral(0.25, 1.25), r.integral(0.0, 1.25) - 0.125, epsilon = 1e-15);
    }

    #[test]
    fn effective_t2_values() {
        let p = BathParams::new(0.0, 1e-6, BathModel::GaussMarkov).unwrap();
        assert_eq!(effective_t2(&p).unwrap(), f64::INFINITY);

        let delta = khz(10.0);
        let tau_c = narrowing_tau_c(50e-6, delta, BathModel::GaussMarkov);
        // (2π·10⁴)⁻² / 50 µs, worked by hand: 2.533e-10 / 5e-5.
        assert_relative_eq!(tau_c, 5.066059182116889e-6, max_relative = 1e-12);
        let p = BathParams::new(delta, tau_c, BathModel::GaussMarkov).unwrap();
        assert_relative_eq!(effective_t2(&p).unwrap(), 50e-6, max_relative = 1e-12);

        let p2 = BathParams::new(2.0 * delta, tau_c, BathModel::GaussMarkov).unwrap();
        assert_relative_eq!(effective_t2(&p2).unwrap(), 12.5e-6, max_relative = 1e-12);

        let slow = BathParams::new(delta, 1e-3, BathModel::GaussMarkov).unwrap();
        match effective_t2(&slow) {
            Err(Error::RegimeViolation { product, .. }) => assert!(product > 1.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn calibrate_with_analytic_oracle() {
        // Closed-form 2PE phase variance for OU noise fitted at long times
        // reduces to the narrowing law; use it as a cheap stand-in oracle
        // with a non-monotonic shape to exercise the bracket logic.
        let delta = khz(10.0);
        let oracle = |p: &BathParams| -> Result<f64> {
            let tc = p.tau_c;
            let narrowing = 1.0 / (p.delta_rms * p.delta_rms * tc);
            let static_limit = 2.0f64.sqrt() / p.delta_rms;
            Ok(narrowing + static_limit * (tc / 2e-5))
        };
        let cal = calibrate(50e-6, delta, BathModel::GaussMarkov, CalibrationOptions::default(), oracle).unwrap();
        let t = oracle(&cal.params).unwrap();
        assert!((t / 50e-6 - 1.0).abs() <= 0.02);
        assert!(cal.log.len() >= 2);
        assert_eq!(cal.log.last().unwrap().tau_c, cal.params.tau_c);
    }

    #[test]
    fn calibrate_rejects_zero_amplitude() {
        let r = calibrate(50e-6, 0.0, BathModel::GaussMarkov, CalibrationOptions::default(), |_| Ok(1.0));
        assert!(r.is_err());
    }

    #[test]
    fn calibrate_reports_unreachable_target() {
        let r = calibrate(50e-6, khz(10.0), BathModel::GaussMarkov, CalibrationOptions::default(), |_| {
            Ok(1e-6)
        });
        match r {
            Err(Error::Calibration(msg)) => assert!(msg.contains("bracket")),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn integral_is_additive(seed in 0u64..1000, a in 0.0f64..5e-5, b in 0.0f64..5e-5, c in 0.0f64..5e-5) {
            let p = BathParams::new(khz(10.0), 1e-5, BathModel::GaussMarkov).unwrap();
            let r = sample_realization(&p, 2e-4, 1e-6, seed, 0).unwrap();
            let (x, y, z) = (a, a + b, a + b + c);
            let lhs = r.integral(x, z);
            let rhs = r.integral(x, y) + r.integral(y, z);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn samples_are_finite_and_telegraph_bounded(seed in 0u64..1000, stream in 0u64..1000,
                                                   d in 0.0f64..100.0, tc in 1e-6f64..1e-3) {
            let p = BathParams::new(khz(d), tc, BathModel::TwoStateTelegraph).unwrap();
            let r = sample_realization(&p, 20.0 * tc, tc / 10.0, seed, stream).unwrap();
            prop_assert!(r.samples().iter().all(|x| x.abs() <= khz(d) * (1.0 + 1e-15)));
        }
    }
}
