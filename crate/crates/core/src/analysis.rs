//! Echo extraction from traces and exponential decay fitting.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::bath::BathParams;
use crate::bloch::IonParams;
use crate::ensemble::{readout_for, run_ensemble, EnsembleSpec, RecordMode, Trace};
use crate::error::{Error, Result};
use crate::sequence::{ReadoutComponent, SequenceFamily};
use crate::units::{rad_per_s_to_khz, rad_to_deg, s_to_us};

/// Minimum samples inside a readout window.
pub const MIN_WINDOW_SAMPLES: usize = 5;
/// Opposite-sign points smaller than this fraction of the peak are dropped.
pub const SIGN_SCREEN: f64 = 0.05;
/// Residual rms above this fraction of a0 flags the fit.
pub const QUALITY_RESIDUAL: f64 = 0.1;
/// Points in a decay-time duration grid.
pub const GRID_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EchoComponent {
    InPhase,
    Quadrature,
}

impl EchoComponent {
    pub fn as_str(&self) -> &'static str {
        match self {
            EchoComponent::InPhase => "in-phase",
            EchoComponent::Quadrature => "quadrature",
        }
    }

    pub fn readout(&self) -> ReadoutComponent {
        match self {
            EchoComponent::InPhase => ReadoutComponent::InPhase,
            EchoComponent::Quadrature => ReadoutComponent::Quadrature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EchoMethod {
    /// Signed extremum inside the window, refined by a parabola.
    #[default]
    Peak,
    /// Trapezoidal area over the window (units of time, so only ratios
    /// between durations are meaningful). Insensitive to the window width
    /// once the whole echo is inside it.
    Integral,
    /// The component's value where |I + iQ| peaks, so a dispersive
    /// (odd-in-time) contribution reads as zero at the echo centre.
    MagnitudePeak,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoMeasurement {
    /// Family parameter of the sequence that produced the trace (s).
    pub param: f64,
    pub component: EchoComponent,
    pub amplitude: f64,
    pub peak_time: f64,
    pub window: (f64, f64),
}

/// Reads the echo of `component` inside `window`.
pub fn extract_echo(
    trace: &Trace,
    window: (f64, f64),
    component: EchoComponent,
    method: EchoMethod,
) -> Result<EchoMeasurement> {
    let (a, b) = window;
    let slack = 1e-12 * b.abs().max(1e-12);
    let idx: Vec<usize> = (0..trace.len())
        .filter(|&k| trace.times[k] >= a - slack && trace.times[k] <= b + slack)
        .collect();
    if idx.len() < MIN_WINDOW_SAMPLES {
        return Err(Error::ShortWindow {
            start: a,
            end: b,
            samples: idx.len(),
            needed: MIN_WINDOW_SAMPLES,
        });
    }
    let ys = match component {
        EchoComponent::InPhase => &trace.i,
        EchoComponent::Quadrature => &trace.q,
    };
    let (amplitude, peak_time) = match method {
        EchoMethod::Integral => {
            let area = idx
                .windows(2)
                .map(|p| 0.5 * (ys[p[0]] + ys[p[1]]) * (trace.times[p[1]] - trace.times[p[0]]))
                .sum::<f64>();
            let centre = 0.5 * (trace.times[idx[0]] + trace.times[idx[idx.len() - 1]]);
            (area, centre)
        }
        EchoMethod::Peak => {
            let pos = (0..idx.len())
                .max_by(|&x, &y| ys[idx[x]].abs().total_cmp(&ys[idx[y]].abs()))
                .unwrap_or(0);
            let k = idx[pos];
            let (y0, t0) = (ys[k], trace.times[k]);
            if pos == 0 || pos + 1 == idx.len() || idx[pos + 1] != k + 1 || idx[pos - 1] != k - 1 {
                (y0, t0)
            } else {
                let (ym, yp) = (ys[k - 1], ys[k + 1]);
                let h = 0.5 * (trace.times[k + 1] - trace.times[k - 1]);
                let curv = ym - 2.0 * y0 + yp;
                if curv == 0.0 || curv.signum() == y0.signum() {
                    (y0, t0)
                } else {
                    let off = (0.5 * (ym - yp) / curv).clamp(-1.0, 1.0);
                    (y0 - 0.25 * (ym - yp) * off, t0 + off * h)
                }
            }
        }
        EchoMethod::MagnitudePeak => {
            let mag: Vec<f64> = idx.iter().map(|&k| trace.i[k].hypot(trace.q[k])).collect();
            let pos = (0..idx.len()).max_by(|&x, &y| mag[x].total_cmp(&mag[y])).unwrap_or(0);
            let k = idx[pos];
            if pos == 0 || pos + 1 == idx.len() || idx[pos + 1] != k + 1 || idx[pos - 1] != k - 1 {
                (ys[k], trace.times[k])
            } else {
                let curv = mag[pos - 1] - 2.0 * mag[pos] + mag[pos + 1];
                let off = if curv < 0.0 {
                    (0.5 * (mag[pos - 1] - mag[pos + 1]) / curv).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                let (ym, y0, yp) = (ys[k - 1], ys[k], ys[k + 1]);
                let y = y0 + 0.5 * off * (yp - ym) + 0.5 * off * off * (yp - 2.0 * y0 + ym);
                let h = 0.5 * (trace.times[k + 1] - trace.times[k - 1]);
                (y, trace.times[k] + off * h)
            }
        }
    };
    Ok(EchoMeasurement {
        param: f64::NAN,
        component,
        amplitude,
        peak_time,
        window,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub a0: f64,
    pub t_dec: f64,
    pub stderr_a0: f64,
    pub stderr_t_dec: f64,
    pub residual_rms: f64,
    pub n_points: usize,
}

impl DecayFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.a0 * (-t / self.t_dec).exp()
    }
}

/// Least-squares fit of `a0 · exp(−t / t_dec)`.
pub fn fit_exponential(points: &[(f64, f64)]) -> Result<DecayFit> {
    fit_exponential_weighted(points, None)
}

/// As [`fit_exponential`] with optional per-point weights (inverse variances).
pub fn fit_exponential_weighted(points: &[(f64, f64)], weights: Option<&[f64]>) -> Result<DecayFit> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints(points.len()));
    }
    if let Some(w) = weights {
        if w.len() != points.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} points",
                w.len(),
                points.len()
            )));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and >= 0".into()));
        }
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("fit points"));
    }
    let peak = points.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::NotDecaying { rate: 0.0 });
    }
    let sign = points.iter().find(|p| p.1.abs() == peak).map(|p| p.1.signum()).unwrap_or(1.0);
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    let mut ws = Vec::with_capacity(points.len());
    for (k, &(x, y)) in points.iter().enumerate() {
        if y != 0.0 && y.signum() != sign {
            if y.abs() <= SIGN_SCREEN * peak {
                continue;
            }
            return Err(Error::SignMixed);
        }
        xs.push(x);
        ys.push(sign * y);
        ws.push(weights.map_or(1.0, |w| w[k]));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::TooFewPoints(n));
    }
    let x_scale = xs.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if x_scale == 0.0 {
        return Err(Error::InvalidArgument("all abscissae are zero".into()));
    }
    let xn: Vec<f64> = xs.iter().map(|x| x / x_scale).collect();
    let yn: Vec<f64> = ys.iter().map(|y| y / peak).collect();

    let (mut a, mut k) = log_linear_seed(&xn, &yn, &ws);
    let cost = |a: f64, k: f64| -> f64 {
        (0..n).map(|j| ws[j] * (a * (-k * xn[j]).exp() - yn[j]).powi(2)).sum()
    };
    let mut c = cost(a, k);
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..500 {
        let (mut jtj, mut jtr) = (Matrix2::zeros(), Vector2::zeros());
        for j in 0..n {
            let e = (-k * xn[j]).exp();
            let g = Vector2::new(e, -a * xn[j] * e);
            let r = yn[j] - a * e;
            jtj += ws[j] * g * g.transpose();
            jtr += ws[j] * r * g;
        }
        let mut stepped = false;
        for _ in 0..60 {
            let mut m = jtj;
            m[(0, 0)] *= 1.0 + lambda;
            m[(1, 1)] *= 1.0 + lambda;
            let Some(delta) = m.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let (a2, k2) = (a + delta[0], k + delta[1]);
            let c2 = cost(a2, k2);
            if c2.is_finite() && c2 <= c {
                let small = delta[0].abs() <= 1e-14 * a.abs() && delta[1].abs() <= 1e-14 * k.abs();
                a = a2;
                k = k2;
                c = c2;
                lambda = (lambda * 0.3).max(1e-15);
                stepped = true;
                converged = small;
                break;
            }
            lambda *= 10.0;
        }
        if !stepped {
            // No downhill step at any damping: at the optimum to rounding.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(format!(
            "Levenberg-Marquardt exhausted its iterations at a = {a}, k = {k}"
        )));
    }
    // Gauss-Newton polish on the gradient: the cost is flat to rounding
    // near the optimum, so step lengths rather than cost decide.
    let mut last = f64::INFINITY;
    for _ in 0..100 {
        let (mut jtj, mut jtr) = (Matrix2::zeros(), Vector2::zeros());
        for j in 0..n {
            let e = (-k * xn[j]).exp();
            let g = Vector2::new(e, -a * xn[j] * e);
            jtj += ws[j] * g * g.transpose();
            jtr += ws[j] * (yn[j] - a * e) * g;
        }
        let Some(delta) = jtj.lu().solve(&jtr) else { break };
        let size = (delta[0] / a).abs().max((delta[1] / k).abs());
        if !size.is_finite() || size >= last {
            break;
        }
        a += delta[0];
        k += delta[1];
        last = size;
        if size <= 1e-16 {
            break;
        }
    }
    if !(k > 0.0) {
        return Err(Error::NotDecaying { rate: k / x_scale });
    }
    let mut jtj = Matrix2::zeros();
    let mut ss = 0.0;
    let mut ss_plain = 0.0;
    for j in 0..n {
        let e = (-k * xn[j]).exp();
        let g = Vector2::new(e, -a * xn[j] * e);
        jtj += ws[j] * g * g.transpose();
        let r = yn[j] - a * e;
        ss += ws[j] * r * r;
        ss_plain += r * r;
    }
    let (se_a, se_k) = if n > 2 {
        let s2 = ss / (n - 2) as f64;
        match jtj.try_inverse() {
            Some(cov) => ((s2 * cov[(0, 0)]).max(0.0).sqrt(), (s2 * cov[(1, 1)]).max(0.0).sqrt()),
            None => (f64::INFINITY, f64::INFINITY),
        }
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    Ok(DecayFit {
        a0: sign * a * peak,
        t_dec: x_scale / k,
        stderr_a0: se_a * peak,
        stderr_t_dec: x_scale * se_k / (k * k),
        residual_rms: (ss_plain / n as f64).sqrt() * peak,
        n_points: n,
    })
}

fn log_linear_seed(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for j in 0..x.len() {
        if y[j] <= 0.0 || w[j] == 0.0 {
            continue;
        }
        // Weight by y² to undo the log's stretching of small values.
        let wj = w[j] * y[j] * y[j];
        let ly = y[j].ln();
        sw += wj;
        sx += wj * x[j];
        sy += wj * ly;
        sxx += wj * x[j] * x[j];
        sxy += wj * x[j] * ly;
    }
    let det = sw * sxx - sx * sx;
    if sw == 0.0 || det.abs() <= 1e-300 {
        return (1.0, 1.0);
    }
    let slope = (sw * sxy - sx * sy) / det;
    let icpt = (sy - slope * sx) / sw;
    let k = if slope < 0.0 { -slope } else { 1e-3 };
    (icpt.exp(), k)
}

/// `n` geometrically spaced values from `lo` to `hi`.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (n - 1) as f64;
    (0..n)
        .map(|k| if k + 1 == n { hi } else { lo * (r * k as f64).exp() })
        .collect()
}

/// Duration grid for an expected decay constant: [0.2, 2.5] × expected,
/// raised to `floor` where the pulses would not be brief, and kept at least
/// 1.5 decay constants wide.
pub fn decay_grid(expected: f64, floor: f64) -> Vec<f64> {
    let lo = (0.2 * expected).max(floor);
    let hi = (2.5 * expected).max(lo + 1.5 * expected);
    geometric_grid(lo, hi, GRID_POINTS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityFlag {
    Ok,
    /// Residual rms exceeds 10% of a0.
    HighResidual,
    /// Durations span less than 1.5 fitted decay constants.
    NarrowGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub fit: DecayFit,
    pub points: Vec<EchoMeasurement>,
    pub quality: QualityFlag,
}

pub fn quality_of(fit: &DecayFit, durations: &[f64]) -> QualityFlag {
    let span = durations.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - durations.iter().cloned().fold(f64::INFINITY, f64::min);
    if fit.residual_rms > QUALITY_RESIDUAL * fit.a0.abs() {
        QualityFlag::HighResidual
    } else if span < 1.5 * fit.t_dec {
        QualityFlag::NarrowGrid
    } else {
        QualityFlag::Ok
    }
}

/// Runs the family at every duration, reads the echo and fits its decay.
///
/// The fitted abscissa is the family parameter, so fixed delays (such as the
/// readout delay after a lock) only enter a0.
pub fn measure_decoherence_time(
    family: &SequenceFamily,
    durations: &[f64],
    spec: &EnsembleSpec,
    ion: &IonParams,
    bath: &BathParams,
    component: EchoComponent,
    method: EchoMethod,
) -> Result<Measurement> {
    if durations.len() < 3 {
        return Err(Error::TooFewPoints(durations.len()));
    }
    let spec = EnsembleSpec {
        record: RecordMode::Windows,
        ..spec.clone()
    };
    let mut points = Vec::with_capacity(durations.len());
    for &d in durations {
        let seq = family.build(d)?;
        let k = readout_for(&seq, component.readout()).ok_or_else(|| {
            Error::Sequence(format!("{} has no {} readout", family.name(), component.as_str()))
        })?;
        let r = seq.readouts()[k];
        let trace = run_ensemble(&spec, &seq, ion, bath)?;
        let mut m = extract_echo(&trace, (r.start, r.end), component, method)?;
        m.param = d;
        points.push(m);
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|m| (m.param, m.amplitude)).collect();
    let fit = fit_exponential(&xy)?;
    let quality = quality_of(&fit, durations);
    Ok(Measurement { fit, points, quality })
}

/// Two-pulse-echo measurement that turns bath parameters into a simulated T₂.
///
/// A single resonant ion is averaged over many bath realizations with a fixed
/// seed, so repeated evaluations share their random numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoProbe {
    /// Rabi frequency of the echo pulses (rad/s).
    pub chi: f64,
    pub realizations: usize,
    pub seed: u64,
    pub dt: f64,
    pub record_dt: f64,
    /// Lower bound on the sampled durations, on top of pulse brevity. Lets
    /// probes at different Rabi frequencies share one grid, which matters
    /// because bath-limited echo decay is not exactly exponential.
    pub min_duration: f64,
}

impl Default for EchoProbe {
    fn default() -> Self {
        Self {
            chi: crate::units::khz_to_rad_per_s(100.0),
            realizations: 20_000,
            seed: 0,
            dt: 50e-9,
            record_dt: 100e-9,
            min_duration: 0.0,
        }
    }
}

impl EchoProbe {
    pub fn family(&self) -> SequenceFamily {
        SequenceFamily::TwoPulseEcho { chi: self.chi }
    }

    /// Durations (2τ) sampled around an expected decay time.
    pub fn grid(&self, expected_t2: f64) -> Vec<f64> {
        decay_grid(expected_t2, self.family().min_param().max(self.min_duration))
    }

    /// Fitted in-phase echo decay time for `bath` with no other dephasing.
    pub fn measure(&self, bath: &BathParams, expected_t2: f64) -> Result<Measurement> {
        let spec = EnsembleSpec {
            n_ions: 1,
            distribution: crate::ensemble::Distribution::Delta,
            inhomogeneous_width: 0.0,
            n_bath_realizations_per_ion: self.realizations,
            seed: self.seed,
            dt: self.dt,
            record_dt: self.record_dt,
            ..EnsembleSpec::default()
        };
        measure_decoherence_time(
            &self.family(),
            &self.grid(expected_t2),
            &spec,
            &IonParams::default(),
            bath,
            EchoComponent::InPhase,
            EchoMethod::Peak,
        )
    }
}

/// Fits the decay of the coherence magnitude √(I² + Q²) inside a window,
/// with time measured from the window start.
pub fn fit_magnitude_decay(trace: &Trace, window: (f64, f64)) -> Result<DecayFit> {
    let (a, b) = window;
    let pts: Vec<(f64, f64)> = (0..trace.len())
        .filter(|&k| trace.times[k] >= a && trace.times[k] <= b)
        .map(|k| (trace.times[k] - a, trace.i[k].hypot(trace.q[k])))
        .collect();
    if pts.len() < MIN_WINDOW_SAMPLES {
        return Err(Error::ShortWindow {
            start: a,
            end: b,
            samples: pts.len(),
            needed: MIN_WINDOW_SAMPLES,
        });
    }
    fit_exponential(&pts)
}

/// Serialized summary of one decay measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub family: String,
    pub component: EchoComponent,
    pub chi_khz: f64,
    pub theta_deg: Option<f64>,
    pub t_dec_us: f64,
    pub stderr_us: f64,
    pub a0: f64,
    pub n_points: usize,
    pub quality_flag: QualityFlag,
}

impl FitReport {
    pub fn new(family: &SequenceFamily, component: EchoComponent, fit: &DecayFit, quality: QualityFlag) -> Self {
        Self {
            family: family.name().to_string(),
            component,
            chi_khz: rad_per_s_to_khz(family.chi()),
            theta_deg: family.theta().map(rad_to_deg),
            t_dec_us: s_to_us(fit.t_dec),
            stderr_us: s_to_us(fit.stderr_t_dec),
            a0: fit.a0,
            n_points: fit.n_points,
            quality_flag: quality,
        }
    }
}
