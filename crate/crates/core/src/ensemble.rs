//! Monte Carlo over an inhomogeneously broadened, bath-perturbed ensemble.
//!
//! Work items are (ion, bath realization) pairs. Their coherences are summed
//! by a fixed binary tree over item indices, so the result does not depend
//! on how many worker threads run the tree.

use std::f64::consts::TAU;
use std::io::Write;
use std::ops::Range;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::analysis::{self, DecayFit, EchoMethod};
use crate::bath::{sample_realization, BathParams, BathRealization};
use crate::bloch::{dt_max, free_evolve, BlochState, DetuningSamples, IonParams, Stepper};
use crate::error::{ensure_finite, Error, Result};
use crate::sequence::{ReadoutComponent, Sequence, SequenceFamily};

/// Items summed sequentially at the leaves of the reduction tree.
const CHUNK: usize = 16;
/// Stream id reserved for detector noise.
const NOISE_STREAM: u64 = u64::MAX;
/// Bath excursions assumed when estimating step counts, in units of δ.
const BATH_EXCURSION: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Gaussian,
    /// Lorentzian truncated at ±`cutoff` FWHM.
    LorentzianTruncated { cutoff: f64 },
    /// Every ion at the line center.
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordMode {
    /// Uniform grid over the whole sequence.
    #[default]
    Uniform,
    /// Only inside the sequence's readout windows.
    Windows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub n_ions: usize,
    /// FWHM of the static detuning distribution (rad/s).
    pub inhomogeneous_width: f64,
    pub distribution: Distribution,
    pub n_bath_realizations_per_ion: usize,
    pub seed: u64,
    /// Upper bound on the integration step (s); each ion may use a finer one.
    pub dt: f64,
    pub record_dt: f64,
    pub record: RecordMode,
    /// Standard deviation of additive Gaussian noise on I and Q.
    pub detector_noise: f64,
    /// Refuse runs whose estimated total integration steps exceed this.
    pub step_limit: f64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            n_ions: 1000,
            inhomogeneous_width: TAU * 1e6,
            distribution: Distribution::Gaussian,
            n_bath_realizations_per_ion: 8,
            seed: 0,
            dt: 50e-9,
            record_dt: 100e-9,
            record: RecordMode::Uniform,
            detector_noise: 0.0,
            step_limit: 2e10,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_ions == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if self.n_bath_realizations_per_ion == 0 {
            return Err(Error::InvalidArgument("n_bath_realizations_per_ion must be >= 1".into()));
        }
        ensure_finite(self.inhomogeneous_width, "inhomogeneous width")?;
        ensure_finite(self.dt, "ensemble dt")?;
        ensure_finite(self.record_dt, "record dt")?;
        ensure_finite(self.detector_noise, "detector noise")?;
        if self.inhomogeneous_width < 0.0 {
            return Err(Error::InvalidArgument("inhomogeneous width must be >= 0".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.record_dt < self.dt {
            return Err(Error::InvalidArgument(format!(
                "record_dt {} must be >= dt {}",
                self.record_dt, self.dt
            )));
        }
        if self.detector_noise < 0.0 {
            return Err(Error::InvalidArgument("detector noise must be >= 0".into()));
        }
        if let Distribution::LorentzianTruncated { cutoff } = self.distribution {
            if !cutoff.is_finite() || cutoff <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "Lorentzian truncation must be finite and > 0, got {cutoff}"
                )));
            }
        }
        Ok(())
    }

    /// Realizations actually run per ion (one when the bath is off).
    pub fn realizations(&self, bath: &BathParams) -> usize {
        if bath.is_off() {
            1
        } else {
            self.n_bath_realizations_per_ion
        }
    }
}

/// Static detunings at the midpoint quantiles (k + ½)/N of the distribution.
///
/// The set is exactly symmetric about zero.
pub fn detunings(spec: &EnsembleSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.n_ions;
    let fwhm = spec.inhomogeneous_width;
    let quantile: Box<dyn Fn(f64) -> f64> = match spec.distribution {
        Distribution::Delta => Box::new(|_| 0.0),
        _ if fwhm == 0.0 => Box::new(|_| 0.0),
        Distribution::Gaussian => {
            let sigma = fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt());
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Box::new(move |p| normal.inverse_cdf(p))
        }
        Distribution::LorentzianTruncated { cutoff } => {
            let gamma = 0.5 * fwhm;
            let edge = (cutoff * fwhm / gamma).atan();
            // Inverse CDF of the Cauchy law restricted to |x| <= cutoff*fwhm.
            Box::new(move |p| gamma * ((2.0 * p - 1.0) * edge).tan())
        }
    };
    let mut out = vec![0.0; n];
    for k in 0..n / 2 {
        let x = quantile((k as f64 + 0.5) / n as f64);
        out[k] = x;
        out[n - 1 - k] = -x;
    }
    Ok(out)
}

/// Ensemble-averaged demodulated coherence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub times: Vec<f64>,
    pub i: Vec<f64>,
    pub q: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Writes `t_s,I,Q` rows, preceded by `# ` comment lines.
    pub fn write_csv<W: Write>(&self, mut w: W, comments: &[String]) -> std::io::Result<()> {
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "t_s,I,Q")?;
        for k in 0..self.len() {
            writeln!(w, "{:e},{:e},{:e}", self.times[k], self.i[k], self.q[k])?;
        }
        Ok(())
    }
}

/// One ion's Bloch vector on the record grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IonTrace {
    pub times: Vec<f64>,
    pub states: Vec<BlochState>,
}

/// Record times for a sequence.
pub fn record_times(seq: &Sequence, record_dt: f64, mode: RecordMode) -> Vec<f64> {
    let total = seq.total_duration();
    let mut times = Vec::new();
    match mode {
        RecordMode::Uniform => {
            let n = (total / record_dt * (1.0 + 1e-12)).floor() as usize;
            times.extend((0..=n).map(|k| k as f64 * record_dt));
        }
        RecordMode::Windows => {
            for r in seq.readouts() {
                let n = ((r.end - r.start) / record_dt * (1.0 + 1e-12)).floor() as usize;
                times.extend((0..=n).map(|k| r.start + k as f64 * record_dt));
            }
            times.sort_by(f64::total_cmp);
            times.dedup();
        }
    }
    times
}

fn integration_dt(
    field: crate::bloch::DriveField,
    ion: &IonParams,
    max_bath: f64,
    tau_c: Option<f64>,
    cap: f64,
) -> f64 {
    cap.min(dt_max(field, ion.delta0.abs() + max_bath, ion, tau_c))
}

/// Propagates one ion through `seq`, sampling the state at `record`.
///
/// Driven segments use fixed RK4 steps no larger than `dt` (refined to the
/// stability bound where needed); free segments are propagated exactly.
pub fn run_trajectory(
    seq: &Sequence,
    ion: &IonParams,
    bath: &BathRealization,
    dt: f64,
    record: &[f64],
) -> Result<IonTrace> {
    ion.validate()?;
    ensure_finite(dt, "dt")?;
    if dt <= 0.0 {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let total = seq.total_duration();
    if !bath.is_zero() && bath.duration() < total * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "bath realization covers {:e} s but the sequence lasts {total:e} s",
            bath.duration()
        )));
    }
    let mut state = ion.equilibrium();
    if seq.segments().is_empty() {
        return Ok(IonTrace {
            times: vec![0.0],
            states: vec![state],
        });
    }
    let mut times = Vec::with_capacity(record.len());
    let mut states = Vec::with_capacity(record.len());
    let mut k = 0;
    while k < record.len() && record[k] <= 0.0 {
        times.push(record[k]);
        states.push(state);
        k += 1;
    }
    let mut t0 = 0.0;
    for seg in seq.segments() {
        let t1 = t0 + seg.duration;
        let free = seg.field.is_off();
        let h_cap = integration_dt(seg.field, ion, bath.max_abs(), bath.tau_c(), dt);
        let advance = |s: BlochState, a: f64, b: f64| -> BlochState {
            let len = b - a;
            if len <= 0.0 {
                return s;
            }
            if free {
                let phase = ion.delta0 * len + bath.integral(a, b);
                return free_evolve(s, ion, phase, len);
            }
            let n = ((len / h_cap) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
            let h = len / n as f64;
            let stepper = Stepper::new(seg.field, ion.delta0, ion, h);
            let mut s = s;
            if bath.is_zero() {
                let d = DetuningSamples::constant(0.0);
                for _ in 0..n {
                    s = stepper.step(s, d);
                }
            } else {
                let mut start = bath.at(a);
                for j in 0..n {
                    let ts = a + j as f64 * h;
                    let end = bath.at(ts + h);
                    let d = DetuningSamples {
                        start,
                        mid: bath.at(ts + 0.5 * h),
                        end,
                    };
                    s = stepper.step(s, d);
                    start = end;
                }
            }
            s
        };
        let mut t = t0;
        while k < record.len() && record[k] <= t1 {
            state = advance(state, t, record[k]);
            t = record[k].max(t);
            times.push(record[k]);
            states.push(state);
            k += 1;
        }
        state = advance(state, t, t1);
        if !state.is_finite() {
            return Err(Error::NonFinite("Bloch state after segment"));
        }
        t0 = t1;
    }
    while k < record.len() {
        times.push(record[k]);
        states.push(state);
        k += 1;
    }
    Ok(IonTrace { times, states })
}

/// Estimated RK4 steps for the whole run.
pub fn estimate_steps(spec: &EnsembleSpec, seq: &Sequence, ion_base: &IonParams, bath: &BathParams) -> Result<f64> {
    let offsets = detunings(spec)?;
    let tau_c = (!bath.is_off()).then_some(bath.tau_c);
    let max_bath = BATH_EXCURSION * bath.delta_rms;
    let mut steps = 0.0;
    for &d in &offsets {
        let ion = ion_base.with_detuning(ion_base.delta0 + d);
        for seg in seq.segments().iter().filter(|s| !s.field.is_off()) {
            let h = integration_dt(seg.field, &ion, max_bath, tau_c, spec.dt);
            steps += (seg.duration / h).ceil();
        }
    }
    Ok(steps * spec.realizations(bath) as f64)
}

fn tree_sum<F>(range: Range<usize>, leaf: &F) -> Result<Vec<Complex64>>
where
    F: Fn(usize) -> Result<Vec<Complex64>> + Sync,
{
    if range.len() <= CHUNK {
        let mut acc: Option<Vec<Complex64>> = None;
        for j in range {
            let v = leaf(j)?;
            match acc.as_mut() {
                None => acc = Some(v),
                Some(a) => a.iter_mut().zip(&v).for_each(|(x, y)| *x += y),
            }
        }
        return Ok(acc.unwrap_or_default());
    }
    let mid = range.start + range.len() / 2;
    let (a, b) = rayon::join(|| tree_sum(range.start..mid, leaf), || tree_sum(mid..range.end, leaf));
    let (mut a, b) = (a?, b?);
    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
    Ok(a)
}

/// Runs `f` on a dedicated pool of `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Mean demodulated coherence over ions and bath realizations.
pub fn run_ensemble(spec: &EnsembleSpec, seq: &Sequence, ion_base: &IonParams, bath: &BathParams) -> Result<Trace> {
    spec.validate()?;
    ion_base.validate()?;
    bath.validate()?;
    let estimated = estimate_steps(spec, seq, ion_base, bath)?;
    if estimated > spec.step_limit {
        return Err(Error::ResourceLimit {
            estimated,
            limit: spec.step_limit,
        });
    }
    let offsets = detunings(spec)?;
    let record = if seq.segments().is_empty() {
        vec![0.0]
    } else {
        record_times(seq, spec.record_dt, spec.record)
    };
    let n_rec = record.len();
    let reps = spec.realizations(bath);
    let total = seq.total_duration();
    let grid_dt = bath.max_grid_dt();
    let items = spec.n_ions * reps;

    let leaf = |j: usize| -> Result<Vec<Complex64>> {
        let ion = ion_base.with_detuning(ion_base.delta0 + offsets[j / reps]);
        let realization = if bath.is_off() {
            BathRealization::zero()
        } else {
            sample_realization(bath, total, grid_dt, spec.seed, j as u64)?
        };
        let tr = run_trajectory(seq, &ion, &realization, spec.dt, &record)?;
        Ok(tr.states.iter().map(|s| s.coherence()).collect())
    };
    let sum = tree_sum(0..items, &leaf)?;
    debug_assert_eq!(sum.len(), n_rec);

    let rot = Complex64::from_polar(1.0 / items as f64, -seq.demod_phase());
    let mut i = Vec::with_capacity(n_rec);
    let mut q = Vec::with_capacity(n_rec);
    for c in &sum {
        let z = c * rot;
        i.push(z.re);
        q.push(z.im);
    }
    if spec.detector_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(NOISE_STREAM);
        for k in 0..n_rec {
            i[k] += spec.detector_noise * rng.sample::<f64, _>(StandardNormal);
            q[k] += spec.detector_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Trace { times: record, i, q })
}

/// What a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Rabi frequency (rad/s).
    Chi,
    /// Lock phase (rad).
    Theta,
    /// The family's fixed secondary duration: the readout delay for locking
    /// families, the drive time for FID (s).
    Duration,
}

impl SweepAxis {
    pub fn apply(self, family: SequenceFamily, value: f64) -> Result<SequenceFamily> {
        match self {
            SweepAxis::Chi => Ok(family.with_chi(value)),
            SweepAxis::Theta => family
                .with_theta(value)
                .ok_or_else(|| Error::InvalidArgument(format!("{} has no lock phase", family.name()))),
            SweepAxis::Duration => match family {
                SequenceFamily::RadiationLocking { chi, theta, .. } => Ok(SequenceFamily::RadiationLocking {
                    chi,
                    theta,
                    tau_read: value,
                }),
                SequenceFamily::RlArtifact { chi, theta, .. } => Ok(SequenceFamily::RlArtifact {
                    chi,
                    theta,
                    tau_read: value,
                }),
                SequenceFamily::RlQuadratureProbe { chi, .. } => {
                    Ok(SequenceFamily::RlQuadratureProbe { chi, tau_read: value })
                }
                SequenceFamily::Fid { chi, .. } => Ok(SequenceFamily::Fid { chi, t_drive: value }),
                other => Err(Error::InvalidArgument(format!(
                    "{} has no secondary duration to sweep",
                    other.name()
                ))),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub component: analysis::EchoComponent,
    pub fit: std::result::Result<DecayFit, String>,
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub component: analysis::EchoComponent,
    pub method: EchoMethod,
    /// Durations for every point, or derived per point from `grid_for`.
    pub durations: Option<Vec<f64>>,
}

/// One decay fit per grid value. Point failures are recorded in the row.
///
/// `grid_for` supplies the duration grid for a family when
/// `opts.durations` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn sweep<G>(
    axis: SweepAxis,
    grid: &[f64],
    family: SequenceFamily,
    spec: &EnsembleSpec,
    ion: &IonParams,
    bath: &BathParams,
    opts: &SweepOptions,
    grid_for: G,
) -> Result<Vec<SweepRow>>
where
    G: Fn(&SequenceFamily) -> Vec<f64>,
{
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sweep grid"));
    }
    let up = grid.windows(2).all(|w| w[1] > w[0]);
    let down = grid.windows(2).all(|w| w[1] < w[0]);
    if !(up || down) {
        return Err(Error::InvalidArgument("sweep grid must be strictly monotone".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let fam = axis.apply(family, value)?;
        let durations = opts.durations.clone().unwrap_or_else(|| grid_for(&fam));
        let fit = analysis::measure_decoherence_time(&fam, &durations, spec, ion, bath, opts.component, opts.method)
            .map(|m| m.fit)
            .map_err(|e| e.to_string());
        rows.push(SweepRow {
            value,
            component: opts.component,
            fit,
        });
    }
    Ok(rows)
}

/// Writes `swept_value,component,decay_time_s,stderr_s,amplitude`; failed
/// points carry NaN.
pub fn write_sweep_csv<W: Write>(
    mut w: W,
    rows: &[SweepRow],
    to_external: impl Fn(f64) -> f64,
    comments: &[String],
) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "swept_value,component,decay_time_s,stderr_s,amplitude")?;
    for r in rows {
        let (t, s, a) = match &r.fit {
            Ok(f) => (f.t_dec, f.stderr_t_dec, f.a0),
            Err(_) => (f64::NAN, f64::NAN, f64::NAN),
        };
        writeln!(w, "{},{},{:e},{:e},{:e}", to_external(r.value), r.component.as_str(), t, s, a)?;
    }
    Ok(())
}

/// Readout index in `seq` that carries `component`.
pub fn readout_for(seq: &Sequence, component: ReadoutComponent) -> Option<usize> {
    let want_i = component.includes_in_phase();
    let want_q = component.includes_quadrature();
    seq.readouts()
        .iter()
        .position(|r| r.component == component)
        .or_else(|| {
            seq.readouts().iter().position(|r| {
                (!want_i || r.component.includes_in_phase()) && (!want_q || r.component.includes_quadrature())
            })
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::BathModel;
    use crate::bloch::rotate_constant;
    use crate::sequence::{self, PulseSegment};
    use crate::units::khz_to_rad_per_s as khz;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector4};
    use std::f64::consts::PI;

    /// Exact OBE propagator for a constant field: exponential of the affine
    /// 4x4 generator acting on (u, v, w, 1).
    fn obe_oracle(s: BlochState, g: &PulseSegment, ion: &IonParams) -> BlochState {
        let (cx, cy) = g.field.components();
        let d = ion.delta0;
        let (g1, g2) = (1.0 / ion.t1, 1.0 / ion.t2_markov);
        #[rustfmt::skip]
        let a = Matrix4::new(
            -g2,  d,   -cy, 0.0,
            -d,  -g2,   cx, 0.0,
             cy, -cx, -g1,  g1 * ion.w_eq,
             0.0, 0.0, 0.0, 0.0,
        );
        let r = (a * g.duration).exp() * Vector4::new(s.u, s.v, s.w, 1.0);
        BlochState::new(r[0], r[1], r[2])
    }

    fn spec(n: usize) -> EnsembleSpec {
        EnsembleSpec {
            n_ions: n,
            n_bath_realizations_per_ion: 1,
            ..EnsembleSpec::default()
        }
    }

    #[test]
    fn detunings_are_symmetric_quantiles() {
        let s = EnsembleSpec {
            n_ions: 5,
            inhomogeneous_width: 2.0 * (2.0 * 2f64.ln()).sqrt(),
            ..spec(5)
        };
        let d = detunings(&s).unwrap();
        // Unit-sigma normal quantiles at 0.1, 0.3, 0.5, 0.7, 0.9.
        let want = [-1.2815515655446004, -0.5244005127080407, 0.0, 0.5244005127080407, 1.2815515655446004];
        for (a, b) in d.iter().zip(want) {
            assert_relative_eq!(*a, b, epsilon = 1e-9);
        }
        let l = EnsembleSpec {
            distribution: Distribution::LorentzianTruncated { cutoff: 5.0 },
            inhomogeneous_width: 2.0,
            n_ions: 4,
            ..spec(4)
        };
        let d = detunings(&l).unwrap();
        assert!(d.iter().all(|x| x.abs() <= 10.0));
        assert_eq!(d[0], -d[3]);
        assert_eq!(d[1], -d[2]);
        let delta = EnsembleSpec {
            distribution: Distribution::Delta,
            ..spec(3)
        };
        assert!(detunings(&delta).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_sequence_gives_initial_state() {
        let tr = run_trajectory(&Sequence::empty(), &IonParams::default(), &BathRealization::zero(), 1e-8, &[]).unwrap();
        assert_eq!(tr.times, vec![0.0]);
        assert_eq!(tr.states, vec![BlochState::GROUND]);
    }

    #[test]
    fn pi_pulse_inverts() {
        let chi = khz(100.0);
        let seq = Sequence::new(vec![PulseSegment::drive(PI / chi, chi, 0.0).unwrap()], vec![], 0.0).unwrap();
        let end = seq.total_duration();
        let tr = run_trajectory(&seq, &IonParams::default(), &BathRealization::zero(), 1e-7, &[end]).unwrap();
        assert!((tr.states[0].w - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matches_rotation_composition() {
        let chi = khz(150.0);
        let ion = IonParams::default().with_detuning(khz(37.0));
        let segs = vec![
            PulseSegment::drive(1.3e-6, chi, 0.0).unwrap(),
            PulseSegment::free(4.1e-6).unwrap(),
            PulseSegment::drive(2.2e-6, chi, 2.0).unwrap(),
            PulseSegment::drive(0.7e-6, chi, 4.5).unwrap(),
        ];
        let seq = Sequence::new(segs.clone(), vec![], 0.0).unwrap();
        let mut s = BlochState::GROUND;
        for g in &segs {
            s = rotate_constant(s, g.field, ion.delta0, g.duration).unwrap();
        }
        let tr = run_trajectory(&seq, &ion, &BathRealization::zero(), 1e-7, &[seq.total_duration()]).unwrap();
        assert!(tr.states[0].distance(&s) <= 1e-8, "{}", tr.states[0].distance(&s));
    }

    #[test]
    fn record_points_do_not_perturb_the_trajectory() {
        let chi = khz(100.0);
        let ion = IonParams {
            t2_markov: 30e-6,
            ..IonParams::default()
        };
        let seq = sequence::two_pulse_echo(60e-6, chi).unwrap();
        let total = seq.total_duration();
        let dense = record_times(&seq, 1e-7, RecordMode::Uniform);
        let a = run_trajectory(&seq, &ion, &BathRealization::zero(), 5e-8, &dense).unwrap();
        let b = run_trajectory(&seq, &ion, &BathRealization::zero(), 5e-8, &[total]).unwrap();
        assert!(a.states.last().unwrap().distance(&b.states[0]) < 1e-9);
    }

    #[test]
    fn two_pulse_echo_matches_obe() {
        let t2 = 50e-6;
        let ion = IonParams {
            t2_markov: t2,
            ..IonParams::default()
        };
        let s = EnsembleSpec {
            distribution: Distribution::Delta,
            record: RecordMode::Windows,
            ..spec(1)
        };
        let tau = 30e-6;
        let seq = sequence::two_pulse_echo(tau, khz(500.0)).unwrap();
        let tr = run_ensemble(&s, &seq, &ion, &BathParams::off()).unwrap();
        let te = seq.readouts()[0].echo_time;
        let k = tr.times.iter().position(|&t| (t - te).abs() < 0.5 * s.record_dt).unwrap();
        let mut r = BlochState::GROUND;
        let mut t = 0.0;
        for g in &seq.segments()[..3] {
            r = obe_oracle(r, g, &ion);
            t += g.duration;
        }
        let tail = PulseSegment::free(tr.times[k] - t).unwrap();
        r = obe_oracle(r, &tail, &ion);
        assert!((tr.i[k] - r.v).abs() < 1e-4, "{} vs {}", tr.i[k], r.v);
        // Close to the plain exponential, since the pulses are short.
        assert!((tr.i[k] - (-2.0 * tau / t2).exp()).abs() < 0.03);
    }

    #[test]
    fn zero_ions_is_an_error() {
        let s = spec(0);
        let seq = sequence::rotary_echo(10e-6, khz(100.0)).unwrap();
        assert!(matches!(
            run_ensemble(&s, &seq, &IonParams::default(), &BathParams::off()),
            Err(Error::EmptyEnsemble)
        ));
    }

    #[test]
    fn resource_guard() {
        let s = EnsembleSpec {
            step_limit: 1e3,
            ..spec(100)
        };
        let seq = sequence::rotary_echo(100e-6, khz(100.0)).unwrap();
        match run_ensemble(&s, &seq, &IonParams::default(), &BathParams::off()) {
            Err(Error::ResourceLimit { estimated, .. }) => assert!(estimated > 1e3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ensemble_is_mean_of_trajectories() {
        let chi = khz(200.0);
        let bath = BathParams::new(khz(10.0), 5e-6, BathModel::GaussMarkov).unwrap();
        let s = EnsembleSpec {
            n_ions: 3,
            inhomogeneous_width: khz(300.0),
            n_bath_realizations_per_ion: 2,
            seed: 9,
            ..EnsembleSpec::default()
        };
        let seq = sequence::rotary_echo(20e-6, chi).unwrap();
        let tr = run_ensemble(&s, &seq, &IonParams::default(), &bath).unwrap();
        let offsets = detunings(&s).unwrap();
        let rec = record_times(&seq, s.record_dt, s.record);
        let mut acc = vec![Complex64::new(0.0, 0.0); rec.len()];
        for j in 0..6 {
            let ion = IonParams::default().with_detuning(offsets[j / 2]);
            let r = sample_realization(&bath, seq.total_duration(), bath.max_grid_dt(), 9, j as u64).unwrap();
            let t = run_trajectory(&seq, &ion, &r, s.dt, &rec).unwrap();
            for (a, st) in acc.iter_mut().zip(&t.states) {
                *a += st.coherence();
            }
        }
        for k in 0..rec.len() {
            let z = acc[k] / 6.0;
            assert!((z.re - tr.i[k]).abs() < 1e-14 && (z.im - tr.q[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn detector_noise_is_reproducible() {
        let s = EnsembleSpec {
            detector_noise: 0.01,
            seed: 4,
            ..spec(1)
        };
        let seq = sequence::rotary_echo(10e-6, khz(100.0)).unwrap();
        let a = run_ensemble(&s, &seq, &IonParams::default(), &BathParams::off()).unwrap();
        let b = run_ensemble(&s, &seq, &IonParams::default(), &BathParams::off()).unwrap();
        assert_eq!(a, b);
        let clean = run_ensemble(&spec(1), &seq, &IonParams::default(), &BathParams::off()).unwrap();
        assert_ne!(a.i, clean.i);
    }

    #[test]
    fn csv_header() {
        let t = Trace {
            times: vec![0.0, 1e-6],
            i: vec![0.0, 0.5],
            q: vec![0.0, -0.25],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &["seed=1".into()]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# seed=1");
        assert_eq!(lines[1], "t_s,I,Q");
        assert_eq!(lines.len(), 4);
    }
}
