//! Piecewise-constant pulse protocols with declared readout windows.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::bloch::DriveField;
use crate::error::{ensure_finite, Error, Result};
use crate::units::{deg_to_rad, khz_to_rad_per_s, normalize_phase, rad_per_s_to_khz, rad_to_deg, s_to_us, us_to_s};

/// Gap between the refocusing pulse and the echo in locking sequences.
pub const DEFAULT_TAU_READ: f64 = 10e-6;
/// A 2PE π pulse may be at most this fraction of the pulse separation.
pub const TWO_PULSE_BREVITY: f64 = 0.1;
/// A locking-sequence π pulse may be at most this fraction of the lock.
pub const LOCK_BREVITY: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseSegment {
    pub duration: f64,
    pub field: DriveField,
}

impl PulseSegment {
    pub fn new(duration: f64, field: DriveField) -> Result<Self> {
        ensure_finite(duration, "segment duration")?;
        if duration < 0.0 {
            return Err(Error::Sequence(format!("segment duration must be >= 0, got {duration}")));
        }
        Ok(Self { duration, field })
    }

    pub fn free(duration: f64) -> Result<Self> {
        Self::new(duration, DriveField::off())
    }

    pub fn drive(duration: f64, chi: f64, phase: f64) -> Result<Self> {
        Self::new(duration, DriveField::new(chi, phase)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutComponent {
    InPhase,
    Quadrature,
    Both,
}

impl ReadoutComponent {
    pub fn includes_in_phase(self) -> bool {
        matches!(self, ReadoutComponent::InPhase | ReadoutComponent::Both)
    }

    pub fn includes_quadrature(self) -> bool {
        matches!(self, ReadoutComponent::Quadrature | ReadoutComponent::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Readout {
    pub start: f64,
    pub end: f64,
    pub echo_time: f64,
    pub component: ReadoutComponent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    segments: Vec<PulseSegment>,
    readouts: Vec<Readout>,
    demod_phase: f64,
}

impl Sequence {
    pub fn new(segments: Vec<PulseSegment>, readouts: Vec<Readout>, demod_phase: f64) -> Result<Self> {
        ensure_finite(demod_phase, "demodulation phase")?;
        let s = Self {
            segments,
            readouts,
            demod_phase: normalize_phase(demod_phase),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn empty() -> Self {
        Self {
            segments: Vec::new(),
            readouts: Vec::new(),
            demod_phase: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let total = self.total_duration();
        let slack = 1e-12 * total.max(1e-9);
        for (k, r) in self.readouts.iter().enumerate() {
            for x in [r.start, r.end, r.echo_time] {
                ensure_finite(x, "readout time")?;
            }
            if r.start < -slack || r.end > total + slack || r.start > r.end {
                return Err(Error::Sequence(format!(
                    "readout {k} window [{:e}, {:e}] s is not inside [0, {total:e}] s",
                    r.start, r.end
                )));
            }
            if r.echo_time < r.start - slack || r.echo_time > r.end + slack {
                return Err(Error::Sequence(format!(
                    "readout {k} echo time {:e} s lies outside its window",
                    r.echo_time
                )));
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> &[PulseSegment] {
        &self.segments
    }

    pub fn readouts(&self) -> &[Readout] {
        &self.readouts
    }

    pub fn demod_phase(&self) -> f64 {
        self.demod_phase
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Start time of every segment, plus the end time as the last entry.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut t = 0.0;
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        out.push(0.0);
        for s in &self.segments {
            t += s.duration;
            out.push(t);
        }
        out
    }

    /// Total driven time, a proxy for integration cost.
    pub fn driven_duration(&self) -> f64 {
        self.segments.iter().filter(|s| !s.field.is_off()).map(|s| s.duration).sum()
    }
}

fn check_chi(chi: f64) -> Result<()> {
    ensure_finite(chi, "Rabi frequency")?;
    if chi <= 0.0 {
        return Err(Error::Sequence(format!("Rabi frequency must be > 0, got {chi}")));
    }
    Ok(())
}

fn check_positive(x: f64, what: &'static str) -> Result<()> {
    ensure_finite(x, what)?;
    if x <= 0.0 {
        return Err(Error::Sequence(format!("{what} must be > 0, got {x}")));
    }
    Ok(())
}

/// π/2 – τ – π – (1.25 τ) with the echo at twice the pulse-center spacing.
pub fn two_pulse_echo(tau: f64, chi: f64) -> Result<Sequence> {
    check_chi(chi)?;
    check_positive(tau, "pulse separation")?;
    let w = FRAC_PI_2 / chi;
    let pi = 2.0 * w;
    if pi > TWO_PULSE_BREVITY * tau {
        return Err(Error::PulsesNotBrief {
            pulse: pi,
            limit: TWO_PULSE_BREVITY * tau,
        });
    }
    let segments = vec![
        PulseSegment::drive(w, chi, 0.0)?,
        PulseSegment::free(tau)?,
        PulseSegment::drive(pi, chi, 0.0)?,
        PulseSegment::free(1.25 * tau)?,
    ];
    let first_center = 0.5 * w;
    let second_center = w + tau + 0.5 * pi;
    let echo = second_center + (second_center - first_center);
    let half = 0.1 * tau;
    let readouts = vec![Readout {
        start: echo - half,
        end: echo + half,
        echo_time: echo,
        component: ReadoutComponent::Both,
    }];
    Sequence::new(segments, readouts, FRAC_PI_2)
}

/// Two oppositely phased pulses of `total_drive / 2` each.
pub fn rotary_echo(total_drive: f64, chi: f64) -> Result<Sequence> {
    check_chi(chi)?;
    check_positive(total_drive, "total drive time")?;
    let half = 0.5 * total_drive;
    let segments = vec![PulseSegment::drive(half, chi, 0.0)?, PulseSegment::drive(half, chi, PI)?];
    // The last half Rabi period: a single nutation lobe, clear of the phase switch.
    let span = (PI / chi).min(0.45 * total_drive);
    let readouts = vec![Readout {
        start: total_drive - span,
        end: total_drive,
        echo_time: total_drive,
        component: ReadoutComponent::Quadrature,
    }];
    Sequence::new(segments, readouts, 0.0)
}

fn lock_tail(
    mut segments: Vec<PulseSegment>,
    lock_end: f64,
    chi: f64,
    tau_read: f64,
    component: ReadoutComponent,
    theta: f64,
) -> Result<Sequence> {
    let pi = PI / chi;
    segments.push(PulseSegment::free(tau_read)?);
    segments.push(PulseSegment::drive(pi, chi, 0.0)?);
    segments.push(PulseSegment::free(1.5 * tau_read)?);
    let echo = lock_end + 2.0 * tau_read + pi;
    let half = 0.4 * tau_read;
    let readouts = vec![Readout {
        start: echo - half,
        end: echo + half,
        echo_time: echo,
        component,
    }];
    Sequence::new(segments, readouts, -theta)
}

fn check_lock(t_lock: f64, chi: f64, tau_read: f64) -> Result<()> {
    check_chi(chi)?;
    check_positive(t_lock, "lock duration")?;
    check_positive(tau_read, "readout delay")?;
    let pi = PI / chi;
    if pi > LOCK_BREVITY * t_lock {
        return Err(Error::PulsesNotBrief {
            pulse: pi,
            limit: LOCK_BREVITY * t_lock,
        });
    }
    if pi > tau_read {
        return Err(Error::PulsesNotBrief {
            pulse: pi,
            limit: tau_read,
        });
    }
    Ok(())
}

/// π/2 pulse, lock at phase θ, free `tau_read`, refocusing π pulse, echo
/// `tau_read` after the π-pulse center. Demodulated so that I is the
/// component parallel to the (refocused) locking field.
pub fn radiation_locking(t_lock: f64, chi: f64, theta: f64, tau_read: f64) -> Result<Sequence> {
    check_lock(t_lock, chi, tau_read)?;
    ensure_finite(theta, "lock phase")?;
    let theta = normalize_phase(theta);
    let w = FRAC_PI_2 / chi;
    let segments = vec![PulseSegment::drive(w, chi, 0.0)?, PulseSegment::drive(t_lock, chi, theta)?];
    lock_tail(segments, w + t_lock, chi, tau_read, ReadoutComponent::InPhase, theta)
}

/// [`radiation_locking`] with the π/2 pulse replaced by an equal free delay.
pub fn radiation_locking_artifact(t_lock: f64, chi: f64, theta: f64, tau_read: f64) -> Result<Sequence> {
    check_lock(t_lock, chi, tau_read)?;
    ensure_finite(theta, "lock phase")?;
    let theta = normalize_phase(theta);
    let w = FRAC_PI_2 / chi;
    let segments = vec![PulseSegment::free(w)?, PulseSegment::drive(t_lock, chi, theta)?];
    lock_tail(segments, w + t_lock, chi, tau_read, ReadoutComponent::Both, theta)
}

/// Locking at 90° whose phase inverts to 270° half way through the lock.
///
/// Readouts: the quadrature rotary echo at the end of the lock, then the
/// in-phase locking echo.
pub fn rl_quadrature_probe(t_lock: f64, chi: f64, tau_read: f64) -> Result<Sequence> {
    check_lock(t_lock, chi, tau_read)?;
    let theta = FRAC_PI_2;
    let w = FRAC_PI_2 / chi;
    let half = 0.5 * t_lock;
    let segments = vec![
        PulseSegment::drive(w, chi, 0.0)?,
        PulseSegment::drive(half, chi, theta)?,
        PulseSegment::drive(half, chi, theta + PI)?,
    ];
    let lock_end = w + t_lock;
    let mut seq = lock_tail(segments, lock_end, chi, tau_read, ReadoutComponent::InPhase, theta)?;
    let span = (PI / chi).min(0.45 * t_lock);
    seq.readouts.insert(
        0,
        Readout {
            start: lock_end - span,
            end: lock_end,
            echo_time: lock_end,
            component: ReadoutComponent::Quadrature,
        },
    );
    seq.validate()?;
    Ok(seq)
}

/// Drive at phase 0 for `t_drive`, then observe the free decay.
pub fn free_induction_decay(chi: f64, t_drive: f64, t_observe: f64) -> Result<Sequence> {
    ensure_finite(chi, "Rabi frequency")?;
    if chi < 0.0 {
        return Err(Error::Sequence(format!("Rabi frequency must be >= 0, got {chi}")));
    }
    check_positive(t_drive, "drive duration")?;
    check_positive(t_observe, "observation time")?;
    let segments = vec![PulseSegment::drive(t_drive, chi, 0.0)?, PulseSegment::free(t_observe)?];
    let readouts = vec![Readout {
        start: t_drive,
        end: t_drive + t_observe,
        echo_time: t_drive,
        component: ReadoutComponent::Both,
    }];
    Sequence::new(segments, readouts, 0.0)
}

/// A protocol with one free parameter (the evolution duration that is varied
/// in a decay measurement).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SequenceFamily {
    /// Parameter: 2τ.
    TwoPulseEcho { chi: f64 },
    /// Parameter: total drive time.
    RotaryEcho { chi: f64 },
    /// Parameter: lock duration.
    RadiationLocking { chi: f64, theta: f64, tau_read: f64 },
    /// Parameter: lock duration.
    RlArtifact { chi: f64, theta: f64, tau_read: f64 },
    /// Parameter: lock duration.
    RlQuadratureProbe { chi: f64, tau_read: f64 },
    /// Parameter: observation time.
    Fid { chi: f64, t_drive: f64 },
}

impl SequenceFamily {
    pub fn build(&self, param: f64) -> Result<Sequence> {
        match *self {
            SequenceFamily::TwoPulseEcho { chi } => two_pulse_echo(0.5 * param, chi),
            SequenceFamily::RotaryEcho { chi } => rotary_echo(param, chi),
            SequenceFamily::RadiationLocking { chi, theta, tau_read } => {
                radiation_locking(param, chi, theta, tau_read)
            }
            SequenceFamily::RlArtifact { chi, theta, tau_read } => {
                radiation_locking_artifact(param, chi, theta, tau_read)
            }
            SequenceFamily::RlQuadratureProbe { chi, tau_read } => rl_quadrature_probe(param, chi, tau_read),
            SequenceFamily::Fid { chi, t_drive } => free_induction_decay(chi, t_drive, param),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SequenceFamily::TwoPulseEcho { .. } => "two-pulse-echo",
            SequenceFamily::RotaryEcho { .. } => "rotary-echo",
            SequenceFamily::RadiationLocking { .. } => "radiation-locking",
            SequenceFamily::RlArtifact { .. } => "rl-artifact",
            SequenceFamily::RlQuadratureProbe { .. } => "rl-quadrature-probe",
            SequenceFamily::Fid { .. } => "fid",
        }
    }

    pub fn chi(&self) -> f64 {
        match *self {
            SequenceFamily::TwoPulseEcho { chi }
            | SequenceFamily::RotaryEcho { chi }
            | SequenceFamily::RadiationLocking { chi, .. }
            | SequenceFamily::RlArtifact { chi, .. }
            | SequenceFamily::RlQuadratureProbe { chi, .. }
            | SequenceFamily::Fid { chi, .. } => chi,
        }
    }

    pub fn theta(&self) -> Option<f64> {
        match *self {
            SequenceFamily::RadiationLocking { theta, .. } | SequenceFamily::RlArtifact { theta, .. } => Some(theta),
            SequenceFamily::RlQuadratureProbe { .. } => Some(FRAC_PI_2),
            _ => None,
        }
    }

    pub fn with_chi(mut self, new_chi: f64) -> Self {
        match &mut self {
            SequenceFamily::TwoPulseEcho { chi }
            | SequenceFamily::RotaryEcho { chi }
            | SequenceFamily::RadiationLocking { chi, .. }
            | SequenceFamily::RlArtifact { chi, .. }
            | SequenceFamily::RlQuadratureProbe { chi, .. }
            | SequenceFamily::Fid { chi, .. } => *chi = new_chi,
        }
        self
    }

    /// Returns `None` for families without a lock phase.
    pub fn with_theta(mut self, new_theta: f64) -> Option<Self> {
        match &mut self {
            SequenceFamily::RadiationLocking { theta, .. } | SequenceFamily::RlArtifact { theta, .. } => {
                *theta = normalize_phase(new_theta);
                Some(self)
            }
            _ => None,
        }
    }

    /// Component carrying the family's signal.
    pub fn default_component(&self) -> ReadoutComponent {
        match self {
            SequenceFamily::TwoPulseEcho { .. } => ReadoutComponent::InPhase,
            SequenceFamily::RotaryEcho { .. } => ReadoutComponent::Quadrature,
            SequenceFamily::RadiationLocking { .. } | SequenceFamily::RlQuadratureProbe { .. } => {
                ReadoutComponent::InPhase
            }
            SequenceFamily::RlArtifact { .. } => ReadoutComponent::Quadrature,
            SequenceFamily::Fid { .. } => ReadoutComponent::Both,
        }
    }

    /// Smallest parameter value for which the pulses count as brief.
    pub fn min_param(&self) -> f64 {
        match *self {
            SequenceFamily::TwoPulseEcho { chi } => 2.0 * (PI / chi) / TWO_PULSE_BREVITY,
            SequenceFamily::RadiationLocking { chi, .. }
            | SequenceFamily::RlArtifact { chi, .. }
            | SequenceFamily::RlQuadratureProbe { chi, .. } => (PI / chi) / LOCK_BREVITY,
            SequenceFamily::RotaryEcho { .. } | SequenceFamily::Fid { .. } => 0.0,
        }
    }
}

/// External form of a segment (µs, kHz, degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentDoc {
    pub duration_us: f64,
    #[serde(default)]
    pub chi_khz: f64,
    #[serde(default)]
    pub phase_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutDoc {
    pub start_us: f64,
    pub end_us: f64,
    pub echo_time_us: f64,
    pub component: ReadoutComponent,
}

/// External form of a [`Sequence`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceDoc {
    pub segments: Vec<SegmentDoc>,
    #[serde(default)]
    pub readouts: Vec<ReadoutDoc>,
    #[serde(default)]
    pub demod_phase_deg: f64,
}

impl From<&Sequence> for SequenceDoc {
    fn from(s: &Sequence) -> Self {
        SequenceDoc {
            segments: s
                .segments
                .iter()
                .map(|g| SegmentDoc {
                    duration_us: s_to_us(g.duration),
                    chi_khz: rad_per_s_to_khz(g.field.chi()),
                    phase_deg: rad_to_deg(g.field.phase()),
                })
                .collect(),
            readouts: s
                .readouts
                .iter()
                .map(|r| ReadoutDoc {
                    start_us: s_to_us(r.start),
                    end_us: s_to_us(r.end),
                    echo_time_us: s_to_us(r.echo_time),
                    component: r.component,
                })
                .collect(),
            demod_phase_deg: rad_to_deg(s.demod_phase),
        }
    }
}

impl TryFrom<&SequenceDoc> for Sequence {
    type Error = Error;

    fn try_from(d: &SequenceDoc) -> Result<Self> {
        let segments = d
            .segments
            .iter()
            .map(|g| PulseSegment::drive(us_to_s(g.duration_us), khz_to_rad_per_s(g.chi_khz), deg_to_rad(g.phase_deg)))
            .collect::<Result<Vec<_>>>()?;
        let readouts = d
            .readouts
            .iter()
            .map(|r| Readout {
                start: us_to_s(r.start_us),
                end: us_to_s(r.end_us),
                echo_time: us_to_s(r.echo_time_us),
                component: r.component,
            })
            .collect();
        Sequence::new(segments, readouts, deg_to_rad(d.demod_phase_deg))
    }
}
