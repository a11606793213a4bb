//! Single-ion Bloch-vector propagation in the frame rotating with the drive.
//!
//! Conventions: the drive at phase φ with angular Rabi frequency χ and the
//! detuning Δ enter the damped Bloch equations as
//!
//! ```text
//! du/dt =  Δ·v − χ·sinφ·w − u/T₂
//! dv/dt = −Δ·u + χ·cosφ·w − v/T₂
//! dw/dt =  χ·sinφ·u − χ·cosφ·v − (w − w_eq)/T₁
//! ```
//!
//! so that a phase-0 drive tips the ground state (0, 0, −1) toward −v.
//! Without relaxation this is a right-handed rotation about the vector
//! −(χ·cosφ, χ·sinφ, Δ).

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::units::normalize_phase;

/// Steps per shortest characteristic period.
pub const STEPS_PER_PERIOD: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlochState {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl BlochState {
    pub const GROUND: BlochState = BlochState {
        u: 0.0,
        v: 0.0,
        w: -1.0,
    };

    pub const fn new(u: f64, v: f64, w: f64) -> Self {
        Self { u, v, w }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.u * self.u + self.v * self.v + self.w * self.w
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Transverse coherence u + i·v.
    pub fn coherence(&self) -> Complex64 {
        Complex64::new(self.u, self.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite() && self.w.is_finite()
    }

    fn axpy(self, a: f64, k: BlochState) -> BlochState {
        BlochState::new(self.u + a * k.u, self.v + a * k.v, self.w + a * k.w)
    }

    pub fn distance(&self, other: &BlochState) -> f64 {
        let d = BlochState::new(self.u - other.u, self.v - other.v, self.w - other.w);
        d.norm()
    }
}

/// A constant optical drive: angular Rabi frequency (rad/s) and phase (rad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveField {
    chi: f64,
    phase: f64,
}

impl DriveField {
    pub fn new(chi: f64, phase: f64) -> Result<Self> {
        ensure_finite(chi, "drive Rabi frequency")?;
        ensure_finite(phase, "drive phase")?;
        if chi < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "Rabi frequency must be >= 0, got {chi}"
            )));
        }
        Ok(Self {
            chi,
            phase: normalize_phase(phase),
        })
    }

    /// No drive (free evolution).
    pub const fn off() -> Self {
        Self {
            chi: 0.0,
            phase: 0.0,
        }
    }

    pub fn chi(&self) -> f64 {
        self.chi
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    pub fn is_off(&self) -> bool {
        self.chi == 0.0
    }

    /// (χ·cosφ, χ·sinφ)
    pub fn components(&self) -> (f64, f64) {
        let (s, c) = self.phase.sin_cos();
        (self.chi * c, self.chi * s)
    }
}

/// Per-ion static detuning and Markovian relaxation.
///
/// `t1` and `t2_markov` may be `f64::INFINITY` to switch the corresponding
/// damping off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonParams {
    pub delta0: f64,
    pub t1: f64,
    pub t2_markov: f64,
    pub w_eq: f64,
}

impl Default for IonParams {
    fn default() -> Self {
        Self {
            delta0: 0.0,
            t1: f64::INFINITY,
            t2_markov: f64::INFINITY,
            w_eq: -1.0,
        }
    }
}

impl IonParams {
    pub fn new(delta0: f64, t1: f64, t2_markov: f64, w_eq: f64) -> Result<Self> {
        let p = Self {
            delta0,
            t1,
            t2_markov,
            w_eq,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite(self.delta0, "ion detuning")?;
        ensure_finite(self.w_eq, "equilibrium inversion")?;
        if self.t1.is_nan() || self.t1 <= 0.0 {
            return Err(Error::InvalidArgument(format!("T1 must be > 0, got {}", self.t1)));
        }
        if self.t2_markov.is_nan() || self.t2_markov <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "T2 must be > 0, got {}",
                self.t2_markov
            )));
        }
        if self.t1.is_finite() && self.t2_markov > 2.0 * self.t1 {
            return Err(Error::InvalidArgument(format!(
                "T2 = {} exceeds 2*T1 = {}",
                self.t2_markov,
                2.0 * self.t1
            )));
        }
        if !(-1.0..=1.0).contains(&self.w_eq) {
            return Err(Error::InvalidArgument(format!(
                "w_eq must lie in [-1, 1], got {}",
                self.w_eq
            )));
        }
        Ok(())
    }

    pub fn with_detuning(mut self, delta0: f64) -> Self {
        self.delta0 = delta0;
        self
    }

    pub fn gamma1(&self) -> f64 {
        1.0 / self.t1
    }

    pub fn gamma2(&self) -> f64 {
        1.0 / self.t2_markov
    }

    pub fn equilibrium(&self) -> BlochState {
        BlochState::new(0.0, 0.0, self.w_eq)
    }
}

/// Exact relaxation-free propagation under a constant field and detuning
/// (Rodrigues rotation).
pub fn rotate_constant(
    state: BlochState,
    field: DriveField,
    delta: f64,
    dt: f64,
) -> Result<BlochState> {
    if !state.is_finite() {
        return Err(Error::NonFinite("Bloch state"));
    }
    ensure_finite(delta, "detuning")?;
    ensure_finite(dt, "time step")?;
    if dt < 0.0 {
        return Err(Error::InvalidArgument(format!("dt must be >= 0, got {dt}")));
    }
    let (cx, cy) = field.components();
    let omega = (cx * cx + cy * cy + delta * delta).sqrt();
    if omega == 0.0 || dt == 0.0 {
        return Ok(state);
    }
    let (kx, ky, kz) = (-cx / omega, -cy / omega, -delta / omega);
    let (sin, cos) = (omega * dt).sin_cos();
    let (u, v, w) = (state.u, state.v, state.w);
    let kdotr = kx * u + ky * v + kz * w;
    let cross = (ky * w - kz * v, kz * u - kx * w, kx * v - ky * u);
    let one_m_cos = 1.0 - cos;
    Ok(BlochState::new(
        u * cos + cross.0 * sin + kx * kdotr * one_m_cos,
        v * cos + cross.1 * sin + ky * kdotr * one_m_cos,
        w * cos + cross.2 * sin + kz * kdotr * one_m_cos,
    ))
}

/// Right-hand side of the damped Bloch equations.
pub fn derivative(state: BlochState, field: DriveField, delta: f64, ion: &IonParams) -> BlochState {
    Rates::new(field, ion).eval(state, delta)
}

/// Coefficients of the Bloch equations for one constant-field segment.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Rates {
    cx: f64,
    cy: f64,
    g1: f64,
    g2: f64,
    w_eq: f64,
}

impl Rates {
    pub(crate) fn new(field: DriveField, ion: &IonParams) -> Self {
        let (cx, cy) = field.components();
        Self {
            cx,
            cy,
            g1: ion.gamma1(),
            g2: ion.gamma2(),
            w_eq: ion.w_eq,
        }
    }

    #[inline(always)]
    pub(crate) fn eval(&self, r: BlochState, delta: f64) -> BlochState {
        BlochState::new(
            delta * r.v - self.cy * r.w - self.g2 * r.u,
            -delta * r.u + self.cx * r.w - self.g2 * r.v,
            self.cy * r.u - self.cx * r.v - self.g1 * (r.w - self.w_eq),
        )
    }
}

type Mat3 = [[f64; 3]; 3];

#[inline(always)]
fn apply(m: &Mat3, r: BlochState) -> BlochState {
    BlochState::new(
        m[0][0] * r.u + m[0][1] * r.v + m[0][2] * r.w,
        m[1][0] * r.u + m[1][1] * r.v + m[1][2] * r.w,
        m[2][0] * r.u + m[2][1] * r.v + m[2][2] * r.w,
    )
}

/// Matrix of the rotation generated by the drive and detuning over `t`.
fn rotation_matrix(field: DriveField, delta: f64, t: f64) -> Mat3 {
    let (cx, cy) = field.components();
    let omega = (cx * cx + cy * cy + delta * delta).sqrt();
    if omega == 0.0 || t == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = [-cx / omega, -cy / omega, -delta / omega];
    let (s, c) = (omega * t).sin_cos();
    let oc = 1.0 - c;
    [
        [c + k[0] * k[0] * oc, k[0] * k[1] * oc - k[2] * s, k[0] * k[2] * oc + k[1] * s],
        [k[1] * k[0] * oc + k[2] * s, c + k[1] * k[1] * oc, k[1] * k[2] * oc - k[0] * s],
        [k[2] * k[0] * oc - k[1] * s, k[2] * k[1] * oc + k[0] * s, c + k[2] * k[2] * oc],
    ]
}

/// Fixed-step integrator for one constant-field segment.
///
/// Integrating-factor RK4: the rotation by the drive and the constant part
/// of the detuning is applied exactly, and classical RK4 handles the
/// remainder (detuning excursions and relaxation) in that rotating frame.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stepper {
    h: f64,
    half: Mat3,
    full: Mat3,
    g1: f64,
    g2: f64,
    w_eq: f64,
}

impl Stepper {
    /// `delta_ref` is the detuning absorbed into the exact rotation; samples
    /// passed to [`Stepper::step`] are excursions from it.
    pub(crate) fn new(field: DriveField, delta_ref: f64, ion: &IonParams, h: f64) -> Self {
        Self {
            h,
            half: rotation_matrix(field, delta_ref, 0.5 * h),
            full: rotation_matrix(field, delta_ref, h),
            g1: ion.gamma1(),
            g2: ion.gamma2(),
            w_eq: ion.w_eq,
        }
    }

    #[inline(always)]
    fn rest(&self, r: BlochState, d: f64) -> BlochState {
        BlochState::new(
            d * r.v - self.g2 * r.u,
            -d * r.u - self.g2 * r.v,
            -self.g1 * (r.w - self.w_eq),
        )
    }

    #[inline(always)]
    pub(crate) fn step(&self, r: BlochState, d: DetuningSamples) -> BlochState {
        let h = self.h;
        let e_r = apply(&self.half, r);
        let e2_r = apply(&self.full, r);
        let k1 = self.rest(r, d.start);
        let k2 = self.rest(e_r.axpy(0.5 * h, apply(&self.half, k1)), d.mid);
        let k3 = self.rest(e_r.axpy(0.5 * h, k2), d.mid);
        let k4 = self.rest(e2_r.axpy(h, apply(&self.half, k3)), d.end);
        let e2_k1 = apply(&self.full, k1);
        let mid = apply(&self.half, BlochState::new(k2.u + k3.u, k2.v + k3.v, k2.w + k3.w));
        let s = h / 6.0;
        BlochState::new(
            e2_r.u + s * (e2_k1.u + 2.0 * mid.u + k4.u),
            e2_r.v + s * (e2_k1.v + 2.0 * mid.v + k4.v),
            e2_r.w + s * (e2_k1.w + 2.0 * mid.w + k4.w),
        )
    }
}

/// Detuning (rad/s) at the three RK4 sample points of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetuningSamples {
    pub start: f64,
    pub mid: f64,
    pub end: f64,
}

impl DetuningSamples {
    pub fn constant(delta: f64) -> Self {
        Self {
            start: delta,
            mid: delta,
            end: delta,
        }
    }

    fn max_abs(&self) -> f64 {
        self.start.abs().max(self.mid.abs()).max(self.end.abs())
    }
}

/// Largest admissible integration step: 1/50 of the shortest of the
/// generalized Rabi period, the bath correlation time and T₂.
pub fn dt_max(field: DriveField, max_abs_delta: f64, ion: &IonParams, tau_c: Option<f64>) -> f64 {
    let chi = field.chi();
    let omega = (chi * chi + max_abs_delta * max_abs_delta).sqrt();
    let mut shortest = f64::INFINITY;
    if omega > 0.0 {
        shortest = shortest.min(TAU / omega);
    }
    if let Some(tc) = tau_c {
        shortest = shortest.min(tc);
    }
    shortest = shortest.min(ion.t2_markov).min(ion.t1);
    shortest / STEPS_PER_PERIOD
}

/// One fourth-order step. The step must respect [`dt_max`].
///
/// The midpoint detuning is treated exactly; for constant detuning without
/// relaxation the result equals [`rotate_constant`] to rounding.
pub fn step(
    state: BlochState,
    field: DriveField,
    delta: DetuningSamples,
    ion: &IonParams,
    dt: f64,
) -> Result<BlochState> {
    ensure_finite(dt, "time step")?;
    if dt <= 0.0 {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    if !(delta.start.is_finite() && delta.mid.is_finite() && delta.end.is_finite()) {
        return Err(Error::NonFinite("detuning samples"));
    }
    let limit = dt_max(field, delta.max_abs(), ion, None);
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { dt, dt_max: limit });
    }
    let m = delta.mid;
    let excursion = DetuningSamples {
        start: delta.start - m,
        mid: 0.0,
        end: delta.end - m,
    };
    Ok(Stepper::new(field, m, ion, dt).step(state, excursion))
}

/// Exact free evolution (no drive) given the accumulated phase ∫Δ dt over
/// an interval of length `dt`.
pub fn free_evolve(state: BlochState, ion: &IonParams, phase_integral: f64, dt: f64) -> BlochState {
    let decay = (-dt * ion.gamma2()).exp();
    let c = state.coherence() * Complex64::from_polar(decay, -phase_integral);
    let w = ion.w_eq + (state.w - ion.w_eq) * (-dt * ion.gamma1()).exp();
    BlochState::new(c.re, c.im, w)
}
