//! Conversions between the external units (kHz of ordinary frequency, µs,
//! degrees) and the internal ones (rad/s, s, rad).

use std::f64::consts::TAU;

pub fn khz_to_rad_per_s(khz: f64) -> f64 {
    TAU * khz * 1e3
}

pub fn rad_per_s_to_khz(omega: f64) -> f64 {
    omega / (TAU * 1e3)
}

pub fn us_to_s(us: f64) -> f64 {
    us * 1e-6
}

pub fn s_to_us(s: f64) -> f64 {
    s * 1e6
}

pub fn deg_to_rad(deg: f64) -> f64 {
    deg.to_radians()
}

pub fn rad_to_deg(rad: f64) -> f64 {
    rad.to_degrees()
}

/// Wraps an angle into [0, 2π).
pub fn normalize_phase(phase: f64) -> f64 {
    let p = phase.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if p >= TAU {
        0.0
    } else {
        p
    }
}
