//! Unit conversions between SI and the lab units used in reports.

/// Boltzmann constant, J/K (exact SI value).
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Mass of a Rb-87 atom, kg.
pub const RB87_MASS: f64 = 1.443_16e-25;
/// Standard gravity, m/s².
pub const STANDARD_GRAVITY: f64 = 9.806_65;

pub const MICRO: f64 = 1e-6;
pub const MILLI: f64 = 1e-3;
pub const NANO: f64 = 1e-9;

pub fn nk_to_joule(nk: f64) -> f64 {
    nk * NANO * BOLTZMANN
}

pub fn joule_to_nk(energy: f64) -> f64 {
    energy / (NANO * BOLTZMANN)
}

pub fn um(x: f64) -> f64 {
    x * MICRO
}

pub fn to_um(x: f64) -> f64 {
    x / MICRO
}

pub fn mw(p: f64) -> f64 {
    p * MILLI
}

pub fn to_mw(p: f64) -> f64 {
    p / MILLI
}

/// Angular frequency (rad/s) to ordinary frequency (Hz).
pub fn to_hz(omega: f64) -> f64 {
    omega / (2.0 * std::f64::consts::PI)
}

pub fn hz_to_angular(f: f64) -> f64 {
    f * 2.0 * std::f64::consts::PI
}
