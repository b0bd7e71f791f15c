//! Thomas-Fermi condensate in an arbitrary potential.
//!
//! In the Thomas-Fermi limit the density is `(μ − U(r))/g` wherever that is
//! positive. Chemical potentials here are absolute energies on the same scale
//! as the potential; user-facing code reports them above the trap minimum.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{bisect, Sign};
use crate::quadrature::{gauss_legendre, integrate_box, CubatureOptions, CubatureResult, QuadratureError};
use crate::trap::{self, PhysicalConstants, Potential, TrapError, TrapShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CondensateError {
    #[error(transparent)]
    Trap(#[from] TrapError),
    #[error("Thomas-Fermi integral failed: {0}")]
    QuadratureFailure(#[from] QuadratureError),
    #[error("{target} atoms exceed the {max:.3} the well holds at its lowest barrier")]
    Unreachable { target: f64, max: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CondensateError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondensateState {
    /// Absolute chemical potential, J.
    pub chemical_potential: f64,
    pub atom_number: f64,
    /// g = 4πħ²a/m, J·m³.
    pub interaction_strength: f64,
}

/// Relative tolerance of the atom-number quadrature.
pub const NUMBER_REL_TOL: f64 = 1e-4;

pub fn tf_density<P: Potential + ?Sized>(pot: &P, mu: f64, p: &Vector3<f64>) -> f64 {
    let g = pot.constants().interaction_strength();
    (mu - pot.energy(p)).max(0.0) / g
}

/// Atom number for chemical potential `mu`, analysing the trap first.
pub fn atom_number<P: Potential + ?Sized>(pot: &P, mu: f64) -> Result<f64> {
    let shape = trap::analyze(pot)?;
    atom_number_in(pot, &shape, mu)
}

/// Atom number in the well described by `shape`.
///
/// Only the well box (between the barrier ridges) is integrated: atoms that
/// would sit beyond a barrier are not counted.
pub fn atom_number_in<P: Potential + ?Sized>(pot: &P, shape: &TrapShape, mu: f64) -> Result<f64> {
    Ok(number_estimate(pot, shape, mu)?.value)
}

/// Gauss-Legendre order of the radial integrals.
pub const RADIAL_NODES: usize = 16;

/// Atom number with the quadrature's error estimate and cost.
///
/// The Thomas-Fermi region is integrated in spherical coordinates about the
/// trap minimum. Along each ray the edge of the cloud (where U = μ, or the
/// well box if that comes first) is located by root finding, and the smooth
/// radial integrand r²(μ − U) is integrated with Gauss-Legendre nodes. The
/// solid angle is covered by adaptive Genz-Malik cubature over (θ, φ). The
/// cloud must be star-shaped about the minimum, which holds for a single well.
pub fn number_estimate<P: Potential + ?Sized>(pot: &P, shape: &TrapShape, mu: f64) -> Result<CubatureResult> {
    number_estimate_with(pot, shape, mu, NUMBER_REL_TOL)
}

pub fn number_estimate_with<P: Potential + ?Sized>(
    pot: &P,
    shape: &TrapShape,
    mu: f64,
    rel_tol: f64,
) -> Result<CubatureResult> {
    if !mu.is_finite() {
        return Err(CondensateError::Invalid("chemical potential must be finite".into()));
    }
    if mu <= shape.minimum_energy {
        return Ok(CubatureResult {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
        });
    }
    let rays = RayIntegrator::new(pot, shape, mu);
    let integrand = |q: &[f64; 2]| {
        let (theta, phi) = (q[0], q[1]);
        let dir = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
        theta.sin() * rays.radial(&dir)
    };
    let opts = CubatureOptions {
        rel_tol,
        initial_divisions: 4,
        max_evaluations: 2_000_000,
        ..Default::default()
    };
    let pi = std::f64::consts::PI;
    let res = integrate_box(integrand, [0.0, 0.0], [pi, 2.0 * pi], &opts)?;
    let g = pot.constants().interaction_strength();
    Ok(CubatureResult {
        value: res.value / g,
        error: res.error / g,
        evaluations: res.evaluations,
    })
}

struct RayIntegrator<'a, P: ?Sized> {
    pot: &'a P,
    origin: Vector3<f64>,
    lower: [f64; 3],
    upper: [f64; 3],
    mu: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a, P: Potential + ?Sized> RayIntegrator<'a, P> {
    fn new(pot: &'a P, shape: &TrapShape, mu: f64) -> Self {
        let (nodes, weights) = gauss_legendre(RADIAL_NODES);
        RayIntegrator {
            pot,
            origin: shape.minimum_point,
            lower: shape.well_box.lower,
            upper: shape.well_box.upper,
            mu,
            nodes,
            weights,
        }
    }

    fn excess(&self, dir: &Vector3<f64>, r: f64) -> f64 {
        self.mu - self.pot.energy(&(self.origin + dir * r))
    }

    /// Distance from the origin to the well box along `dir`.
    fn box_exit(&self, dir: &Vector3<f64>) -> f64 {
        let mut t = f64::INFINITY;
        for k in 0..3 {
            if dir[k] > 1e-15 {
                t = t.min((self.upper[k] - self.origin[k]) / dir[k]);
            } else if dir[k] < -1e-15 {
                t = t.min((self.lower[k] - self.origin[k]) / dir[k]);
            }
        }
        t.max(0.0)
    }

    /// Where the ray leaves the cloud.
    fn edge(&self, dir: &Vector3<f64>) -> f64 {
        const MARCH: usize = 8;
        let r_box = self.box_exit(dir);
        let h = r_box / MARCH as f64;
        let mut a = 0.0;
        let mut fa = self.excess(dir, 0.0);
        for i in 1..=MARCH {
            let b = if i == MARCH { r_box } else { h * i as f64 };
            let fb = self.excess(dir, b);
            if fb <= 0.0 {
                return illinois(|r| self.excess(dir, r), a, fa, b, fb, 1e-7 * r_box);
            }
            a = b;
            fa = fb;
        }
        r_box
    }

    fn radial(&self, dir: &Vector3<f64>) -> f64 {
        let r_max = self.edge(dir);
        if r_max <= 0.0 {
            return 0.0;
        }
        let half = 0.5 * r_max;
        let mut sum = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let r = half * (x + 1.0);
            sum += w * r * r * self.excess(dir, r).max(0.0);
        }
        sum * half
    }
}

/// Illinois variant of regula falsi on a bracket with `fa > 0 >= fb`.
fn illinois(f: impl Fn(f64) -> f64, mut a: f64, mut fa: f64, mut b: f64, mut fb: f64, tol: f64) -> f64 {
    let mut side = 0i8;
    for _ in 0..100 {
        if (b - a).abs() <= tol {
            break;
        }
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = f(c);
        if fc == 0.0 {
            return c;
        }
        if fc > 0.0 {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        } else {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        }
    }
    0.5 * (a + b)
}

/// Closed-form Thomas-Fermi number for a harmonic trap with geometric mean
/// frequency `mean_frequency`: N = (8π/15)(μ/g)(2μ/(mω̄²))^{3/2}.
pub fn harmonic_tf_number(mu_above_min: f64, mean_frequency: f64, consts: &PhysicalConstants) -> f64 {
    if mu_above_min <= 0.0 {
        return 0.0;
    }
    let g = consts.interaction_strength();
    let r2 = 2.0 * mu_above_min / (consts.atom_mass * mean_frequency * mean_frequency);
    8.0 * std::f64::consts::PI / 15.0 * (mu_above_min / g) * r2.powf(1.5)
}

/// Inverse of [`harmonic_tf_number`].
pub fn harmonic_tf_chemical_potential(n: f64, mean_frequency: f64, consts: &PhysicalConstants) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    let unit = harmonic_tf_number(1.0, mean_frequency, consts);
    (n / unit).powf(0.4)
}

/// Absolute tolerance on the atom number when inverting.
pub const INVERSION_ATOM_TOL: f64 = 1e-3;

/// Chemical potential holding `target_n` atoms.
pub fn chemical_potential<P: Potential + ?Sized>(pot: &P, target_n: f64) -> Result<f64> {
    let shape = trap::analyze(pot)?;
    chemical_potential_in(pot, &shape, target_n)
}

pub fn chemical_potential_in<P: Potential + ?Sized>(pot: &P, shape: &TrapShape, target_n: f64) -> Result<f64> {
    if !(target_n >= 0.0) || !target_n.is_finite() {
        return Err(CondensateError::Invalid("target atom number must be non-negative".into()));
    }
    let lo = shape.minimum_energy;
    if target_n == 0.0 {
        return Ok(lo);
    }
    let hi = lo + shape.depth();
    let max = atom_number_in(pot, shape, hi)?;
    if target_n > max {
        return Err(CondensateError::Unreachable { target: target_n, max });
    }
    let side = |mu: f64| -> Result<Sign> {
        let n = atom_number_in(pot, shape, mu)?;
        Ok(if (n - target_n).abs() <= INVERSION_ATOM_TOL {
            Sign::Hit
        } else if n < target_n {
            Sign::Below
        } else {
            Sign::Above
        })
    };
    bisect(lo, hi, side, |a, b| b - a <= 1e-12 * (hi - lo), 200)
}

/// State for a given chemical potential.
pub fn state<P: Potential + ?Sized>(pot: &P, shape: &TrapShape, mu: f64) -> Result<CondensateState> {
    Ok(CondensateState {
        chemical_potential: mu,
        atom_number: atom_number_in(pot, shape, mu)?,
        interaction_strength: pot.constants().interaction_strength(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trap::HarmonicPotential;
    use crate::units::nk_to_joule;

    fn omega300() -> f64 {
        2.0 * std::f64::consts::PI * 300.0
    }

    /// Independent oracle: radial Simpson integration of the isotropic
    /// harmonic Thomas-Fermi profile.
    fn radial_harmonic_number(mu: f64, omega: f64, c: &PhysicalConstants) -> f64 {
        let g = c.interaction_strength();
        let k = 0.5 * c.atom_mass * omega * omega;
        let r_max = (mu / k).sqrt();
        let n = 20_000;
        let h = r_max / n as f64;
        let f = |r: f64| 4.0 * std::f64::consts::PI * r * r * (mu - k * r * r).max(0.0) / g;
        let mut s = f(0.0) + f(r_max);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn closed_form_matches_radial_quadrature() {
        let c = PhysicalConstants::default();
        let mu = nk_to_joule(22.0);
        let closed = harmonic_tf_number(mu, omega300(), &c);
        let oracle = radial_harmonic_number(mu, omega300(), &c);
        assert!((closed / oracle - 1.0).abs() < 1e-8);
        // frozen from the oracle
        assert!((oracle - 130.3).abs() < 0.1, "{}", oracle);
    }

    #[test]
    fn harmonic_zero_and_scaling() {
        let c = PhysicalConstants::default();
        assert_eq!(harmonic_tf_number(0.0, omega300(), &c), 0.0);
        let mu = nk_to_joule(10.0);
        let r = harmonic_tf_number(2.0 * mu, omega300(), &c) / harmonic_tf_number(mu, omega300(), &c);
        assert!((r - 2f64.powf(2.5)).abs() < 1e-12);
        assert!((r - 5.657).abs() < 1e-3);
        let back = harmonic_tf_chemical_potential(harmonic_tf_number(mu, omega300(), &c), omega300(), &c);
        assert!((back / mu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_cutoff_and_peak() {
        let pot = HarmonicPotential::isotropic(omega300());
        let mu = nk_to_joule(20.0);
        let g = pot.constants.interaction_strength();
        assert_eq!(tf_density(&pot, mu, &Vector3::new(7e-6, 0.0, 0.0)), 0.0);
        let peak = tf_density(&pot, mu, &Vector3::zeros());
        assert!((peak - mu / g).abs() <= 1e-12 * peak);
    }

    #[test]
    fn number_zero_at_minimum() {
        let pot = HarmonicPotential::isotropic(omega300());
        assert_eq!(atom_number(&pot, 0.0).unwrap(), 0.0);
        assert_eq!(atom_number(&pot, -1e-31).unwrap(), 0.0);
    }

    #[test]
    fn injected_harmonic_matches_closed_form() {
        let mut pot = HarmonicPotential::isotropic(omega300());
        pot.omega = [omega300() * 0.7, omega300(), omega300() * 1.3];
        pot.offset = 3e-30;
        let shape = trap::analyze(&pot).unwrap();
        for nk in [5.0, 22.0, 50.0] {
            let mu = nk_to_joule(nk);
            let n = atom_number_in(&pot, &shape, pot.offset + mu).unwrap();
            let want = harmonic_tf_number(mu, shape.mean_frequency, &pot.constants);
            assert!((n / want - 1.0).abs() < 1e-2, "{} nK: {} vs {}", nk, n, want);
        }
    }

    #[test]
    fn inversion_round_trip_on_harmonic() {
        let pot = HarmonicPotential::isotropic(omega300());
        let shape = trap::analyze(&pot).unwrap();
        let target = 130.0;
        let mu = chemical_potential_in(&pot, &shape, target).unwrap();
        let closed = harmonic_tf_chemical_potential(target, omega300(), &pot.constants);
        assert!((mu / closed - 1.0).abs() < 1e-3, "{} vs {}", mu, closed);
        let n = atom_number_in(&pot, &shape, mu).unwrap();
        assert!((n - target).abs() < 1e-2);
        assert_eq!(chemical_potential_in(&pot, &shape, 0.0).unwrap(), shape.minimum_energy);
    }

    #[test]
    fn unreachable_target() {
        let pot = HarmonicPotential::isotropic(omega300());
        let shape = trap::analyze(&pot).unwrap();
        assert!(matches!(
            chemical_potential_in(&pot, &shape, 1e12),
            Err(CondensateError::Unreachable { .. })
        ));
        assert!(matches!(
            chemical_potential_in(&pot, &shape, -1.0),
            Err(CondensateError::Invalid(_))
        ));
    }

    fn log_log_slope(points: &[(f64, f64)]) -> f64 {
        let n = points.len() as f64;
        let (mx, my) = points
            .iter()
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x.ln() / n, b + y.ln() / n));
        let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| {
            let dx = x.ln() - mx;
            (a + dx * (y.ln() - my), b + dx * dx)
        });
        sxy / sxx
    }

    fn full_trap_at(depth_nk: f64) -> (trap::TrapConfig, TrapShape) {
        let base = trap::calibrated_default().unwrap();
        let p = trap::power_for_depth(&base, nk_to_joule(depth_nk)).unwrap();
        let cfg = base.with_power(trap::Axis::X, p);
        let shape = trap::analyze(&cfg).unwrap();
        (cfg, shape)
    }

    #[test]
    fn harmonic_slope_is_five_halves() {
        let c = PhysicalConstants::default();
        let pts: Vec<(f64, f64)> = (0..10)
            .map(|i| {
                let nk = 5.0 + 5.0 * i as f64;
                (nk, harmonic_tf_number(nk_to_joule(nk), omega300(), &c))
            })
            .collect();
        assert!((log_log_slope(&pts) - 2.5).abs() < 1e-3);
    }

    #[test]
    fn full_trap_number_of_order_hundred() {
        let (cfg, shape) = full_trap_at(22.0);
        let n = atom_number_in(&cfg, &shape, shape.minimum_energy + nk_to_joule(22.0)).unwrap();
        assert!(n > 50.0 && n < 300.0, "{}", n);
    }

    #[test]
    fn full_trap_matches_grid_integral() {
        // midpoint-rule oracle over the well box
        let (cfg, shape) = full_trap_at(22.0);
        let mu = shape.minimum_energy + shape.barrier(trap::Axis::X);
        let (lo, hi) = (shape.well_box.lower, shape.well_box.upper);
        let n = 200;
        let h: Vec<f64> = (0..3).map(|k| (hi[k] - lo[k]) / n as f64).collect();
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let p = Vector3::new(
                        lo[0] + (i as f64 + 0.5) * h[0],
                        lo[1] + (j as f64 + 0.5) * h[1],
                        lo[2] + (k as f64 + 0.5) * h[2],
                    );
                    sum += tf_density(&cfg, mu, &p);
                }
            }
        }
        let grid = sum * h[0] * h[1] * h[2];
        let n = atom_number_in(&cfg, &shape, mu).unwrap();
        assert!((n / grid - 1.0).abs() < 2e-4, "{} vs {}", n, grid);
    }

    #[test]
    fn number_monotone_in_mu() {
        let (cfg, shape) = full_trap_at(22.0);
        let mut last = 0.0;
        for i in 0..=20 {
            let mu = shape.minimum_energy + shape.depth() * i as f64 / 20.0;
            let n = atom_number_in(&cfg, &shape, mu).unwrap();
            assert!(n >= last, "step {}: {} < {}", i, n, last);
            last = n;
        }
    }

    #[test]
    fn full_trap_slope_between_two_and_three() {
        let pts: Vec<(f64, f64)> = [10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0]
            .iter()
            .map(|&nk| {
                let (cfg, shape) = full_trap_at(nk);
                let n = atom_number_in(&cfg, &shape, shape.minimum_energy + shape.barrier(trap::Axis::X)).unwrap();
                (nk, n)
            })
            .collect();
        let slope = log_log_slope(&pts);
        assert!((2.0..=3.0).contains(&slope), "{}", slope);
    }

    #[test]
    fn full_trap_round_trip() {
        let (cfg, shape) = full_trap_at(22.0);
        let mu = shape.minimum_energy + nk_to_joule(15.0);
        let n = atom_number_in(&cfg, &shape, mu).unwrap();
        let back = chemical_potential_in(&cfg, &shape, n).unwrap();
        assert!(((back - shape.minimum_energy) / nk_to_joule(15.0) - 1.0).abs() < 1e-3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn density_never_negative(
                x in -4.0..4.0f64, y in -4.0..4.0f64, z in -8.0..8.0f64, mu_nk in -50.0..100.0f64,
            ) {
                let cfg = trap::TrapConfig::default();
                let p = Vector3::new(x, y, z) * 1e-6;
                prop_assert!(tf_density(&cfg, nk_to_joule(mu_nk), &p) >= 0.0);
            }
        }
    }
}
