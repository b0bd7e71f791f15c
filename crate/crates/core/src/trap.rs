//! Five-sheet gravito-optical trap.
//!
//! Two vertical sheet pairs confine along x and y; one horizontal sheet holds
//! the atoms against gravity along z. Each sheet is a repulsive Gaussian
//! wall, tight along its confinement axis and wide along one orthogonal axis,
//! and translation invariant along its propagation axis (the Rayleigh range
//! is far larger than the trap region, so divergence is ignored).
//!
//! The coefficient `alpha` converts intensity into potential energy. It is
//! not derived from the atomic polarizability: [`calibrate_alpha`] fixes it
//! from a known barrier height at a known x-sheet power.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{bisect, NelderMead, Sign};
use crate::units::{self, BOLTZMANN, HBAR, RB87_MASS, STANDARD_GRAVITY};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrapError {
    #[error("minimum search left the bounding box or found no local minimum")]
    NoMinimum,
    #[error("potential decreases on both sides along {0:?}")]
    NoBarrier(Axis),
    #[error("Hessian at the minimum is not positive definite (eigenvalues {0:?})")]
    NotAMinimum([f64; 3]),
    #[error("no sign change of barrier - anchor over the alpha bracket")]
    BracketFailure,
    #[error("invalid trap configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TrapError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub atom_mass: f64,
    pub gravity_accel: f64,
    pub boltzmann: f64,
    pub hbar: f64,
    /// s-wave scattering length. Rb-87 is about 98 Bohr radii.
    pub scattering_length: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            atom_mass: RB87_MASS,
            gravity_accel: STANDARD_GRAVITY,
            boltzmann: BOLTZMANN,
            hbar: HBAR,
            scattering_length: 5.2e-9,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.atom_mass,
            self.gravity_accel,
            self.boltzmann,
            self.hbar,
            self.scattering_length,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(TrapError::Invalid("physical constants must be positive".into()))
        }
    }

    /// Contact coupling g = 4πħ²a/m.
    pub fn interaction_strength(&self) -> f64 {
        4.0 * std::f64::consts::PI * self.hbar * self.hbar * self.scattering_length / self.atom_mass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SheetBeam {
    pub confinement_axis: Axis,
    /// Position of the intensity maximum along the confinement axis, m.
    pub center_offset: f64,
    /// W
    pub power: f64,
    /// 1/e² radius along the confinement axis, m.
    pub waist_tight: f64,
    /// 1/e² radius along `wide_axis`, m.
    pub waist_wide: f64,
    pub wide_axis: Axis,
}

impl SheetBeam {
    pub fn validate(&self) -> Result<()> {
        if self.confinement_axis == self.wide_axis {
            return Err(TrapError::Invalid("sheet confinement and wide axes coincide".into()));
        }
        if !(self.power >= 0.0) || !self.power.is_finite() {
            return Err(TrapError::Invalid("sheet power must be non-negative".into()));
        }
        if !(self.waist_tight > 0.0 && self.waist_wide > 0.0) {
            return Err(TrapError::Invalid("sheet waists must be positive".into()));
        }
        if !self.center_offset.is_finite() {
            return Err(TrapError::Invalid("sheet offset must be finite".into()));
        }
        Ok(())
    }

    pub fn peak_intensity(&self) -> f64 {
        2.0 * self.power / (std::f64::consts::PI * self.waist_tight * self.waist_wide)
    }

    pub fn intensity(&self, p: &Vector3<f64>) -> f64 {
        let dt = (p[self.confinement_axis.index()] - self.center_offset) / self.waist_tight;
        let dw = p[self.wide_axis.index()] / self.waist_wide;
        self.peak_intensity() * (-2.0 * (dt * dt + dw * dw)).exp()
    }
}

/// Region searched for the minimum and scanned for barriers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchDomain {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    /// Step of the 1-D barrier scans, m.
    pub scan_step: f64,
}

impl Default for SearchDomain {
    fn default() -> Self {
        SearchDomain {
            lower: [-4e-6, -4e-6, -8e-6],
            upper: [4e-6, 4e-6, 8e-6],
            scan_step: 10e-9,
        }
    }
}

impl SearchDomain {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.lower[k] && p[k] <= self.upper[k])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from_fn(|k, _| 0.5 * (self.lower[k] + self.upper[k]))
    }
}

/// Anything the trap analysis can work on: the real sheet trap or an
/// injected test potential.
pub trait Potential: Sync {
    fn energy(&self, p: &Vector3<f64>) -> f64;
    fn domain(&self) -> &SearchDomain;
    fn constants(&self) -> &PhysicalConstants;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapConfig {
    pub sheets: Vec<SheetBeam>,
    /// Potential energy per intensity, J/(W/m²).
    pub alpha: f64,
    pub gravity_enabled: bool,
    pub constants: PhysicalConstants,
    #[serde(default)]
    pub domain: SearchDomain,
}

/// Named parameters of the standard five-sheet layout, SI units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SheetLayout {
    /// Power per sheet of the x pair, W.
    pub power_x: f64,
    pub power_y: f64,
    pub power_z: f64,
    /// Centre-to-centre separation of the x pair, m.
    pub separation_x: f64,
    pub separation_y: f64,
    /// Vertical position of the horizontal sheet, m.
    pub z_sheet_offset: f64,
    pub waist_xy_tight: f64,
    pub waist_xy_wide: f64,
    pub waist_z_tight: f64,
    pub waist_z_wide: f64,
}

impl Default for SheetLayout {
    fn default() -> Self {
        SheetLayout {
            power_x: 0.2e-3,
            power_y: DEFAULT_POWER_Y,
            power_z: DEFAULT_POWER_Z,
            separation_x: 5e-6,
            separation_y: 5e-6,
            z_sheet_offset: -3e-6,
            waist_xy_tight: 2.5e-6,
            waist_xy_wide: 100e-6,
            waist_z_tight: 3.4e-6,
            waist_z_wide: 200e-6,
        }
    }
}

/// Operating power per y sheet, W. Not stated for the experiment; chosen so
/// the y confinement is deeper than x and the mean frequency is near 2π×300 Hz.
pub const DEFAULT_POWER_Y: f64 = 0.6e-3;
/// Operating power of the z sheet, W.
pub const DEFAULT_POWER_Z: f64 = 10.0e-3;
/// x-sheet power of the calibration anchor, W.
pub const ANCHOR_POWER_X: f64 = 0.2e-3;
/// Barrier height along x at the anchor power, in nK·k_B.
pub const ANCHOR_DEPTH_NK: f64 = 22.0;
/// Starting value for alpha before calibration, J/(W/m²).
pub const NOMINAL_ALPHA: f64 = 8.0e-37;

impl SheetLayout {
    pub fn build(&self, alpha: f64) -> TrapConfig {
        let xy = |axis: Axis, wide: Axis, offset: f64, power: f64| SheetBeam {
            confinement_axis: axis,
            center_offset: offset,
            power,
            waist_tight: self.waist_xy_tight,
            waist_wide: self.waist_xy_wide,
            wide_axis: wide,
        };
        let sheets = vec![
            xy(Axis::X, Axis::Y, -0.5 * self.separation_x, self.power_x),
            xy(Axis::X, Axis::Y, 0.5 * self.separation_x, self.power_x),
            xy(Axis::Y, Axis::X, -0.5 * self.separation_y, self.power_y),
            xy(Axis::Y, Axis::X, 0.5 * self.separation_y, self.power_y),
            SheetBeam {
                confinement_axis: Axis::Z,
                center_offset: self.z_sheet_offset,
                power: self.power_z,
                waist_tight: self.waist_z_tight,
                waist_wide: self.waist_z_wide,
                wide_axis: Axis::X,
            },
        ];
        TrapConfig {
            sheets,
            alpha,
            gravity_enabled: true,
            constants: PhysicalConstants::default(),
            domain: SearchDomain::default(),
        }
    }
}

impl Default for TrapConfig {
    fn default() -> Self {
        SheetLayout::default().build(NOMINAL_ALPHA)
    }
}

impl TrapConfig {
    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        for s in &self.sheets {
            s.validate()?;
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(TrapError::Invalid("alpha must be positive".into()));
        }
        let d = &self.domain;
        if !(0..3).all(|k| d.upper[k] > d.lower[k]) || !(d.scan_step > 0.0) {
            return Err(TrapError::Invalid("empty search domain or non-positive scan step".into()));
        }
        Ok(())
    }

    pub fn optical_energy(&self, p: &Vector3<f64>) -> f64 {
        self.alpha * self.sheets.iter().map(|s| s.intensity(p)).sum::<f64>()
    }

    /// Copy with every sheet confining along `axis` scaled in power.
    pub fn with_power_scaled(&self, axis: Axis, factor: f64) -> TrapConfig {
        let mut cfg = self.clone();
        for s in cfg.sheets.iter_mut().filter(|s| s.confinement_axis == axis) {
            s.power *= factor;
        }
        cfg
    }

    /// Copy with every sheet confining along `axis` set to `power`.
    pub fn with_power(&self, axis: Axis, power: f64) -> TrapConfig {
        let mut cfg = self.clone();
        for s in cfg.sheets.iter_mut().filter(|s| s.confinement_axis == axis) {
            s.power = power;
        }
        cfg
    }

    /// Copy with the sheets along `axis` spread symmetrically about their
    /// mean position, so the pair separation scales by `factor`.
    pub fn with_separation_scaled(&self, axis: Axis, factor: f64) -> TrapConfig {
        let mut cfg = self.clone();
        let offsets: Vec<f64> = cfg
            .sheets
            .iter()
            .filter(|s| s.confinement_axis == axis)
            .map(|s| s.center_offset)
            .collect();
        if offsets.is_empty() {
            return cfg;
        }
        let mid = offsets.iter().sum::<f64>() / offsets.len() as f64;
        for s in cfg.sheets.iter_mut().filter(|s| s.confinement_axis == axis) {
            s.center_offset = mid + (s.center_offset - mid) * factor;
        }
        cfg
    }

    /// Power of the first sheet confining along `axis`.
    pub fn power(&self, axis: Axis) -> Option<f64> {
        self.sheets.iter().find(|s| s.confinement_axis == axis).map(|s| s.power)
    }
}

impl Potential for TrapConfig {
    fn energy(&self, p: &Vector3<f64>) -> f64 {
        let mut e = self.optical_energy(p);
        if self.gravity_enabled {
            e += self.constants.atom_mass * self.constants.gravity_accel * p[2];
        }
        e
    }

    fn domain(&self) -> &SearchDomain {
        &self.domain
    }

    fn constants(&self) -> &PhysicalConstants {
        &self.constants
    }
}

/// Σ alpha·I(p) + m·g·z.
pub fn potential_at(cfg: &TrapConfig, p: &Vector3<f64>) -> f64 {
    cfg.energy(p)
}

/// Anisotropic harmonic well ½m Σ ωᵢ²(pᵢ − cᵢ)² + offset. Used as a
/// reference potential with closed-form answers.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicPotential {
    pub center: Vector3<f64>,
    pub omega: [f64; 3],
    pub offset: f64,
    pub constants: PhysicalConstants,
    pub domain: SearchDomain,
}

impl HarmonicPotential {
    pub fn isotropic(omega: f64) -> Self {
        HarmonicPotential {
            center: Vector3::zeros(),
            omega: [omega; 3],
            offset: 0.0,
            constants: PhysicalConstants::default(),
            domain: SearchDomain {
                lower: [-8e-6; 3],
                upper: [8e-6; 3],
                scan_step: 10e-9,
            },
        }
    }
}

impl Potential for HarmonicPotential {
    fn energy(&self, p: &Vector3<f64>) -> f64 {
        let m = self.constants.atom_mass;
        let mut e = self.offset;
        for k in 0..3 {
            let d = p[k] - self.center[k];
            e += 0.5 * m * self.omega[k] * self.omega[k] * d * d;
        }
        e
    }

    fn domain(&self) -> &SearchDomain {
        &self.domain
    }

    fn constants(&self) -> &PhysicalConstants {
        &self.constants
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Minimum {
    pub point: Vector3<f64>,
    pub energy: f64,
}

/// Probe step used to certify a local minimum.
pub const MINIMUM_PROBE_STEP: f64 = 10e-9;

/// Local minimum of the potential, started from `guess`.
///
/// The simplex works in μm and nK to keep the problem well scaled. Points
/// outside the search domain count as +∞, so a search that runs into a wall
/// of the domain ends on its boundary and is reported as [`TrapError::NoMinimum`].
pub fn find_minimum<P: Potential + ?Sized>(pot: &P, guess: &Vector3<f64>) -> Result<Minimum> {
    let domain = pot.domain();
    let scale_e = units::nk_to_joule(1.0);
    let objective = |q: &[f64; 3]| {
        let p = Vector3::new(units::um(q[0]), units::um(q[1]), units::um(q[2]));
        if !domain.contains(&p) {
            return f64::INFINITY;
        }
        pot.energy(&p) / scale_e
    };
    let nm = NelderMead {
        initial_step: 0.2,
        xtol: 1e-7,
        max_iter: 20_000,
        restarts: 2,
        ..Default::default()
    };
    let start = [units::to_um(guess[0]), units::to_um(guess[1]), units::to_um(guess[2])];
    let res = nm.minimize(objective, start);
    if !res.f.is_finite() {
        return Err(TrapError::NoMinimum);
    }
    let point = Vector3::new(units::um(res.x[0]), units::um(res.x[1]), units::um(res.x[2]));
    let margin = 2.0 * domain.scan_step;
    for k in 0..3 {
        if point[k] - domain.lower[k] < margin || domain.upper[k] - point[k] < margin {
            return Err(TrapError::NoMinimum);
        }
    }
    let energy = pot.energy(&point);
    for axis in Axis::ALL {
        for sign in [-1.0, 1.0] {
            let mut probe = point;
            probe[axis.index()] += sign * MINIMUM_PROBE_STEP;
            if pot.energy(&probe) < energy {
                return Err(TrapError::NoMinimum);
            }
        }
    }
    Ok(Minimum { point, energy })
}

/// Central-difference gradient with step `h`.
pub fn gradient<P: Potential + ?Sized>(pot: &P, p: &Vector3<f64>, h: f64) -> Vector3<f64> {
    Vector3::from_fn(|k, _| {
        let mut a = *p;
        let mut b = *p;
        a[k] += h;
        b[k] -= h;
        (pot.energy(&a) - pot.energy(&b)) / (2.0 * h)
    })
}

/// 1-D scan through the minimum along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisScan {
    pub axis: Axis,
    /// Highest energy found below / above the minimum and where it sits.
    pub lower_peak: (f64, f64),
    pub upper_peak: (f64, f64),
}

impl AxisScan {
    /// Barrier height above `min_energy`, clamped at zero.
    pub fn barrier(&self, min_energy: f64) -> f64 {
        (self.lower_peak.1.min(self.upper_peak.1) - min_energy).max(0.0)
    }
}

fn scan_side<P: Potential + ?Sized>(pot: &P, min: &Minimum, axis: Axis, dir: f64) -> Option<(f64, f64)> {
    let k = axis.index();
    let domain = pot.domain();
    let limit = if dir > 0.0 { domain.upper[k] } else { domain.lower[k] };
    let start = min.point[k];
    let span = (limit - start) * dir;
    if span <= 0.0 {
        return None;
    }
    let steps = (span / domain.scan_step).ceil() as usize;
    let at = |i: usize| {
        let t = if i >= steps { limit } else { start + dir * domain.scan_step * i as f64 };
        let mut p = min.point;
        p[k] = t;
        (t, pot.energy(&p))
    };

    let mut prev2 = at(0);
    let mut prev = at(1.min(steps));
    let mut best = (prev.0, prev.1, 1usize);
    for i in 2..=steps {
        let cur = at(i);
        if cur.1 > best.1 {
            best = (cur.0, cur.1, i);
        }
        if best.2 == i - 1 && cur.1 <= prev.1 && prev.1 >= prev2.1 && i < steps {
            // interior peak at i-1: refine with a parabola through three samples
            let (x0, y0) = prev2;
            let (x1, y1) = prev;
            let (_, y2) = cur;
            let denom = y0 - 2.0 * y1 + y2;
            if denom < 0.0 {
                let h = x1 - x0;
                let shift = 0.5 * h * (y0 - y2) / denom;
                if shift.abs() <= h.abs() {
                    let t = x1 + shift;
                    let mut p = min.point;
                    p[k] = t;
                    let e = pot.energy(&p);
                    if e > best.1 {
                        best = (t, e, i - 1);
                    }
                }
            }
        }
        prev2 = prev;
        prev = cur;
    }
    Some((best.0, best.1))
}

/// Scan along `axis` from the minimum to both ends of the search domain,
/// keeping the maximum on each side.
pub fn scan_axis<P: Potential + ?Sized>(pot: &P, min: &Minimum, axis: Axis) -> Result<AxisScan> {
    let lower = scan_side(pot, min, axis, -1.0);
    let upper = scan_side(pot, min, axis, 1.0);
    let (lower, upper) = match (lower, upper) {
        (Some(l), Some(u)) => (l, u),
        _ => return Err(TrapError::NoBarrier(axis)),
    };
    if lower.1 <= min.energy && upper.1 <= min.energy {
        return Err(TrapError::NoBarrier(axis));
    }
    Ok(AxisScan {
        axis,
        lower_peak: lower,
        upper_peak: upper,
    })
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrapShape {
    pub minimum_point: Vector3<f64>,
    pub minimum_energy: f64,
    /// Barrier above the minimum along x, y, z, J.
    pub barrier_per_axis: [f64; 3],
    /// ωx, ωy, ωz in rad/s.
    pub frequencies: [f64; 3],
    pub mean_frequency: f64,
    /// Box spanned by the barrier ridges along each axis; atoms outside it
    /// are not part of the well.
    pub well_box: Aabb,
}

impl TrapShape {
    pub fn barrier(&self, axis: Axis) -> f64 {
        self.barrier_per_axis[axis.index()]
    }

    /// Depth along the shallowest direction.
    pub fn depth(&self) -> f64 {
        self.barrier_per_axis.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Hessian step for frequencies.
pub const HESSIAN_STEP: f64 = 20e-9;

/// Central-difference Hessian at `p`.
pub fn hessian<P: Potential + ?Sized>(pot: &P, p: &Vector3<f64>, h: f64) -> Matrix3<f64> {
    let f = |dx: [f64; 3]| pot.energy(&(p + Vector3::new(dx[0], dx[1], dx[2])));
    let f0 = pot.energy(p);
    let mut m = Matrix3::zeros();
    for i in 0..3 {
        let mut e = [0.0; 3];
        e[i] = h;
        let plus = f(e);
        e[i] = -h;
        let minus = f(e);
        m[(i, i)] = (plus - 2.0 * f0 + minus) / (h * h);
        for j in (i + 1)..3 {
            let mut pp = [0.0; 3];
            pp[i] = h;
            pp[j] = h;
            let mut pm = pp;
            pm[j] = -h;
            let mut mp = pp;
            mp[i] = -h;
            let mut mm = pm;
            mm[i] = -h;
            let v = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * h * h);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Trap frequencies (ωx, ωy, ωz) and their geometric mean at a known minimum.
///
/// Eigenvalues of the Hessian are assigned to the axis their eigenvector
/// points along most.
pub fn frequencies_at<P: Potential + ?Sized>(pot: &P, min: &Minimum) -> Result<([f64; 3], f64)> {
    let h = hessian(pot, &min.point, HESSIAN_STEP);
    let eig = SymmetricEigen::new(h);
    let lambdas = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    if lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(TrapError::NotAMinimum(lambdas));
    }
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut best = (f64::NEG_INFINITY, PERMS[0]);
    for perm in PERMS {
        // perm[axis] = eigen index
        let score: f64 = (0..3).map(|axis| eig.eigenvectors[(axis, perm[axis])].abs()).sum();
        if score > best.0 + 1e-12 {
            best = (score, perm);
        }
    }
    let m = pot.constants().atom_mass;
    let freqs = [0, 1, 2].map(|axis| (lambdas[best.1[axis]] / m).sqrt());
    let mean = (freqs[0] * freqs[1] * freqs[2]).cbrt();
    Ok((freqs, mean))
}

/// Trap frequencies from the Hessian at the minimum nearest the domain centre.
pub fn trap_frequencies<P: Potential + ?Sized>(pot: &P) -> Result<([f64; 3], f64)> {
    let min = find_minimum(pot, &pot.domain().center())?;
    frequencies_at(pot, &min)
}

/// Barrier height along `axis` above the minimum nearest the domain centre.
pub fn barrier_height<P: Potential + ?Sized>(pot: &P, axis: Axis) -> Result<f64> {
    let min = find_minimum(pot, &pot.domain().center())?;
    Ok(scan_axis(pot, &min, axis)?.barrier(min.energy))
}

/// Full analysis: minimum, barriers, frequencies, well box.
pub fn analyze<P: Potential + ?Sized>(pot: &P) -> Result<TrapShape> {
    let min = find_minimum(pot, &pot.domain().center())?;
    analyze_from(pot, &min)
}

pub fn analyze_from<P: Potential + ?Sized>(pot: &P, min: &Minimum) -> Result<TrapShape> {
    let mut barrier_per_axis = [0.0; 3];
    let mut well_box = Aabb {
        lower: [0.0; 3],
        upper: [0.0; 3],
    };
    for axis in Axis::ALL {
        let scan = scan_axis(pot, min, axis)?;
        barrier_per_axis[axis.index()] = scan.barrier(min.energy);
        well_box.lower[axis.index()] = scan.lower_peak.0;
        well_box.upper[axis.index()] = scan.upper_peak.0;
    }
    let (frequencies, mean_frequency) = frequencies_at(pot, min)?;
    Ok(TrapShape {
        minimum_point: min.point,
        minimum_energy: min.energy,
        barrier_per_axis,
        frequencies,
        mean_frequency,
        well_box,
    })
}

/// Lower and upper ends of the alpha bracket searched by [`calibrate_alpha`].
pub const ALPHA_BRACKET: (f64, f64) = (1e-40, 1e-30);

/// Finds alpha such that the x barrier equals `anchor_depth` when every
/// x sheet carries `anchor_power`.
///
/// The bracket is grown geometrically from the configured alpha, never past
/// [`ALPHA_BRACKET`], then bisected in log(alpha) down to 10⁻⁶ relative
/// width. Trial points below the anchor where the trap cannot hold atoms
/// (gravity wins at small alpha) count as too shallow.
pub fn calibrate_alpha(cfg: &TrapConfig, anchor_power: f64, anchor_depth: f64) -> Result<f64> {
    if !(anchor_depth > 0.0) || !anchor_depth.is_finite() {
        return Err(TrapError::Invalid("anchor depth must be positive".into()));
    }
    if !(anchor_power > 0.0) {
        return Err(TrapError::Invalid("anchor power must be positive".into()));
    }
    let base = cfg.with_power(Axis::X, anchor_power);
    let barrier_at = |log_alpha: f64| {
        let mut trial = base.clone();
        trial.alpha = log_alpha.exp();
        barrier_height(&trial, Axis::X)
    };
    let classify = |b: f64| {
        if b < anchor_depth {
            Sign::Below
        } else if b > anchor_depth {
            Sign::Above
        } else {
            Sign::Hit
        }
    };
    let (min_log, max_log) = (ALPHA_BRACKET.0.ln(), ALPHA_BRACKET.1.ln());
    let start = cfg.alpha.clamp(ALPHA_BRACKET.0, ALPHA_BRACKET.1).ln();
    let step = std::f64::consts::LN_2;

    let (lo, hi) = match barrier_at(start) {
        Ok(b) if classify(b) == Sign::Hit => return Ok(start.exp()),
        Ok(b) if classify(b) == Sign::Above => {
            let mut hi = start;
            let mut lo = start - step;
            loop {
                if lo < min_log {
                    return Err(TrapError::BracketFailure);
                }
                match barrier_at(lo) {
                    Ok(b) if classify(b) == Sign::Above => {
                        hi = lo;
                        lo -= step;
                    }
                    Ok(_) | Err(TrapError::NoMinimum) => break (lo, hi),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(_) | Err(TrapError::NoMinimum) => {
            let mut lo = start;
            let mut hi = start + step;
            loop {
                if hi > max_log {
                    return Err(TrapError::BracketFailure);
                }
                match barrier_at(hi) {
                    Ok(b) if classify(b) == Sign::Above => break (lo, hi),
                    Ok(b) if classify(b) == Sign::Hit => return Ok(hi.exp()),
                    Ok(_) | Err(TrapError::NoMinimum) => {
                        lo = hi;
                        hi += step;
                    }
                    Err(_) => return Err(TrapError::BracketFailure),
                }
            }
        }
        Err(e) => return Err(e),
    };

    let side = |log_alpha: f64| -> Result<Sign> {
        match barrier_at(log_alpha) {
            Ok(b) => Ok(classify(b)),
            Err(TrapError::NoMinimum) | Err(TrapError::NoBarrier(_)) => Ok(Sign::Below),
            Err(e) => Err(e),
        }
    };
    let log_alpha = bisect(lo, hi, side, |a, b| b - a < 1e-7, 200)?;
    let alpha = log_alpha.exp();
    // a jump in the barrier (e.g. the trap only starts holding at this alpha)
    // also looks like a sign change; reject it
    match barrier_at(log_alpha) {
        Ok(b) if (b / anchor_depth - 1.0).abs() < 1e-4 => Ok(alpha),
        _ => Err(TrapError::BracketFailure),
    }
}

/// Default layout with alpha calibrated to the standard anchor.
pub fn calibrated_default() -> Result<TrapConfig> {
    let mut cfg = TrapConfig::default();
    cfg.alpha = calibrate_alpha(&cfg, ANCHOR_POWER_X, units::nk_to_joule(ANCHOR_DEPTH_NK))?;
    Ok(cfg)
}

/// x-sheet power that gives an x barrier of `depth` with everything else
/// fixed. Barrier height grows monotonically with that power.
pub fn power_for_depth(cfg: &TrapConfig, depth: f64) -> Result<f64> {
    if !(depth > 0.0) {
        return Err(TrapError::Invalid("depth must be positive".into()));
    }
    let p0 = cfg.power(Axis::X).ok_or_else(|| TrapError::Invalid("no x sheets".into()))?;
    let b0 = barrier_height(cfg, Axis::X)?;
    let guess = p0 * depth / b0;
    let side = |p: f64| -> Result<Sign> {
        match barrier_height(&cfg.with_power(Axis::X, p), Axis::X) {
            Ok(b) if b < depth => Ok(Sign::Below),
            Ok(b) if b > depth => Ok(Sign::Above),
            Ok(_) => Ok(Sign::Hit),
            Err(TrapError::NoMinimum) => Ok(Sign::Below),
            Err(e) => Err(e),
        }
    };
    let mut lo = guess * 0.9;
    let mut hi = guess * 1.1;
    let mut tries = 0;
    while side(lo)? != Sign::Below {
        lo *= 0.5;
        tries += 1;
        if tries > 60 {
            return Err(TrapError::BracketFailure);
        }
    }
    while side(hi)? != Sign::Above {
        hi *= 2.0;
        tries += 1;
        if tries > 60 {
            return Err(TrapError::BracketFailure);
        }
    }
    bisect(lo, hi, side, |a, b| (b - a) < 1e-10 * b, 200)
}

/// Potential along each axis through the minimum, relative to the minimum.
/// Returns (axis, position, energy above minimum) rows.
pub fn axis_profiles<P: Potential + ?Sized>(pot: &P, min: &Minimum, step: f64) -> Vec<(Axis, f64, f64)> {
    let domain = pot.domain();
    let mut rows = Vec::new();
    for axis in Axis::ALL {
        let k = axis.index();
        let n = ((domain.upper[k] - domain.lower[k]) / step).round() as usize;
        for i in 0..=n {
            let t = domain.lower[k] + step * i as f64;
            let mut p = min.point;
            p[k] = t;
            rows.push((axis, t, pot.energy(&p) - min.energy));
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{joule_to_nk, nk_to_joule};

    fn single_sheet() -> TrapConfig {
        TrapConfig {
            sheets: vec![SheetBeam {
                confinement_axis: Axis::X,
                center_offset: 1e-6,
                power: 1e-3,
                waist_tight: 2.5e-6,
                waist_wide: 100e-6,
                wide_axis: Axis::Y,
            }],
            alpha: 1e-36,
            gravity_enabled: false,
            constants: PhysicalConstants::default(),
            domain: SearchDomain::default(),
        }
    }

    #[test]
    fn sheet_peak_value() {
        let cfg = single_sheet();
        let peak = 1e-36 * 2.0 * 1e-3 / (std::f64::consts::PI * 2.5e-6 * 100e-6);
        let e = potential_at(&cfg, &Vector3::new(1e-6, 0.0, 3e-6));
        assert!((e / peak - 1.0).abs() < 1e-14);
    }

    #[test]
    fn one_waist_off_axis_is_e_minus_two() {
        let cfg = single_sheet();
        let center = potential_at(&cfg, &Vector3::new(1e-6, 0.0, 0.0));
        let off = potential_at(&cfg, &Vector3::new(1e-6 + 2.5e-6, 0.0, 0.0));
        assert!((off / center - (-2.0f64).exp()).abs() < 1e-14);
        let wide = potential_at(&cfg, &Vector3::new(1e-6, 100e-6, 0.0));
        assert!((wide / center - (-2.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn gravity_adds_linear_term() {
        let mut cfg = single_sheet();
        let p = Vector3::new(0.0, 0.0, 2e-6);
        let before = potential_at(&cfg, &p);
        cfg.gravity_enabled = true;
        let after = potential_at(&cfg, &p);
        let mg = cfg.constants.atom_mass * cfg.constants.gravity_accel;
        assert!(((after - before) - mg * 2e-6).abs() < 1e-40);
    }

    #[test]
    fn invalid_sheet_rejected() {
        let mut cfg = single_sheet();
        cfg.sheets[0].wide_axis = Axis::X;
        assert!(matches!(cfg.validate(), Err(TrapError::Invalid(_))));
        let mut cfg = single_sheet();
        cfg.sheets[0].power = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = single_sheet();
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
    }

    /// Default layout without gravity, closed by a mirrored z sheet above.
    fn boxed_without_gravity() -> TrapConfig {
        let mut cfg = TrapConfig::default();
        cfg.gravity_enabled = false;
        let mut top = cfg.sheets[4].clone();
        top.center_offset = -top.center_offset;
        cfg.sheets.push(top);
        cfg
    }

    #[test]
    fn symmetric_trap_minimum_at_origin() {
        let cfg = boxed_without_gravity();
        let min = find_minimum(&cfg, &Vector3::new(0.4e-6, -0.3e-6, 0.5e-6)).unwrap();
        assert!(min.point.norm() < 1e-9, "{:?}", min.point);
    }

    #[test]
    fn gravity_sags_the_minimum() {
        let cfg = TrapConfig::default();
        let with_g = find_minimum(&cfg, &Vector3::zeros()).unwrap();
        let z_sheet = cfg.sheets[4].center_offset;
        assert!(with_g.point[2] > z_sheet);

        // gravity-off reference needs a top sheet so a minimum exists
        let no_g = boxed_without_gravity();
        let mut with_g_top = no_g.clone();
        with_g_top.gravity_enabled = true;
        let a = find_minimum(&no_g, &Vector3::zeros()).unwrap();
        let b = find_minimum(&with_g_top, &Vector3::zeros()).unwrap();
        assert!(b.point[2] < a.point[2]);
    }

    #[test]
    fn weak_z_sheet_lets_atoms_fall() {
        let cfg = TrapConfig::default().with_power_scaled(Axis::Z, 1e-3);
        assert_eq!(find_minimum(&cfg, &Vector3::zeros()), Err(TrapError::NoMinimum));
    }

    #[test]
    fn minimum_is_certified_by_probes_and_gradient() {
        let cfg = TrapConfig::default();
        let min = find_minimum(&cfg, &Vector3::zeros()).unwrap();
        let g = gradient(&cfg, &min.point, 1e-9);
        // 1e-3 nK per μm
        assert!(g.norm() < nk_to_joule(1e-3) / 1e-6, "{}", g.norm());
    }

    #[test]
    fn minimum_matches_grid_scan() {
        // brute-force oracle: 0.05 μm grid over the region enclosed by the
        // sheet centres (below the z sheet gravity wins and the energy drops)
        let cfg = TrapConfig::default();
        let min = find_minimum(&cfg, &Vector3::zeros()).unwrap();
        let step = 0.05e-6;
        let mut best = (f64::INFINITY, Vector3::zeros());
        for i in -50..=50 {
            for j in -50..=50 {
                for k in -60..=80 {
                    let p = Vector3::new(i as f64 * step, j as f64 * step, k as f64 * step);
                    let e = cfg.energy(&p);
                    if e < best.0 {
                        best = (e, p);
                    }
                }
            }
        }
        assert!((min.point - best.1).norm() < 0.05e-6, "{:?} vs {:?}", min.point, best.1);
        assert!(min.energy <= best.0);
        // grid minimum within the quadratic error of one half grid step
        assert!(joule_to_nk(best.0 - min.energy) < 0.5);
    }

    #[test]
    fn barrier_doubles_with_alpha_without_gravity() {
        let mut cfg = boxed_without_gravity();
        let b1 = barrier_height(&cfg, Axis::X).unwrap();
        cfg.alpha *= 2.0;
        let b2 = barrier_height(&cfg, Axis::X).unwrap();
        assert!((b2 / b1 - 2.0).abs() < 1e-9, "{}", b2 / b1);
    }

    #[test]
    fn barrier_vanishes_with_x_power() {
        let cfg = TrapConfig::default();
        let full = barrier_height(&cfg, Axis::X).unwrap();
        let weak = barrier_height(&cfg.with_power_scaled(Axis::X, 1e-2), Axis::X).unwrap();
        assert!(weak > 0.0 && weak < 1.1e-2 * full, "{} vs {}", weak, full);
        // with no x walls the y sheets' wide profile pushes atoms out along x
        assert_eq!(
            barrier_height(&cfg.with_power(Axis::X, 0.0), Axis::X),
            Err(TrapError::NoMinimum)
        );
    }

    #[test]
    fn harmonic_frequencies_recovered() {
        let mut pot = HarmonicPotential::isotropic(2.0 * std::f64::consts::PI * 300.0);
        pot.omega = [1000.0, 2000.0, 3000.0];
        pot.center = Vector3::new(0.3e-6, -0.2e-6, 1e-6);
        let (f, mean) = trap_frequencies(&pot).unwrap();
        for (got, want) in f.iter().zip(pot.omega) {
            assert!((got / want - 1.0).abs() < 1e-3, "{} vs {}", got, want);
        }
        assert!((mean / (6e9f64).cbrt() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn frequencies_scale_with_sqrt_power() {
        let cfg = boxed_without_gravity();
        let (f1, _) = trap_frequencies(&cfg).unwrap();
        let mut scaled = cfg.clone();
        for s in scaled.sheets.iter_mut() {
            s.power *= 4.0;
        }
        let (f2, _) = trap_frequencies(&scaled).unwrap();
        for k in 0..3 {
            assert!((f2[k] / f1[k] - 2.0).abs() < 1e-4, "{:?} {:?}", f1, f2);
        }
    }

    #[test]
    fn saddle_is_not_a_minimum() {
        struct Saddle(HarmonicPotential);
        impl Potential for Saddle {
            fn energy(&self, p: &Vector3<f64>) -> f64 {
                let m = self.0.constants.atom_mass;
                0.5 * m * 1e6 * (p[0] * p[0] + p[1] * p[1] - p[2] * p[2])
            }
            fn domain(&self) -> &SearchDomain {
                &self.0.domain
            }
            fn constants(&self) -> &PhysicalConstants {
                &self.0.constants
            }
        }
        let s = Saddle(HarmonicPotential::isotropic(1.0));
        let min = Minimum {
            point: Vector3::zeros(),
            energy: 0.0,
        };
        assert!(matches!(frequencies_at(&s, &min), Err(TrapError::NotAMinimum(_))));
    }

    #[test]
    fn flat_potential_has_no_barrier() {
        struct Slope(HarmonicPotential);
        impl Potential for Slope {
            fn energy(&self, p: &Vector3<f64>) -> f64 {
                -p[0].abs()
            }
            fn domain(&self) -> &SearchDomain {
                &self.0.domain
            }
            fn constants(&self) -> &PhysicalConstants {
                &self.0.constants
            }
        }
        let s = Slope(HarmonicPotential::isotropic(1.0));
        let min = Minimum {
            point: Vector3::zeros(),
            energy: 0.0,
        };
        assert_eq!(scan_axis(&s, &min, Axis::X), Err(TrapError::NoBarrier(Axis::X)));
    }

    #[test]
    fn calibration_rejects_degenerate_anchor() {
        let cfg = TrapConfig::default();
        assert!(matches!(calibrate_alpha(&cfg, 0.2e-3, 0.0), Err(TrapError::Invalid(_))));
    }

    #[test]
    fn calibration_out_of_bracket() {
        let cfg = TrapConfig::default();
        // 1 K deep barrier at 0.2 mW is far beyond any alpha in the bracket
        assert_eq!(calibrate_alpha(&cfg, 0.2e-3, 1.0 * BOLTZMANN), Err(TrapError::BracketFailure));
    }

    #[test]
    fn calibration_matches_closed_form_pair() {
        // y and z sheets made flat along x, so the x profile through the
        // centre is the pair alone and the barrier is alpha times an intensity
        // difference
        let mut cfg = boxed_without_gravity();
        for s in cfg.sheets.iter_mut().filter(|s| s.confinement_axis != Axis::X) {
            s.waist_wide = 1.0;
        }
        let a = 2.5e-6;
        let w = 2.5e-6;
        let peak_intensity = cfg.sheets[0].peak_intensity();
        let profile = |x: f64| peak_intensity * ((-2.0 * ((x - a) / w).powi(2)).exp() + (-2.0 * ((x + a) / w).powi(2)).exp());
        // golden-section search for the ridge between 0 and 2a
        let (mut lo, mut hi) = (0.0, 2.0 * a);
        let r = (5f64.sqrt() - 1.0) / 2.0;
        while hi - lo > 1e-15 {
            let m1 = hi - r * (hi - lo);
            let m2 = lo + r * (hi - lo);
            if profile(m1) < profile(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        let ridge = profile(0.5 * (lo + hi));
        let depth = nk_to_joule(22.0);
        let oracle = depth / (ridge - profile(0.0));
        let alpha = calibrate_alpha(&cfg, cfg.sheets[0].power, depth).unwrap();
        assert!((alpha / oracle - 1.0).abs() < 1e-6, "{} vs {}", alpha, oracle);
    }

    #[test]
    fn calibrated_default_replays_anchor() {
        let cfg = calibrated_default().unwrap();
        let b = barrier_height(&cfg, Axis::X).unwrap();
        assert!((joule_to_nk(b) - ANCHOR_DEPTH_NK).abs() < 0.1);
    }

    #[test]
    fn barrier_monotone_in_x_power() {
        let cfg = TrapConfig::default();
        let mut last = 0.0;
        for i in 1..=10 {
            let b = barrier_height(&cfg.with_power(Axis::X, 0.05e-3 * i as f64), Axis::X).unwrap();
            assert!(b >= last, "step {}: {} < {}", i, b, last);
            last = b;
        }
    }

    #[test]
    fn axis_profiles_touch_zero_at_minimum() {
        let cfg = TrapConfig::default();
        let min = find_minimum(&cfg, &Vector3::zeros()).unwrap();
        let rows = axis_profiles(&cfg, &min, 0.1e-6);
        for axis in Axis::ALL {
            let k = axis.index();
            let nearest = rows
                .iter()
                .filter(|r| r.0 == axis)
                .min_by(|a, b| (a.1 - min.point[k]).abs().total_cmp(&(b.1 - min.point[k]).abs()))
                .unwrap();
            assert!(nearest.2 > -nk_to_joule(1e-9) && nearest.2 < nk_to_joule(0.5), "{:?}", nearest);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn point() -> impl Strategy<Value = Vector3<f64>> {
            (-4.0..4.0f64, -4.0..4.0f64, -8.0..8.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z) * 1e-6)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn optical_part_linear_in_alpha_and_power(p in point(), c in 0.1..10.0f64, axis in 0usize..3) {
                let mut cfg = TrapConfig::default();
                cfg.gravity_enabled = false;
                let base = potential_at(&cfg, &p);
                let mut scaled = cfg.clone();
                scaled.alpha *= c;
                let e = potential_at(&scaled, &p);
                prop_assert!((e - c * base).abs() <= 1e-12 * (c * base).abs());

                let axis = Axis::ALL[axis];
                let only = |cfg: &TrapConfig| -> f64 {
                    cfg.alpha * cfg.sheets.iter().filter(|s| s.confinement_axis == axis).map(|s| s.intensity(&p)).sum::<f64>()
                };
                let part = only(&cfg);
                let pumped = cfg.with_power_scaled(axis, c);
                let rest = base - part;
                let e = potential_at(&pumped, &p);
                prop_assert!((e - (rest + c * part)).abs() <= 1e-12 * (rest + c * part).abs());
            }

            #[test]
            fn potential_finite_and_nonnegative_without_gravity(p in point()) {
                let mut cfg = TrapConfig::default();
                cfg.gravity_enabled = false;
                let e = potential_at(&cfg, &p);
                prop_assert!(e.is_finite() && e >= 0.0);
            }

            #[test]
            fn mirror_invariant_minimum(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
                let cfg = TrapConfig::default();
                let guess = Vector3::new(x, y, z) * 1e-6;
                let a = find_minimum(&cfg, &guess).unwrap();
                let b = find_minimum(&cfg, &Vector3::new(-guess[0], guess[1], guess[2])).unwrap();
                prop_assert!((a.point[0] + b.point[0]).abs() < 1e-9);
                prop_assert!((a.point[1] - b.point[1]).abs() < 1e-9);
                prop_assert!((a.point[2] - b.point[2]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrapConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        for key in ["\"sheets\"", "\"alpha\"", "\"gravity_enabled\"", "\"constants\""] {
            assert!(text.contains(key));
        }
        let back: TrapConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        // domain is optional on input
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("domain");
        let back: TrapConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back.domain, SearchDomain::default());
    }
}
