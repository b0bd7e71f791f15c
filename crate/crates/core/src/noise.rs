//! Technical-noise propagation and the closed-form fluctuation model.
//!
//! Each hardware parameter (a pair power or a pair separation) is perturbed
//! by a truncated Gaussian relative error, the trap is rebuilt and the atom
//! number recomputed through trap depth -> chemical potential -> Thomas-Fermi
//! number. Contributions of independent sources add in quadrature.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condensate::{self, CondensateError};
use crate::rng;
use crate::trap::{self, Axis, TrapConfig, TrapError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error(transparent)]
    Condensate(#[from] CondensateError),
    #[error("{degenerate} of {total} samples gave a degenerate trap")]
    TooManyDegenerate { degenerate: usize, total: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl From<TrapError> for NoiseError {
    fn from(e: TrapError) -> Self {
        NoiseError::Condensate(e.into())
    }
}

pub type Result<T> = std::result::Result<T, NoiseError>;

/// Largest tolerated fraction of degenerate samples.
pub const MAX_DEGENERATE_FRACTION: f64 = 0.01;
/// Gaussian draws are truncated at this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 5.0;
/// Relative step of the finite-difference sensitivity.
pub const SENSITIVITY_STEP: f64 = 5e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NoiseParam {
    #[serde(rename = "P_x")]
    PowerX,
    #[serde(rename = "P_y")]
    PowerY,
    #[serde(rename = "P_z")]
    PowerZ,
    #[serde(rename = "l_x")]
    SeparationX,
    #[serde(rename = "l_y")]
    SeparationY,
}

impl NoiseParam {
    pub const ALL: [NoiseParam; 5] = [
        NoiseParam::PowerX,
        NoiseParam::PowerY,
        NoiseParam::PowerZ,
        NoiseParam::SeparationX,
        NoiseParam::SeparationY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseParam::PowerX => "P_x",
            NoiseParam::PowerY => "P_y",
            NoiseParam::PowerZ => "P_z",
            NoiseParam::SeparationX => "l_x",
            NoiseParam::SeparationY => "l_y",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// `cfg` with this parameter scaled by `1 + rel`. Powers scale every
    /// sheet of the group; separations move both sheets of a pair by ±δ/2.
    pub fn apply(self, cfg: &TrapConfig, rel: f64) -> TrapConfig {
        let f = 1.0 + rel;
        match self {
            NoiseParam::PowerX => cfg.with_power_scaled(Axis::X, f),
            NoiseParam::PowerY => cfg.with_power_scaled(Axis::Y, f),
            NoiseParam::PowerZ => cfg.with_power_scaled(Axis::Z, f),
            NoiseParam::SeparationX => cfg.with_separation_scaled(Axis::X, f),
            NoiseParam::SeparationY => cfg.with_separation_scaled(Axis::Y, f),
        }
    }
}

impl fmt::Display for NoiseParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Relative standard deviation of each parameter; missing entries are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub relative_sigma: BTreeMap<NoiseParam, f64>,
}

impl NoiseSpec {
    pub fn sigma(&self, p: NoiseParam) -> f64 {
        self.relative_sigma.get(&p).copied().unwrap_or(0.0)
    }

    pub fn with(mut self, p: NoiseParam, sigma: f64) -> Self {
        self.relative_sigma.insert(p, sigma);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (p, s) in &self.relative_sigma {
            if !(*s >= 0.0) || !s.is_finite() {
                return Err(NoiseError::Invalid(format!("sigma of {} must be non-negative", p)));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.relative_sigma.values().all(|&s| s == 0.0)
    }

    /// One joint draw of every parameter, applied in a fixed order.
    pub fn perturb<R: Rng + ?Sized>(&self, cfg: &TrapConfig, rng: &mut R) -> TrapConfig {
        let mut out = cfg.clone();
        for p in NoiseParam::ALL {
            let z = truncated_normal(rng);
            let s = self.sigma(p);
            if s > 0.0 {
                out = p.apply(&out, s * z);
            }
        }
        out
    }
}

/// Standard normal draw rejected outside ±[`TRUNCATION_SIGMAS`].
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= TRUNCATION_SIGMAS {
            return z;
        }
    }
}

/// Atom number of a fully loaded trap: μ pinned to the x barrier.
pub fn loaded_number(cfg: &TrapConfig) -> std::result::Result<f64, CondensateError> {
    let shape = trap::analyze(cfg)?;
    let mu = shape.minimum_energy + shape.barrier(Axis::X);
    condensate::atom_number_in(cfg, &shape, mu)
}

/// True for failures caused by the sampled geometry rather than bad input.
pub fn is_degenerate(e: &CondensateError) -> bool {
    matches!(
        e,
        CondensateError::Trap(
            TrapError::NoMinimum | TrapError::NoBarrier(_) | TrapError::NotAMinimum(_)
        )
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    pub param: NoiseParam,
    pub rel_sigma: f64,
    /// Unperturbed atom number.
    pub nominal_n: f64,
    pub mean_n: f64,
    /// std(N)/mean(N) over the Monte Carlo samples.
    pub monte_carlo: f64,
    /// |∂N/∂p|·σ_p/N from central differences.
    pub linear: f64,
    /// d ln N / d ln p at the nominal point.
    pub elasticity: f64,
    pub samples: usize,
    pub degenerate: usize,
}

/// Forward propagation through the full trap chain.
pub fn propagate_param(
    cfg: &TrapConfig,
    param: NoiseParam,
    rel_sigma: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Propagation> {
    propagate_with(cfg, param, rel_sigma, n_samples, seed, loaded_number)
}

/// Forward propagation through an arbitrary number chain.
///
/// Sample `i` draws from the stream `(seed, [param, i])`, so results do not
/// depend on the number of worker threads.
pub fn propagate_with<F>(
    cfg: &TrapConfig,
    param: NoiseParam,
    rel_sigma: f64,
    n_samples: usize,
    seed: u64,
    chain: F,
) -> Result<Propagation>
where
    F: Fn(&TrapConfig) -> std::result::Result<f64, CondensateError> + Sync,
{
    if n_samples < 100 {
        return Err(NoiseError::Invalid("at least 100 samples are required".into()));
    }
    if !(rel_sigma >= 0.0) || !rel_sigma.is_finite() {
        return Err(NoiseError::Invalid("sigma must be non-negative".into()));
    }
    let nominal = chain(cfg)?;
    let elasticity = elasticity_with(cfg, param, &chain)?;

    let draws: Vec<std::result::Result<f64, CondensateError>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[param.index() as u64, i as u64]);
            let z = truncated_normal(&mut r);
            chain(&param.apply(cfg, rel_sigma * z))
        })
        .collect();

    let mut values = Vec::with_capacity(n_samples);
    let mut degenerate = 0;
    for d in draws {
        match d {
            Ok(n) => values.push(n),
            Err(e) if is_degenerate(&e) => degenerate += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if degenerate as f64 > MAX_DEGENERATE_FRACTION * n_samples as f64 {
        return Err(NoiseError::TooManyDegenerate {
            degenerate,
            total: n_samples,
        });
    }
    let (mean, sd) = mean_sd(&values);
    Ok(Propagation {
        param,
        rel_sigma,
        nominal_n: nominal,
        mean_n: mean,
        monte_carlo: if mean > 0.0 { sd / mean } else { 0.0 },
        linear: elasticity.abs() * rel_sigma,
        elasticity,
        samples: n_samples,
        degenerate,
    })
}

/// d ln N / d ln p by central differences of the full chain.
pub fn elasticity(cfg: &TrapConfig, param: NoiseParam) -> Result<f64> {
    elasticity_with(cfg, param, &loaded_number)
}

fn elasticity_with<F>(cfg: &TrapConfig, param: NoiseParam, chain: &F) -> Result<f64>
where
    F: Fn(&TrapConfig) -> std::result::Result<f64, CondensateError>,
{
    let h = SENSITIVITY_STEP;
    let n0 = chain(cfg)?;
    let up = chain(&param.apply(cfg, h))?;
    let down = chain(&param.apply(cfg, -h))?;
    if n0 <= 0.0 {
        return Err(NoiseError::Invalid("nominal atom number is zero".into()));
    }
    Ok((up - down) / (2.0 * h) / n0)
}

/// Mean and n−1 standard deviation, accumulated about the first value so a
/// constant sample gives exactly zero spread.
pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    let Some(&k) = values.first() else {
        return (0.0, 0.0);
    };
    let n = values.len() as f64;
    let (s, ss) = values.iter().fold((0.0, 0.0), |(s, ss), v| (s + (v - k), ss + (v - k) * (v - k)));
    let mean = k + s / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = ((ss - s * s / n) / (n - 1.0)).max(0.0);
    (mean, var.sqrt())
}

/// Root sum of squares.
pub fn combine_quadrature(contribs: &[f64]) -> f64 {
    contribs.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Per-parameter relative atom-number fluctuations, in percent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContributionTable {
    /// Monte Carlo estimate per parameter, %.
    pub per_param: BTreeMap<NoiseParam, f64>,
    /// Linear-sensitivity estimate per parameter, %.
    pub linear: BTreeMap<NoiseParam, f64>,
    /// Quadrature sum of `per_param`, %.
    pub combined: f64,
    pub nominal_n: f64,
}

pub fn contribution_table(cfg: &TrapConfig, spec: &NoiseSpec, n_samples: usize, seed: u64) -> Result<ContributionTable> {
    spec.validate()?;
    let mut table = ContributionTable::default();
    for p in NoiseParam::ALL {
        let r = propagate_param(cfg, p, spec.sigma(p), n_samples, seed)?;
        table.per_param.insert(p, 100.0 * r.monte_carlo);
        table.linear.insert(p, 100.0 * r.linear);
        table.nominal_n = r.nominal_n;
    }
    let v: Vec<f64> = table.per_param.values().copied().collect();
    table.combined = combine_quadrature(&v);
    Ok(table)
}

/// Measured per-parameter contributions at the 22 nK operating point, %.
pub const OPERATING_POINT_CONTRIBUTIONS: [(NoiseParam, f64); 5] = [
    (NoiseParam::PowerX, 2.0),
    (NoiseParam::PowerY, 2.4),
    (NoiseParam::PowerZ, 0.1),
    (NoiseParam::SeparationX, 2.2),
    (NoiseParam::SeparationY, 2.0),
];

/// Hardware stability implied by an observed contribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpliedStability {
    pub param: NoiseParam,
    /// Target contribution, %.
    pub contribution: f64,
    pub elasticity: f64,
    /// Relative σ of the parameter reproducing the contribution, %.
    pub implied_sigma: f64,
}

/// Invert contributions to parameter stabilities with the linear
/// sensitivities of `cfg`.
pub fn implied_stability(cfg: &TrapConfig, targets: &[(NoiseParam, f64)]) -> Result<Vec<ImpliedStability>> {
    targets
        .iter()
        .map(|&(param, contribution)| {
            let e = elasticity(cfg, param)?;
            if e == 0.0 {
                return Err(NoiseError::Invalid(format!("atom number insensitive to {}", param)));
            }
            Ok(ImpliedStability {
                param,
                contribution,
                elasticity: e,
                implied_sigma: contribution / e.abs(),
            })
        })
        .collect()
}

/// Noise spec reproducing `targets` at `cfg` to first order.
pub fn tuned_spec(cfg: &TrapConfig, targets: &[(NoiseParam, f64)]) -> Result<NoiseSpec> {
    let mut spec = NoiseSpec::default();
    for s in implied_stability(cfg, targets)? {
        spec.relative_sigma.insert(s.param, s.implied_sigma / 100.0);
    }
    Ok(spec)
}

/// Technical fluctuation plus Poissonian background capture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctModel {
    /// Combined relative technical fluctuation (fraction, not %).
    pub delta_tech: f64,
    /// Mean number of background atoms captured per detection.
    pub background_mean: f64,
}

impl Default for FluctModel {
    fn default() -> Self {
        FluctModel {
            delta_tech: 0.043,
            background_mean: 5.0,
        }
    }
}

/// σ_N/N = sqrt(δ² + N_bg/N²).
pub fn model_relative_fluct(n: f64, model: &FluctModel) -> f64 {
    (model.delta_tech.powi(2) + model.background_mean / (n * n)).sqrt()
}

/// σ_N/√N = sqrt(δ²N + N_bg/N).
pub fn model_normalized_fluct(n: f64, model: &FluctModel) -> f64 {
    model_relative_fluct(n, model) * n.sqrt()
}

/// Largest N at which the normalized model equals one, i.e. the larger root
/// of δ²N² − N + N_bg = 0. `None` if the model never reaches one.
pub fn unity_crossing(model: &FluctModel) -> Option<f64> {
    let (d2, b) = (model.delta_tech.powi(2), model.background_mean);
    if d2 == 0.0 {
        return (b > 0.0).then_some(b);
    }
    let disc = 1.0 - 4.0 * d2 * b;
    if disc < 0.0 {
        return None;
    }
    Some((1.0 + disc.sqrt()) / (2.0 * d2))
}

/// Position of the interior minimum of the normalized model, √N_bg/δ.
pub fn model_minimum(model: &FluctModel) -> Option<f64> {
    (model.delta_tech > 0.0 && model.background_mean > 0.0).then(|| model.background_mean.sqrt() / model.delta_tech)
}
