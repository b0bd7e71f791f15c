//! Estimators for number statistics: mean and spread, fluctuation relative to
//! the Poissonian case, chi-square intervals, histograms and Gaussian fits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Normal, Poisson};
use thiserror::Error;

use crate::optim::NelderMead;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    /// Every value is equal. The report (zero spread, zero-width intervals)
    /// is still available.
    #[error("all sample values are equal")]
    DegenerateSample(Box<FluctReport>),
    #[error("a Gaussian fit needs at least three occupied bins")]
    FitFailure,
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    values: Vec<f64>,
}

impl Sample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(StatsError::Invalid("empty sample".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::Invalid("sample values must be finite".into()));
        }
        Ok(Sample { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.moments().0
    }

    /// Mean and n−1 standard deviation.
    pub fn moments(&self) -> (f64, f64) {
        crate::noise::mean_sd(&self.values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn point(v: f64) -> Self {
        Interval { lower: v, upper: v }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn scaled(&self, f: f64) -> Self {
        Interval {
            lower: self.lower * f,
            upper: self.upper * f,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonReference {
    /// 1/√N.
    pub value: f64,
    /// value × accuracy / 2.
    pub band_linearized: f64,
    /// [1/√(N(1+a)), 1/√(N(1−a))].
    pub band_exact: Interval,
    /// Half the width of `band_exact`.
    pub band_exact_half: f64,
}

/// Relative Poissonian fluctuation of a mean `mean_n` whose absolute scale is
/// known to ±`abs_accuracy_rel`.
pub fn poisson_reference(mean_n: f64, abs_accuracy_rel: f64) -> Result<PoissonReference> {
    if !(mean_n > 0.0) || !(0.0..1.0).contains(&abs_accuracy_rel) {
        return Err(StatsError::Invalid("mean must be positive and accuracy in [0, 1)".into()));
    }
    let value = 1.0 / mean_n.sqrt();
    let band_exact = Interval {
        lower: 1.0 / (mean_n * (1.0 + abs_accuracy_rel)).sqrt(),
        upper: 1.0 / (mean_n * (1.0 - abs_accuracy_rel)).sqrt(),
    };
    Ok(PoissonReference {
        value,
        band_linearized: value * abs_accuracy_rel / 2.0,
        band_exact,
        band_exact_half: band_exact.width() / 2.0,
    })
}

/// Chi-square interval for σ of a Gaussian population given the sample
/// standard deviation of `n` values.
pub fn sigma_ci(sample_sigma: f64, n: usize, level: f64) -> Result<Interval> {
    if n < 2 || !(level > 0.0 && level < 1.0) || !(sample_sigma >= 0.0) {
        return Err(StatsError::Invalid("need n ≥ 2, σ ≥ 0 and a level in (0, 1)".into()));
    }
    let dof = (n - 1) as f64;
    let chi = ChiSquared::new(dof).map_err(|e| StatsError::Invalid(e.to_string()))?;
    let hi_q = chi.inverse_cdf((1.0 + level) / 2.0);
    let lo_q = chi.inverse_cdf((1.0 - level) / 2.0);
    Ok(Interval {
        lower: sample_sigma * (dof / hi_q).sqrt(),
        upper: sample_sigma * (dof / lo_q).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfLevels {
    /// Level of the interval on the normalized fluctuation.
    pub normalized: f64,
    /// Level of the interval on the relative fluctuation.
    pub relative: f64,
}

impl Default for ConfLevels {
    fn default() -> Self {
        ConfLevels {
            normalized: 0.68,
            relative: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctReport {
    pub n: usize,
    pub mean: f64,
    /// n−1 standard deviation.
    pub sigma: f64,
    /// σ/mean.
    pub relative: f64,
    /// σ/√mean.
    pub normalized: f64,
    pub ci_normalized: Interval,
    pub ci_relative: Interval,
    pub levels: ConfLevels,
    /// Poissonian σ/mean with a ±10% scale accuracy.
    pub poisson_reference: PoissonReference,
}

/// Absolute scale accuracy used for the Poisson reference band.
pub const SCALE_ACCURACY: f64 = 0.10;

pub fn fluct_report(sample: &Sample, levels: ConfLevels) -> Result<FluctReport> {
    let n = sample.len();
    if n < 2 {
        return Err(StatsError::Invalid("need at least two values".into()));
    }
    let (mean, sigma) = sample.moments();
    if !(mean > 0.0) {
        return Err(StatsError::Invalid("mean must be positive".into()));
    }
    let relative = sigma / mean;
    let normalized = sigma / mean.sqrt();
    let mut report = FluctReport {
        n,
        mean,
        sigma,
        relative,
        normalized,
        ci_normalized: Interval::point(normalized),
        ci_relative: Interval::point(relative),
        levels,
        poisson_reference: poisson_reference(mean, SCALE_ACCURACY)?,
    };
    if sigma == 0.0 {
        return Err(StatsError::DegenerateSample(Box::new(report)));
    }
    report.ci_normalized = sigma_ci(sigma, n, levels.normalized)?.scaled(1.0 / mean.sqrt());
    report.ci_relative = sigma_ci(sigma, n, levels.relative)?.scaled(1.0 / mean);
    Ok(report)
}

/// Report for a sample, accepting a constant sample as zero spread.
pub fn fluct_report_lenient(sample: &Sample, levels: ConfLevels) -> Result<FluctReport> {
    match fluct_report(sample, levels) {
        Err(StatsError::DegenerateSample(r)) => Ok(*r),
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: f64,
}

impl Bin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinRule {
    /// Integer-aligned bins whose width is the Freedman-Diaconis width
    /// rounded up to a whole number.
    FreedmanDiaconis,
    /// Integer-aligned bins of a fixed whole-number width.
    Width(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<Bin>,
    /// Expected counts per bin for a Poisson distribution of the same mean.
    pub poisson_overlay: Vec<f64>,
    pub total: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + f * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Freedman-Diaconis bin width, 2·IQR·n^{-1/3}.
pub fn freedman_diaconis(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let iqr = quantile(&v, 0.75) - quantile(&v, 0.25);
    2.0 * iqr / (v.len() as f64).cbrt()
}

/// Bins with edges at half-integers, plus a same-mean Poisson overlay.
pub fn histogram(sample: &Sample, rule: BinRule) -> Histogram {
    let v = sample.values();
    let width = match rule {
        BinRule::FreedmanDiaconis => freedman_diaconis(v).ceil().max(1.0),
        BinRule::Width(w) => w.max(1) as f64,
    };
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = min.round() - 0.5;
    let nbins = (((max - start) / width).floor() as usize) + 1;
    let mut bins: Vec<Bin> = (0..nbins)
        .map(|i| Bin {
            lower: start + i as f64 * width,
            upper: start + (i + 1) as f64 * width,
            count: 0.0,
        })
        .collect();
    for &x in v {
        let i = (((x - start) / width).floor() as usize).min(nbins - 1);
        bins[i].count += 1.0;
    }
    let mean = sample.mean();
    let total = v.len();
    let poisson_overlay = bins.iter().map(|b| total as f64 * poisson_mass(mean, b.lower, b.upper)).collect();
    Histogram {
        bins,
        poisson_overlay,
        total,
    }
}

/// P(lower ≤ K < upper) for K ~ Poisson(mean).
pub fn poisson_mass(mean: f64, lower: f64, upper: f64) -> f64 {
    let Ok(p) = Poisson::new(mean.max(f64::MIN_POSITIVE)) else {
        return 0.0;
    };
    let first = lower.ceil().max(0.0) as u64;
    let mut k = first;
    let mut total = 0.0;
    while (k as f64) < upper {
        total += p.pmf(k);
        k += 1;
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of observed against expected counts. Adjacent
/// bins are pooled until each expects at least `min_expected`.
pub fn chi_square_gof(observed: &[f64], expected: &[f64], min_expected: f64, fitted_params: usize) -> Result<GofResult> {
    if observed.len() != expected.len() {
        return Err(StatsError::Invalid("observed and expected lengths differ".into()));
    }
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        acc = (acc.0 + o, acc.1 + e);
        if acc.1 >= min_expected {
            pooled.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.1 > 0.0 || acc.0 > 0.0 {
        match pooled.last_mut() {
            Some(last) => *last = (last.0 + acc.0, last.1 + acc.1),
            None => pooled.push(acc),
        }
    }
    if pooled.len() <= fitted_params + 1 {
        return Err(StatsError::Invalid("too few bins for a goodness-of-fit test".into()));
    }
    let statistic: f64 = pooled.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = pooled.len() - 1 - fitted_params;
    let chi = ChiSquared::new(dof as f64).map_err(|e| StatsError::Invalid(e.to_string()))?;
    Ok(GofResult {
        statistic,
        dof,
        p_value: 1.0 - chi.cdf(statistic),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianFit {
    /// Expected count in `[lower, upper)` for `total` draws.
    pub fn mass(&self, total: f64, lower: f64, upper: f64) -> f64 {
        let Ok(d) = Normal::new(self.mu, self.sigma) else {
            return 0.0;
        };
        total * (d.cdf(upper) - d.cdf(lower))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Sample mean and n−1 standard deviation.
    pub moments: GaussianFit,
    /// Least-squares fit of bin masses; `None` if the histogram is too thin.
    pub binned: Option<GaussianFit>,
    pub histogram: Histogram,
}

pub fn fit_moments(sample: &Sample) -> GaussianFit {
    let (mu, sigma) = sample.moments();
    GaussianFit { mu, sigma }
}

/// Least-squares fit of Gaussian bin masses to histogram counts.
pub fn fit_binned(bins: &[Bin]) -> Result<GaussianFit> {
    let occupied = bins.iter().filter(|b| b.count > 0.0).count();
    if occupied < 3 {
        return Err(StatsError::FitFailure);
    }
    let total: f64 = bins.iter().map(|b| b.count).sum();
    let mean = bins.iter().map(|b| b.center() * b.count).sum::<f64>() / total;
    let var = bins.iter().map(|b| (b.center() - mean).powi(2) * b.count).sum::<f64>() / total;
    let scale = var.sqrt().max(1e-300);
    // work in units of the starting width, fitting ln σ to keep σ positive;
    // the amplitude is solved in closed form so mass outside the bins is free
    let cost = |p: &[f64; 2]| -> f64 {
        let fit = GaussianFit {
            mu: mean + p[0] * scale,
            sigma: scale * p[1].exp(),
        };
        let m: Vec<f64> = bins.iter().map(|b| fit.mass(1.0, b.lower, b.upper)).collect();
        let mm: f64 = m.iter().map(|v| v * v).sum();
        if mm == 0.0 {
            return f64::INFINITY;
        }
        let amp = bins.iter().zip(&m).map(|(b, v)| b.count * v).sum::<f64>() / mm;
        bins.iter().zip(&m).map(|(b, v)| (b.count - amp * v).powi(2)).sum::<f64>()
    };
    let nm = NelderMead {
        initial_step: 0.1,
        xtol: 1e-11,
        max_iter: 10_000,
        restarts: 2,
        ..Default::default()
    };
    let r = nm.minimize(cost, [0.0, 0.0]);
    if !r.f.is_finite() {
        return Err(StatsError::FitFailure);
    }
    Ok(GaussianFit {
        mu: mean + r.x[0] * scale,
        sigma: scale * r.x[1].exp(),
    })
}

/// Both fits: moments always, binned when the Freedman-Diaconis histogram
/// has at least three occupied bins.
pub fn gaussian_fit(sample: &Sample) -> Result<FitReport> {
    if sample.len() < 2 {
        return Err(StatsError::FitFailure);
    }
    let histogram = histogram(sample, BinRule::FreedmanDiaconis);
    Ok(FitReport {
        moments: fit_moments(sample),
        binned: fit_binned(&histogram.bins).ok(),
        histogram,
    })
}
