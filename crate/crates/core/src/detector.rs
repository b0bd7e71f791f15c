//! Fluorescence detection: photon-count traces, step decoding, background
//! capture and the calibration of an imaging channel against counted levels.

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("segment {segment} sits at {level:.2} atom-equivalents, too far from any integer")]
    AmbiguousLevel { segment: usize, level: f64 },
    #[error("calibration needs at least two distinct atom-number levels")]
    InsufficientLevels,
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DetectorError>;

/// Largest distance of a decoded level from the nearest integer.
pub const LEVEL_TOLERANCE: f64 = 0.4;
/// Calibrations with a larger relative slope error are flagged.
pub const CALIBRATION_FLAG: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSpec {
    /// Counts per second per atom.
    pub rate_per_atom: f64,
    /// Counts per second with no atoms.
    pub background_rate: f64,
    /// s.
    pub bin_duration: f64,
    /// Mean number of atoms captured during one exposure.
    pub capture_mean: f64,
    /// Half-width of the uniform calibration error.
    pub calibration_error_rel: f64,
    /// Bins on each side of a candidate step.
    pub window_bins: usize,
    /// Detection threshold in standard errors.
    pub threshold_sigma: f64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec {
            rate_per_atom: 1e4,
            background_rate: 2e4,
            bin_duration: 0.1,
            capture_mean: 5.0,
            calibration_error_rel: 0.10,
            window_bins: 5,
            threshold_sigma: 4.0,
        }
    }
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.rate_per_atom,
            self.background_rate,
            self.capture_mean,
            self.calibration_error_rel,
            self.threshold_sigma,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(DetectorError::Invalid("detector parameters must be non-negative".into()));
        }
        if !(self.bin_duration > 0.0) || !self.bin_duration.is_finite() {
            return Err(DetectorError::Invalid("bin duration must be positive".into()));
        }
        if self.window_bins == 0 {
            return Err(DetectorError::Invalid("window must hold at least one bin".into()));
        }
        Ok(())
    }

    /// Expected counts in one bin with `n` atoms (fractional `n` allowed).
    pub fn expected_counts(&self, n: f64) -> f64 {
        (self.background_rate + n * self.rate_per_atom) * self.bin_duration
    }

    /// Atom-equivalents of a mean count per bin.
    pub fn level_of(&self, counts: f64) -> f64 {
        (counts - self.background_rate * self.bin_duration) / (self.rate_per_atom * self.bin_duration)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CountTrace {
    pub counts: Vec<u64>,
    /// s.
    pub bin_duration: f64,
}

/// Piecewise-constant atom number: `atoms` holds from `start` (s) until the
/// next step. Before the first step the trap is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub start: f64,
    pub atoms: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: Vec<Step>,
}

impl Schedule {
    pub fn constant(atoms: u32) -> Self {
        Schedule {
            steps: vec![Step { start: 0.0, atoms }],
        }
    }

    /// Levels held for the given numbers of bins, back to back from t = 0.
    pub fn staircase(levels: &[(u32, usize)], bin_duration: f64) -> Self {
        let mut t = 0usize;
        let mut steps = Vec::with_capacity(levels.len());
        for &(atoms, bins) in levels {
            steps.push(Step {
                start: t as f64 * bin_duration,
                atoms,
            });
            t += bins;
        }
        Schedule { steps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.windows(2).any(|w| !(w[1].start >= w[0].start)) || self.steps.iter().any(|s| !s.start.is_finite()) {
            return Err(DetectorError::Invalid("schedule steps must be in time order".into()));
        }
        Ok(())
    }

    pub fn atoms_at(&self, t: f64) -> u32 {
        self.steps.iter().take_while(|s| s.start <= t).last().map_or(0, |s| s.atoms)
    }

    /// Time-averaged atom number over `[a, b)`.
    pub fn mean_atoms(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        let mut t = a;
        let mut current = self.atoms_at(a);
        for s in self.steps.iter().filter(|s| s.start > a && s.start < b) {
            total += current as f64 * (s.start - t);
            t = s.start;
            current = s.atoms;
        }
        total += current as f64 * (b - t);
        total / (b - a)
    }
}

/// Poisson count per bin; bin `i` draws from the stream `(seed, [i])`.
pub fn simulate_trace(schedule: &Schedule, spec: &DetectorSpec, duration: f64, seed: u64) -> Result<CountTrace> {
    spec.validate()?;
    schedule.validate()?;
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(DetectorError::Invalid("duration must be non-negative".into()));
    }
    let dt = spec.bin_duration;
    let bins = (duration / dt + 1e-9).floor() as usize;
    let counts = (0..bins)
        .map(|i| {
            let n = schedule.mean_atoms(i as f64 * dt, (i + 1) as f64 * dt);
            let lambda = spec.expected_counts(n);
            let mut r = rng::stream(seed, &[i as u64]);
            poisson(&mut r, lambda)
        })
        .collect();
    Ok(CountTrace { counts, bin_duration: dt })
}

pub(crate) fn poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive finite rate").sample(rng) as u64
}

/// Decoded plateau: bins `start..end` hold `atoms` atoms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub atoms: u32,
    /// Mean count per bin.
    pub mean_counts: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Two-sample statistic for a step just before bin `k`: difference of the
/// window means over its Poisson standard error.
fn step_statistic(prefix: &[f64], k: usize, w: usize) -> f64 {
    let left = (prefix[k] - prefix[k - w]) / w as f64;
    let right = (prefix[k + w] - prefix[k]) / w as f64;
    let se = ((left + right) / w as f64).sqrt();
    if se > 0.0 {
        (right - left) / se
    } else if right == left {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Positions of the detected steps (index of the first bin after each step).
pub fn change_points(trace: &CountTrace, spec: &DetectorSpec) -> Vec<usize> {
    let w = spec.window_bins;
    let n = trace.counts.len();
    if n < 2 * w {
        return Vec::new();
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &c in &trace.counts {
        prefix.push(prefix.last().unwrap() + c as f64);
    }
    let stats: Vec<(usize, f64)> = (w..=n - w).map(|k| (k, step_statistic(&prefix, k, w).abs())).collect();
    let mut candidates: Vec<(usize, f64)> = stats.iter().copied().filter(|&(_, t)| t > spec.threshold_sigma).collect();
    // strongest first; keep one step per window
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut accepted: Vec<usize> = Vec::new();
    for (k, _) in candidates {
        if accepted.iter().all(|&a| a.abs_diff(k) >= w) {
            accepted.push(k);
        }
    }
    accepted.sort_unstable();
    accepted
}

/// Split the trace at detected steps and assign an integer atom number to
/// every plateau. Adjacent plateaus at the same level are merged.
pub fn detect_steps(trace: &CountTrace, spec: &DetectorSpec) -> Result<Vec<Segment>> {
    spec.validate()?;
    if !(spec.rate_per_atom > 0.0) || !(spec.background_rate > 0.0) {
        return Err(DetectorError::Invalid("detection needs positive count rates".into()));
    }
    let n = trace.counts.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut cuts = vec![0];
    cuts.extend(change_points(trace, spec));
    cuts.push(n);

    // segments shorter than the window join the neighbour with the closer mean
    let mut bounds: Vec<(usize, usize)> = cuts.windows(2).map(|c| (c[0], c[1])).collect();
    while let Some(i) = bounds.iter().position(|&(a, b)| b - a < spec.window_bins) {
        if bounds.len() == 1 {
            break;
        }
        let m = mean_of(trace, bounds[i]);
        let j = match (i.checked_sub(1), bounds.get(i + 1)) {
            (Some(p), Some(_)) => {
                let (dl, dr) = ((mean_of(trace, bounds[p]) - m).abs(), (mean_of(trace, bounds[i + 1]) - m).abs());
                if dl <= dr {
                    p
                } else {
                    i + 1
                }
            }
            (Some(p), None) => p,
            (None, _) => i + 1,
        };
        let (lo, hi) = (i.min(j), i.max(j));
        bounds[lo] = (bounds[lo].0, bounds[hi].1);
        bounds.remove(hi);
    }

    let mut segments: Vec<Segment> = Vec::with_capacity(bounds.len());
    for (idx, &(start, end)) in bounds.iter().enumerate() {
        let mean = mean_of(trace, (start, end));
        let level = spec.level_of(mean);
        let atoms = level.round().max(0.0);
        if (level - atoms).abs() > LEVEL_TOLERANCE {
            return Err(DetectorError::AmbiguousLevel { segment: idx, level });
        }
        let atoms = atoms as u32;
        match segments.last_mut() {
            Some(last) if last.atoms == atoms => {
                let total = last.mean_counts * last.len() as f64 + mean * (end - start) as f64;
                last.end = end;
                last.mean_counts = total / last.len() as f64;
            }
            _ => segments.push(Segment {
                start,
                end,
                atoms,
                mean_counts: mean,
            }),
        }
    }
    Ok(segments)
}

fn mean_of(trace: &CountTrace, (a, b): (usize, usize)) -> f64 {
    trace.counts[a..b].iter().sum::<u64>() as f64 / (b - a) as f64
}

/// Systematic scale error shared by every measurement of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEpoch {
    pub scale_error: f64,
}

impl CalibrationEpoch {
    pub fn exact() -> Self {
        CalibrationEpoch { scale_error: 0.0 }
    }

    /// Uniform draw in ±`calibration_error_rel`.
    pub fn draw<R: Rng + ?Sized>(spec: &DetectorSpec, rng: &mut R) -> Self {
        let e = spec.calibration_error_rel;
        CalibrationEpoch {
            scale_error: if e > 0.0 { rng.random_range(-e..=e) } else { 0.0 },
        }
    }
}

/// (true_n + Poisson(capture_mean))·(1 + ε).
pub fn simulate_measurement<R: Rng + ?Sized>(true_n: u64, spec: &DetectorSpec, epoch: &CalibrationEpoch, rng: &mut R) -> f64 {
    let captured = poisson(rng, spec.capture_mean);
    (true_n + captured) as f64 * (1.0 + epoch.scale_error)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelCalibration {
    /// Signal per atom.
    pub slope: f64,
    pub atoms_per_signal: f64,
    /// Signal with no atoms.
    pub background: f64,
    /// Relative standard error of the slope.
    pub rel_error: f64,
    /// Set when `rel_error` exceeds [`CALIBRATION_FLAG`].
    pub flagged: bool,
    /// The imaging-channel signals converted to atoms.
    pub atoms: Vec<f64>,
}

impl ChannelCalibration {
    pub fn atoms_for(&self, signal: f64) -> f64 {
        (signal - self.background) * self.atoms_per_signal
    }
}

/// Least-squares slope of signal against counted atom number with the line
/// forced through `background` at zero atoms, then applied to `signals`.
pub fn calibrate_channels(signals: &[f64], levels: &[(f64, u32)], background: f64) -> Result<ChannelCalibration> {
    let mut distinct: Vec<u32> = levels.iter().map(|l| l.1).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 || levels.iter().all(|l| l.1 == 0) {
        return Err(DetectorError::InsufficientLevels);
    }
    let snn: f64 = levels.iter().map(|&(_, n)| (n as f64).powi(2)).sum();
    let sny: f64 = levels.iter().map(|&(s, n)| n as f64 * (s - background)).sum();
    let slope = sny / snn;
    if !(slope != 0.0) || !slope.is_finite() {
        return Err(DetectorError::Invalid("signal does not change with atom number".into()));
    }
    let rss: f64 = levels.iter().map(|&(s, n)| (s - background - slope * n as f64).powi(2)).sum();
    let dof = levels.len().saturating_sub(1).max(1) as f64;
    let rel_error = (rss / dof / snn).sqrt() / slope.abs();
    let mut cal = ChannelCalibration {
        slope,
        atoms_per_signal: 1.0 / slope,
        background,
        rel_error,
        flagged: rel_error > CALIBRATION_FLAG,
        atoms: Vec::new(),
    };
    cal.atoms = signals.iter().map(|&s| cal.atoms_for(s)).collect();
    Ok(cal)
}

/// Random loading from a vapour: atoms arrive at `load_rate` and each leaves
/// at `loss_rate` (per s), capped at `max_atoms`.
pub fn random_loading<R: Rng + ?Sized>(rng: &mut R, duration: f64, load_rate: f64, loss_rate: f64, max_atoms: u32) -> Schedule {
    let mut steps = vec![Step { start: 0.0, atoms: 0 }];
    let mut t = 0.0;
    let mut n = 0u32;
    loop {
        let up = if n < max_atoms { load_rate } else { 0.0 };
        let down = loss_rate * n as f64;
        let total = up + down;
        if total <= 0.0 {
            break;
        }
        t += Exp::new(total).expect("positive rate").sample(rng);
        if t >= duration {
            break;
        }
        if rng.random::<f64>() * total < up {
            n += 1;
        } else {
            n -= 1;
        }
        steps.push(Step { start: t, atoms: n });
    }
    Schedule { steps }
}

/// `levels` plateaus with distinct neighbouring values in `0..=max_atoms`,
/// each lasting between `min_dwell` and `max_dwell` bins.
pub fn random_staircase<R: Rng + ?Sized>(
    rng: &mut R,
    levels: usize,
    max_atoms: u32,
    min_dwell: usize,
    max_dwell: usize,
) -> Vec<(u32, usize)> {
    let mut out: Vec<(u32, usize)> = Vec::with_capacity(levels);
    for _ in 0..levels {
        let atoms = loop {
            let a = rng.random_range(0..=max_atoms);
            if out.last().is_none_or(|l| l.0 != a) {
                break a;
            }
        };
        out.push((atoms, rng.random_range(min_dwell..=max_dwell)));
    }
    out
}

/// True if `segments` reproduce `truth` level for level with every step
/// within `slack` bins.
pub fn matches_staircase(segments: &[Segment], truth: &[(u32, usize)], slack: usize) -> bool {
    if segments.len() != truth.len() {
        return false;
    }
    let mut edge = 0;
    for (s, &(atoms, bins)) in segments.iter().zip(truth) {
        if s.atoms != atoms || s.start.abs_diff(edge) > slack {
            return false;
        }
        edge += bins;
    }
    true
}
