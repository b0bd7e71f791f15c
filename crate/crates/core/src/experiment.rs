//! End-to-end virtual experiment: sweep the trap depth, sample technical
//! noise, load the trap to its Thomas-Fermi number, draw the source and the
//! detector, then summarise each depth with the number-statistics estimators.
//!
//! Run `r` at depth `d` draws everything from the stream
//! `(master_seed, [d, r])`, and the outputs are written in index order, so
//! the files are identical for any number of worker threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condensate::CondensateError;
use crate::detector::{self, CalibrationEpoch, DetectorError, DetectorSpec};
use crate::noise::{self, FluctModel, NoiseError, NoiseParam, NoiseSpec};
use crate::plot;
use crate::rng;
use crate::stats::{self, BinRule, ConfLevels, FluctReport, Sample, StatsError};
use crate::trap::{self, Axis, PhysicalConstants, SheetLayout, TrapConfig, TrapError};
use crate::units::{joule_to_nk, nk_to_joule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    Invalid(String),
    #[error("depth {depth_nk:.2} nK: {degenerate} of {total} runs gave a degenerate trap")]
    Degenerate { depth_nk: f64, degenerate: usize, total: usize },
    #[error(transparent)]
    Trap(#[from] TrapError),
    #[error(transparent)]
    Condensate(#[from] CondensateError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("i/o: {0}")]
    Io(String),
}

impl ExperimentError {
    /// 2 for bad input, 3 when the trap itself degenerates, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        let trap_code = |e: &TrapError| match e {
            TrapError::NoMinimum | TrapError::NoBarrier(_) | TrapError::NotAMinimum(_) => 3,
            _ => 2,
        };
        match self {
            ExperimentError::Invalid(_) | ExperimentError::Detector(_) | ExperimentError::Stats(_) => 2,
            ExperimentError::Degenerate { .. } => 3,
            ExperimentError::Trap(e) => trap_code(e),
            ExperimentError::Condensate(CondensateError::Trap(e)) => trap_code(e),
            ExperimentError::Condensate(_) => 2,
            ExperimentError::Noise(NoiseError::TooManyDegenerate { .. }) => 3,
            ExperimentError::Noise(NoiseError::Condensate(CondensateError::Trap(e))) => trap_code(e),
            ExperimentError::Noise(_) => 2,
            ExperimentError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Statistics of the atoms entering the trap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceModel {
    /// round(N).
    Deterministic,
    /// Poisson(N).
    Poisson,
    /// round(Normal(N, √(ratio·N))), floored at zero.
    VarianceRatio { ratio: f64 },
}

impl SourceModel {
    pub fn draw<R: Rng + ?Sized>(&self, n: f64, rng: &mut R) -> u64 {
        match *self {
            SourceModel::Deterministic => n.round().max(0.0) as u64,
            SourceModel::Poisson => detector::poisson(rng, n),
            SourceModel::VarianceRatio { ratio } => {
                let sd = (ratio * n).max(0.0).sqrt();
                if sd == 0.0 {
                    return n.round().max(0.0) as u64;
                }
                let v: f64 = Normal::new(n, sd).expect("finite spread").sample(rng);
                v.round().max(0.0) as u64
            }
        }
    }
}

/// Exponential evaporation ramp, normalised so it ends exactly at
/// `end_depth`: U(t) = U₁ + (U₀ − U₁)(e^{−t/τ} − e^{−T/τ})/(1 − e^{−T/τ}).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    /// J.
    pub start_depth: f64,
    /// J.
    pub end_depth: f64,
    /// s.
    pub duration: f64,
    /// s.
    pub tau: f64,
}

impl RampSchedule {
    pub fn new(start_depth: f64, end_depth: f64, duration: f64) -> Self {
        RampSchedule {
            start_depth,
            end_depth,
            duration,
            tau: duration / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !(self.tau > 0.0) || !self.start_depth.is_finite() || !self.end_depth.is_finite() {
            return Err(ExperimentError::Invalid("ramp needs positive duration and time constant".into()));
        }
        Ok(())
    }
}

pub fn ramp_depth(schedule: &RampSchedule, t: f64) -> Result<f64> {
    schedule.validate()?;
    if !(0.0..=schedule.duration).contains(&t) {
        return Err(ExperimentError::Invalid(format!("t = {} s outside the ramp", t)));
    }
    if t == schedule.duration {
        return Ok(schedule.end_depth);
    }
    let tail = (-schedule.duration / schedule.tau).exp();
    let shape = ((-t / schedule.tau).exp() - tail) / (1.0 - tail);
    Ok(schedule.end_depth + (schedule.start_depth - schedule.end_depth) * shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Calibrated trap; the x power is reset for every depth.
    pub trap: TrapConfig,
    pub noise: NoiseSpec,
    pub detector: DetectorSpec,
    /// Trap depths U₀, J.
    pub depths: Vec<f64>,
    pub runs_per_depth: usize,
    pub source_model: SourceModel,
    pub master_seed: u64,
    /// Subtract the mean background capture from each measurement before
    /// computing statistics.
    pub subtract_background: bool,
    /// Dashed-curve model reported next to the data.
    pub model: FluctModel,
    pub ramp: Option<RampSchedule>,
}

/// Allowed trap depths, nK.
pub const DEPTH_RANGE_NK: (f64, f64) = (5.0, 100.0);

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.trap.validate()?;
        self.noise.validate()?;
        self.detector.validate()?;
        if self.runs_per_depth < 2 {
            return Err(ExperimentError::Invalid("runs_per_depth must be at least 2".into()));
        }
        if self.depths.is_empty() {
            return Err(ExperimentError::Invalid("no depths given".into()));
        }
        for &d in &self.depths {
            let nk = joule_to_nk(d);
            if !(DEPTH_RANGE_NK.0..=DEPTH_RANGE_NK.1).contains(&nk) {
                return Err(ExperimentError::Invalid(format!(
                    "depth {} nK outside [{}, {}] nK",
                    nk, DEPTH_RANGE_NK.0, DEPTH_RANGE_NK.1
                )));
            }
        }
        if let SourceModel::VarianceRatio { ratio } = self.source_model {
            if !(ratio >= 0.0) || !ratio.is_finite() {
                return Err(ExperimentError::Invalid("variance ratio must be non-negative".into()));
            }
        }
        if let Some(r) = &self.ramp {
            r.validate()?;
        }
        Ok(())
    }
}

/// One trial; reproducible from `(master_seed, depth_index, run_index)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub depth_index: usize,
    pub run_index: usize,
    /// J.
    pub depth: f64,
    /// Thomas-Fermi number of the perturbed trap.
    pub tf_n: Option<f64>,
    pub true_n: Option<u64>,
    /// Detector signal in atom units, background included.
    pub measured_n: Option<f64>,
    pub master_seed: u64,
}

impl RunRecord {
    pub fn degenerate(&self) -> bool {
        self.measured_n.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthResult {
    pub depth_index: usize,
    /// J.
    pub depth: f64,
    /// x-sheet power giving this depth, W.
    pub power_x: f64,
    /// Thomas-Fermi number of the unperturbed trap.
    pub nominal_n: f64,
    pub calibration_error: f64,
    pub degenerate: usize,
    pub sample: Sample,
    pub report: FluctReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub depths: Vec<DepthResult>,
    pub records: Vec<RunRecord>,
}

/// Stream index reserved for the per-depth calibration epoch.
const EPOCH_STREAM: u64 = u64::MAX;

pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentResult> {
    plan.validate()?;
    let nominal: Vec<(f64, TrapConfig)> = plan
        .depths
        .iter()
        .map(|&d| {
            let p = trap::power_for_depth(&plan.trap, d)?;
            Ok((p, plan.trap.with_power(Axis::X, p)))
        })
        .collect::<Result<_>>()?;
    let nominal_n: Vec<f64> = nominal
        .par_iter()
        .map(|(_, cfg)| noise::loaded_number(cfg))
        .collect::<std::result::Result<_, _>>()?;
    let noiseless = plan.noise.is_zero();
    let epochs: Vec<CalibrationEpoch> = (0..plan.depths.len())
        .map(|d| CalibrationEpoch::draw(&plan.detector, &mut rng::stream(plan.master_seed, &[d as u64, EPOCH_STREAM])))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..plan.depths.len())
        .flat_map(|d| (0..plan.runs_per_depth).map(move |r| (d, r)))
        .collect();
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(d, r)| {
            let mut rng = rng::stream(plan.master_seed, &[d as u64, r as u64]);
            let cfg = plan.noise.perturb(&nominal[d].1, &mut rng);
            let n = if noiseless {
                Ok(nominal_n[d])
            } else {
                noise::loaded_number(&cfg)
            };
            let mut rec = RunRecord {
                depth_index: d,
                run_index: r,
                depth: plan.depths[d],
                tf_n: None,
                true_n: None,
                measured_n: None,
                master_seed: plan.master_seed,
            };
            match n {
                Ok(n) => {
                    let true_n = plan.source_model.draw(n, &mut rng);
                    rec.tf_n = Some(n);
                    rec.true_n = Some(true_n);
                    rec.measured_n = Some(detector::simulate_measurement(true_n, &plan.detector, &epochs[d], &mut rng));
                    Ok(rec)
                }
                Err(e) if noise::is_degenerate(&e) => Ok(rec),
                Err(e) => Err(e.into()),
            }
        })
        .collect::<Result<_>>()?;

    let offset = if plan.subtract_background {
        plan.detector.capture_mean
    } else {
        0.0
    };
    let mut depths = Vec::with_capacity(plan.depths.len());
    for (d, chunk) in records.chunks(plan.runs_per_depth).enumerate() {
        let degenerate = chunk.iter().filter(|r| r.degenerate()).count();
        if degenerate as f64 > noise::MAX_DEGENERATE_FRACTION * chunk.len() as f64 {
            return Err(ExperimentError::Degenerate {
                depth_nk: joule_to_nk(plan.depths[d]),
                degenerate,
                total: chunk.len(),
            });
        }
        let values: Vec<f64> = chunk.iter().filter_map(|r| r.measured_n).map(|m| m - offset).collect();
        let sample = Sample::new(values)?;
        let report = stats::fluct_report_lenient(&sample, ConfLevels::default())?;
        depths.push(DepthResult {
            depth_index: d,
            depth: plan.depths[d],
            power_x: nominal[d].0,
            nominal_n: nominal_n[d],
            calibration_error: epochs[d].scale_error,
            degenerate,
            sample,
            report,
        });
    }
    Ok(ExperimentResult { depths, records })
}

/// Depth whose fully loaded trap holds `target_n` atoms (bisection in
/// depth between the allowed limits).
pub fn depth_for_number(trap: &TrapConfig, target_n: f64) -> Result<f64> {
    let n_at = |nk: f64| -> Result<f64> {
        let p = trap::power_for_depth(trap, nk_to_joule(nk))?;
        Ok(noise::loaded_number(&trap.with_power(Axis::X, p))?)
    };
    let (mut lo, mut hi) = DEPTH_RANGE_NK;
    if n_at(lo)? > target_n || n_at(hi)? < target_n {
        return Err(ExperimentError::Invalid(format!("{} atoms not reachable within the depth range", target_n)));
    }
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if n_at(mid)? < target_n {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(nk_to_joule(0.5 * (lo + hi)))
}

/// Normalized fluctuation against mean atom number with 68% intervals and
/// the dashed model.
pub fn emit_fig3a(results: &[DepthResult], model: &FluctModel) -> Result<String> {
    if results.is_empty() {
        return Err(ExperimentError::Invalid("no results to plot".into()));
    }
    let mut out = String::from("mean_N,normalized_fluct,ci68_lo,ci68_hi,model_dashed,depth_nK\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.report.mean,
            r.report.normalized,
            r.report.ci_normalized.lower,
            r.report.ci_normalized.upper,
            noise::model_normalized_fluct(r.report.mean, model),
            joule_to_nk(r.depth)
        );
    }
    Ok(out)
}

pub fn fig3a_svg(results: &[DepthResult], model: &FluctModel) -> String {
    let pts: Vec<(f64, f64, f64, f64)> = results
        .iter()
        .map(|r| (r.report.mean, r.report.normalized, r.report.ci_normalized.lower, r.report.ci_normalized.upper))
        .collect();
    let hi = results.iter().map(|r| r.report.mean).fold(1000.0, f64::max);
    let curve: Vec<(f64, f64)> = (0..=200)
        .map(|i| {
            let n = 10f64.powf(i as f64 / 200.0 * hi.log10());
            (n, noise::model_normalized_fluct(n, model))
        })
        .collect();
    plot::scatter_with_curve("normalized fluctuation", "atom number N", "σ_N / √N", &pts, &curve)
}

/// Histogram with the Gaussian (moments) fit and a same-mean Poisson overlay.
pub fn emit_fig3b(sample: &Sample) -> Result<String> {
    let hist = stats::histogram(sample, BinRule::FreedmanDiaconis);
    let fit = stats::fit_moments(sample);
    let mut out = String::from("bin_center,bin_lower,bin_upper,count,gaussian_fit,poisson_overlay\n");
    for (b, p) in hist.bins.iter().zip(&hist.poisson_overlay) {
        let g = if fit.sigma > 0.0 {
            fit.mass(hist.total as f64, b.lower, b.upper)
        } else if (b.lower..b.upper).contains(&fit.mu) {
            hist.total as f64
        } else {
            0.0
        };
        let _ = writeln!(out, "{},{},{},{},{},{}", b.center(), b.lower, b.upper, b.count, g, p);
    }
    Ok(out)
}

pub fn fig3b_svg(sample: &Sample) -> String {
    let hist = stats::histogram(sample, BinRule::FreedmanDiaconis);
    let fit = stats::fit_moments(sample);
    let bars: Vec<(f64, f64, f64)> = hist.bins.iter().map(|b| (b.lower, b.upper, b.count)).collect();
    let width = hist.bins.first().map_or(1.0, |b| b.upper - b.lower);
    let (lo, hi) = (hist.bins.first().map_or(0.0, |b| b.lower), hist.bins.last().map_or(1.0, |b| b.upper));
    let xs: Vec<f64> = (0..=200).map(|i| lo + (hi - lo) * i as f64 / 200.0).collect();
    let gauss: Vec<(f64, f64)> = if fit.sigma > 0.0 {
        xs.iter()
            .map(|&x| {
                let z = (x - fit.mu) / fit.sigma;
                (x, hist.total as f64 * width * (-0.5 * z * z).exp() / (fit.sigma * (2.0 * std::f64::consts::PI).sqrt()))
            })
            .collect()
    } else {
        Vec::new()
    };
    let poisson: Vec<(f64, f64)> = hist
        .bins
        .iter()
        .zip(&hist.poisson_overlay)
        .map(|(b, p)| (b.center(), *p))
        .collect();
    plot::bars_with_overlays("atom number histogram", "atom number N", &bars, &gauss, &poisson)
}

pub fn emit_run_records(records: &[RunRecord]) -> String {
    let mut out = String::from("depth_index,run_index,depth_nK,tf_N,true_n,measured_n,master_seed\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.depth_index,
            r.run_index,
            joule_to_nk(r.depth),
            opt(r.tf_n),
            r.true_n.map_or(String::new(), |n| n.to_string()),
            opt(r.measured_n),
            r.master_seed
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSummary {
    pub depth_nk: f64,
    pub power_x_mw: f64,
    pub nominal_n: f64,
    pub calibration_error: f64,
    pub degenerate_runs: usize,
    pub model_dashed: f64,
    pub report: FluctReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub master_seed: u64,
    pub runs_per_depth: usize,
    pub source_model: SourceModel,
    pub alpha: f64,
    pub noise_relative_sigma: BTreeMap<NoiseParam, f64>,
    pub model: FluctModel,
    pub model_unity_crossing: Option<f64>,
    pub subtract_background: bool,
    pub ramp: Option<RampSchedule>,
    pub depths: Vec<DepthSummary>,
}

pub fn report(plan: &ExperimentPlan, result: &ExperimentResult) -> Report {
    Report {
        master_seed: plan.master_seed,
        runs_per_depth: plan.runs_per_depth,
        source_model: plan.source_model,
        alpha: plan.trap.alpha,
        noise_relative_sigma: plan.noise.relative_sigma.clone(),
        model: plan.model,
        model_unity_crossing: noise::unity_crossing(&plan.model),
        subtract_background: plan.subtract_background,
        ramp: plan.ramp,
        depths: result
            .depths
            .iter()
            .map(|d| DepthSummary {
                depth_nk: joule_to_nk(d.depth),
                power_x_mw: d.power_x * 1e3,
                nominal_n: d.nominal_n,
                calibration_error: d.calibration_error,
                degenerate_runs: d.degenerate,
                model_dashed: noise::model_normalized_fluct(d.report.mean, &plan.model),
                report: d.report.clone(),
            })
            .collect(),
    }
}

/// File name of the histogram for one depth.
pub fn fig3b_name(depth: f64) -> String {
    format!("fig3b_{:.2}nK.csv", joule_to_nk(depth))
}

/// Write run_records.csv, fig3a.csv, one fig3b file per depth and
/// report.json (plus SVGs when asked). Returns the paths written.
pub fn write_outputs(plan: &ExperimentPlan, result: &ExperimentResult, dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
    let fig3a = emit_fig3a(&result.depths, &plan.model)?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    put("run_records.csv".into(), emit_run_records(&result.records))?;
    put("fig3a.csv".into(), fig3a)?;
    for d in &result.depths {
        put(fig3b_name(d.depth), emit_fig3b(&d.sample)?)?;
    }
    let rep = serde_json::to_string_pretty(&report(plan, result)).map_err(|e| ExperimentError::Io(e.to_string()))?;
    put("report.json".into(), rep + "\n")?;
    if svg {
        put("fig3a.svg".into(), fig3a_svg(&result.depths, &plan.model))?;
        for d in &result.depths {
            put(fig3b_name(d.depth).replace(".csv", ".svg"), fig3b_svg(&d.sample))?;
        }
    }
    Ok(written)
}

// ---- plan file (lab units) ----

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapSection {
    #[serde(rename = "power_x_mW")]
    pub power_x_mw: f64,
    #[serde(rename = "power_y_mW")]
    pub power_y_mw: f64,
    #[serde(rename = "power_z_mW")]
    pub power_z_mw: f64,
    pub separation_x_um: f64,
    pub separation_y_um: f64,
    pub z_sheet_offset_um: f64,
    pub waist_xy_tight_um: f64,
    pub waist_xy_wide_um: f64,
    pub waist_z_tight_um: f64,
    pub waist_z_wide_um: f64,
    pub gravity_enabled: bool,
    pub scattering_length_nm: f64,
    /// Fixed alpha in J/(W/m²); calibrated against the anchor when absent.
    pub alpha_j_per_w_m2: Option<f64>,
    #[serde(rename = "anchor_power_mW")]
    pub anchor_power_mw: f64,
    #[serde(rename = "anchor_depth_nK")]
    pub anchor_depth_nk: f64,
}

impl Default for TrapSection {
    fn default() -> Self {
        let l = SheetLayout::default();
        TrapSection {
            power_x_mw: l.power_x * 1e3,
            power_y_mw: l.power_y * 1e3,
            power_z_mw: l.power_z * 1e3,
            separation_x_um: l.separation_x * 1e6,
            separation_y_um: l.separation_y * 1e6,
            z_sheet_offset_um: l.z_sheet_offset * 1e6,
            waist_xy_tight_um: l.waist_xy_tight * 1e6,
            waist_xy_wide_um: l.waist_xy_wide * 1e6,
            waist_z_tight_um: l.waist_z_tight * 1e6,
            waist_z_wide_um: l.waist_z_wide * 1e6,
            gravity_enabled: true,
            scattering_length_nm: PhysicalConstants::default().scattering_length * 1e9,
            alpha_j_per_w_m2: None,
            anchor_power_mw: trap::ANCHOR_POWER_X * 1e3,
            anchor_depth_nk: trap::ANCHOR_DEPTH_NK,
        }
    }
}

impl TrapSection {
    pub fn build(&self) -> Result<TrapConfig> {
        let layout = SheetLayout {
            power_x: self.power_x_mw * 1e-3,
            power_y: self.power_y_mw * 1e-3,
            power_z: self.power_z_mw * 1e-3,
            separation_x: self.separation_x_um * 1e-6,
            separation_y: self.separation_y_um * 1e-6,
            z_sheet_offset: self.z_sheet_offset_um * 1e-6,
            waist_xy_tight: self.waist_xy_tight_um * 1e-6,
            waist_xy_wide: self.waist_xy_wide_um * 1e-6,
            waist_z_tight: self.waist_z_tight_um * 1e-6,
            waist_z_wide: self.waist_z_wide_um * 1e-6,
        };
        let mut cfg = layout.build(self.alpha_j_per_w_m2.unwrap_or(trap::NOMINAL_ALPHA));
        cfg.gravity_enabled = self.gravity_enabled;
        cfg.constants.scattering_length = self.scattering_length_nm * 1e-9;
        cfg.validate()?;
        if self.alpha_j_per_w_m2.is_none() {
            cfg.alpha = trap::calibrate_alpha(&cfg, self.anchor_power_mw * 1e-3, nk_to_joule(self.anchor_depth_nk))?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// Relative σ of each parameter, %.
    pub relative_sigma_percent: BTreeMap<NoiseParam, f64>,
    /// Target atom-number contributions, %. When given, the σ of each
    /// listed parameter is set to reproduce it at `tune_depth_nK`.
    pub contributions_percent: BTreeMap<NoiseParam, f64>,
    #[serde(rename = "tune_depth_nK")]
    pub tune_depth_nk: Option<f64>,
}

impl NoiseSection {
    pub fn build(&self, trap_cfg: &TrapConfig) -> Result<NoiseSpec> {
        let mut spec = NoiseSpec::default();
        for (&p, &s) in &self.relative_sigma_percent {
            spec.relative_sigma.insert(p, s / 100.0);
        }
        if !self.contributions_percent.is_empty() {
            let depth = self
                .tune_depth_nk
                .ok_or_else(|| ExperimentError::Invalid("contributions_percent needs tune_depth_nK".into()))?;
            let p = trap::power_for_depth(trap_cfg, nk_to_joule(depth))?;
            let at = trap_cfg.with_power(Axis::X, p);
            let targets: Vec<(NoiseParam, f64)> = self.contributions_percent.iter().map(|(&k, &v)| (k, v)).collect();
            for (k, v) in noise::tuned_spec(&at, &targets)?.relative_sigma {
                spec.relative_sigma.insert(k, v);
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub rate_per_atom_per_s: f64,
    pub background_rate_per_s: f64,
    pub bin_duration_ms: f64,
    pub capture_mean_atoms: f64,
    pub calibration_error_rel: f64,
    pub window_bins: usize,
    pub threshold_sigma: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorSpec::default();
        DetectorSection {
            rate_per_atom_per_s: d.rate_per_atom,
            background_rate_per_s: d.background_rate,
            bin_duration_ms: d.bin_duration * 1e3,
            capture_mean_atoms: d.capture_mean,
            calibration_error_rel: d.calibration_error_rel,
            window_bins: d.window_bins,
            threshold_sigma: d.threshold_sigma,
        }
    }
}

impl DetectorSection {
    pub fn build(&self) -> Result<DetectorSpec> {
        let spec = DetectorSpec {
            rate_per_atom: self.rate_per_atom_per_s,
            background_rate: self.background_rate_per_s,
            bin_duration: self.bin_duration_ms * 1e-3,
            capture_mean: self.capture_mean_atoms,
            calibration_error_rel: self.calibration_error_rel,
            window_bins: self.window_bins,
            threshold_sigma: self.threshold_sigma,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub delta_tech_percent: f64,
    pub background_mean_atoms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSection {
    #[serde(rename = "start_depth_nK")]
    pub start_depth_nk: f64,
    #[serde(rename = "end_depth_nK")]
    pub end_depth_nk: f64,
    #[serde(default = "default_ramp_ms")]
    pub duration_ms: f64,
    #[serde(default)]
    pub tau_ms: Option<f64>,
}

fn default_ramp_ms() -> f64 {
    1500.0
}

/// Plan as read from JSON: nK, μm, mW, ms and percent, with the unit in
/// every key name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    #[serde(default)]
    pub trap: TrapSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(rename = "depths_nK")]
    pub depths_nk: Vec<f64>,
    pub runs_per_depth: usize,
    #[serde(default = "default_source")]
    pub source_model: SourceModel,
    pub master_seed: u64,
    #[serde(default = "default_true")]
    pub subtract_background: bool,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub ramp: Option<RampSection>,
}

fn default_source() -> SourceModel {
    SourceModel::Deterministic
}

impl PlanFile {
    pub fn from_json(text: &str) -> Result<PlanFile> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Invalid(e.to_string()))
    }

    /// Build the SI plan: calibrate the trap and resolve noise targets.
    pub fn into_plan(&self) -> Result<ExperimentPlan> {
        let trap_cfg = self.trap.build()?;
        let noise = self.noise.build(&trap_cfg)?;
        let detector = self.detector.build()?;
        let model = match &self.model {
            Some(m) => FluctModel {
                delta_tech: m.delta_tech_percent / 100.0,
                background_mean: m.background_mean_atoms,
            },
            None => FluctModel {
                delta_tech: FluctModel::default().delta_tech,
                background_mean: detector.capture_mean,
            },
        };
        let ramp = self.ramp.as_ref().map(|r| RampSchedule {
            start_depth: nk_to_joule(r.start_depth_nk),
            end_depth: nk_to_joule(r.end_depth_nk),
            duration: r.duration_ms * 1e-3,
            tau: r.tau_ms.unwrap_or(r.duration_ms / 3.0) * 1e-3,
        });
        let plan = ExperimentPlan {
            trap: trap_cfg,
            noise,
            detector,
            depths: self.depths_nk.iter().map(|&d| nk_to_joule(d)).collect(),
            runs_per_depth: self.runs_per_depth,
            source_model: self.source_model,
            master_seed: self.master_seed,
            subtract_background: self.subtract_background,
            model,
            ramp,
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_plan(source: SourceModel, depths_nk: &[f64], runs: usize) -> ExperimentPlan {
        ExperimentPlan {
            trap: trap::calibrated_default().unwrap(),
            noise: NoiseSpec::default(),
            detector: DetectorSpec {
                capture_mean: 0.0,
                calibration_error_rel: 0.0,
                ..Default::default()
            },
            depths: depths_nk.iter().map(|&d| nk_to_joule(d)).collect(),
            runs_per_depth: runs,
            source_model: source,
            master_seed: 17,
            subtract_background: true,
            model: FluctModel::default(),
            ramp: None,
        }
    }

    #[test]
    fn fully_deterministic_chain_has_no_spread() {
        let plan = quiet_plan(SourceModel::Deterministic, &[10.0, 22.0, 30.0], 20);
        let res = run_experiment(&plan).unwrap();
        let mut last = 0.0;
        for d in &res.depths {
            assert_eq!(d.report.normalized, 0.0);
            assert!(d.report.mean > last);
            last = d.report.mean;
        }
    }

    #[test]
    fn poisson_source_is_poissonian() {
        let runs = 2000;
        let plan = quiet_plan(SourceModel::Poisson, &[12.0, 22.0], runs);
        let res = run_experiment(&plan).unwrap();
        for d in &res.depths {
            let tol = 3.0 / (2.0 * runs as f64).sqrt();
            assert!((d.report.normalized - 1.0).abs() < tol, "{}", d.report.normalized);
        }
    }

    #[test]
    fn output_independent_of_threads() {
        let mut plan = quiet_plan(SourceModel::Poisson, &[15.0, 25.0], 20);
        plan.noise = NoiseSpec::default().with(NoiseParam::PowerX, 0.01);
        plan.detector = DetectorSpec::default();
        let run = |t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| run_experiment(&plan).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(emit_run_records(&a.records), emit_run_records(&b.records));
        assert_eq!(emit_fig3a(&a.depths, &plan.model).unwrap(), emit_fig3a(&b.depths, &plan.model).unwrap());
    }

    #[test]
    fn bad_plans_rejected() {
        let mut plan = quiet_plan(SourceModel::Deterministic, &[2.0], 10);
        assert!(matches!(run_experiment(&plan), Err(ExperimentError::Invalid(_))));
        plan.depths = vec![nk_to_joule(20.0)];
        plan.runs_per_depth = 1;
        assert_eq!(run_experiment(&plan).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn empty_fig3a_is_an_error() {
        assert!(emit_fig3a(&[], &FluctModel::default()).is_err());
    }

    #[test]
    fn fig3b_constant_sample_single_bar() {
        let csv = emit_fig3b(&Sample::new(vec![60.0; 100]).unwrap()).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].starts_with("60,59.5,60.5,100,100,"));
    }

    #[test]
    fn ramp_endpoints_and_midpoint() {
        let r = RampSchedule::new(nk_to_joule(200.0), nk_to_joule(22.0), 1.5);
        assert_eq!(ramp_depth(&r, 0.0).unwrap(), r.start_depth);
        assert_eq!(ramp_depth(&r, 1.5).unwrap(), r.end_depth);
        // τ = T/3: shape at T/2 is (e^{-1.5} − e^{-3})/(1 − e^{-3})
        let shape = ((-1.5f64).exp() - (-3f64).exp()) / (1.0 - (-3f64).exp());
        let want = 22.0 + 178.0 * shape;
        assert!((joule_to_nk(ramp_depth(&r, 0.75).unwrap()) - want).abs() < 1e-9);
        assert!((want - 54.4717).abs() < 1e-3, "{}", want);
        assert!(ramp_depth(&r, 1.6).is_err());
        let mut last = f64::INFINITY;
        for i in 0..=30 {
            let v = ramp_depth(&r, 0.05 * i as f64).unwrap();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn plan_file_round_trip_and_units() {
        let text = r#"{
            "trap": {"power_y_mW": 0.6, "alpha_j_per_w_m2": 8.2e-37},
            "noise": {"relative_sigma_percent": {"P_x": 1.0}},
            "detector": {"bin_duration_ms": 100},
            "depths_nK": [20, 30],
            "runs_per_depth": 10,
            "source_model": {"kind": "variance_ratio", "ratio": 0.5},
            "master_seed": 3,
            "ramp": {"start_depth_nK": 200, "end_depth_nK": 22}
        }"#;
        let file = PlanFile::from_json(text).unwrap();
        let plan = file.into_plan().unwrap();
        assert_eq!(plan.noise.sigma(NoiseParam::PowerX), 0.01);
        assert_eq!(plan.detector.bin_duration, 0.1);
        assert_eq!(plan.trap.alpha, 8.2e-37);
        assert!((plan.ramp.unwrap().duration - 1.5).abs() < 1e-15);
        assert!(PlanFile::from_json(r#"{"depths_nK": [20], "runs_per_depth": 5, "master_seed": 1, "oops": 1}"#).is_err());
    }

    #[test]
    fn variance_ratio_source_spread() {
        let m = SourceModel::VarianceRatio { ratio: 0.25 };
        let mut r = rng::stream(4, &[]);
        let v: Vec<f64> = (0..20_000).map(|_| m.draw(100.0, &mut r) as f64).collect();
        let (mean, sd) = noise::mean_sd(&v);
        assert!((mean - 100.0).abs() < 0.1);
        // rounding adds 1/12 to the variance
        assert!(((sd * sd) / (25.0 + 1.0 / 12.0) - 1.0).abs() < 0.05, "{}", sd * sd);
    }
}
