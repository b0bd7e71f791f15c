use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bosestats::condensate;
use bosestats::detector::{self, CountTrace, DetectorSpec};
use bosestats::experiment::{self, DetectorSection, ExperimentError, NoiseSection, PlanFile, Result};
use bosestats::noise::{self, FluctModel, NoiseParam};
use bosestats::rng;
use bosestats::stats::{self, BinRule, ConfLevels, Sample};
use bosestats::trap::{self, Axis, TrapConfig};
use bosestats::units::{joule_to_nk, nk_to_joule, to_hz, to_um};

#[derive(Parser)]
#[command(name = "bosestats", version, about = "Number statistics of a small Bose gas in a five-sheet optical trap")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trap minimum, barriers and frequencies; optional 1-D potential scans.
    Trap(TrapArgs),
    /// Thomas-Fermi atom number against trap depth.
    Tf(TfArgs),
    /// Technical-noise contributions and the fluctuation model curve.
    Noise(NoiseArgs),
    /// Step detection on fluorescence count traces.
    Detect(DetectArgs),
    /// Fluctuation report and histogram for a sample.
    Stats(StatsArgs),
    /// Full virtual experiment from a plan file.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct TrapSource {
    /// TrapConfig JSON (SI units). Default: calibrated standard trap.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the power of each x sheet, mW.
    #[arg(long = "power-x-mw")]
    power_x_mw: Option<f64>,
}

impl TrapSource {
    fn load(&self) -> Result<TrapConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&read(p)?).map_err(|e| ExperimentError::Invalid(e.to_string()))?,
            None => trap::calibrated_default()?,
        };
        if let Some(p) = self.power_x_mw {
            cfg = cfg.with_power(Axis::X, p * 1e-3);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrapArgs {
    #[command(flatten)]
    source: TrapSource,
    /// Write potential scans through the minimum (axis, position_um, energy_nK).
    #[arg(long)]
    scan_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    scan_step_um: f64,
    /// Write the trap configuration used as JSON.
    #[arg(long)]
    write_config: Option<PathBuf>,
}

#[derive(Args)]
struct TfArgs {
    #[command(flatten)]
    source: TrapSource,
    #[arg(long, default_value_t = 5.0)]
    from_nk: f64,
    #[arg(long, default_value_t = 60.0)]
    to_nk: f64,
    #[arg(long, default_value_t = 12)]
    steps: usize,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NoiseArgs {
    #[command(flatten)]
    source: TrapSource,
    /// Noise section JSON (relative_sigma_percent and/or contributions_percent).
    /// Default: the operating-point contributions tuned at --depth-nk.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Trap depth of the operating point, nK.
    #[arg(long, default_value_t = 15.0)]
    depth_nk: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 4.3)]
    delta_percent: f64,
    #[arg(long, default_value_t = 5.0)]
    background: f64,
    /// Model curve CSV (N, sigma_rel, sigma_normalized).
    #[arg(long)]
    model_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1000.0)]
    model_max_n: f64,
}

#[derive(Args)]
struct DetectArgs {
    /// Count trace CSV (bin_index, counts).
    #[arg(long, conflicts_with = "simulate")]
    trace: Option<PathBuf>,
    /// Generate a random-loading trace instead of reading one.
    #[arg(long)]
    simulate: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 60.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 0.3)]
    load_rate_per_s: f64,
    #[arg(long, default_value_t = 0.1)]
    loss_rate_per_s: f64,
    #[arg(long, default_value_t = 5)]
    max_atoms: u32,
    /// Detector settings JSON (same keys as the plan's detector section).
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Output CSV (default: stdout): segments, or the trace with --simulate.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// One value per line.
    #[arg(long)]
    input: PathBuf,
    /// Histogram CSV (bin_center, count, poisson_overlay).
    #[arg(long)]
    hist: Option<PathBuf>,
    /// Integer bin width; Freedman-Diaconis when absent.
    #[arg(long)]
    bin_width: Option<u32>,
    #[arg(long, default_value_t = 0.68)]
    level_normalized: f64,
    #[arg(long, default_value_t = 0.99)]
    level_relative: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: bool,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ExperimentError::Io(format!("{}: {}", path.display(), e)))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| ExperimentError::Io(format!("{}: {}", p.display(), e))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(Into::into),
    }
}

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid(msg.into())
}

fn run_trap(a: &TrapArgs) -> Result<()> {
    let cfg = a.source.load()?;
    let min = trap::find_minimum(&cfg, &cfg.domain.center())?;
    let shape = trap::analyze_from(&cfg, &min)?;
    let mut out = String::new();
    let p = shape.minimum_point;
    let _ = writeln!(out, "alpha            {:.6e} J/(W/m^2)", cfg.alpha);
    let _ = writeln!(out, "minimum          ({:.3}, {:.3}, {:.3}) um", to_um(p.x), to_um(p.y), to_um(p.z));
    let _ = writeln!(out, "minimum energy   {:.3} nK", joule_to_nk(shape.minimum_energy));
    for axis in Axis::ALL {
        let _ = writeln!(out, "barrier {}        {:.3} nK", axis.name(), joule_to_nk(shape.barrier(axis)));
    }
    for axis in Axis::ALL {
        let _ = writeln!(out, "f_{}              {:.2} Hz", axis.name(), to_hz(shape.frequencies[axis.index()]));
    }
    let _ = writeln!(out, "mean frequency   {:.2} Hz", to_hz(shape.mean_frequency));
    emit(None, &out)?;
    if let Some(path) = &a.scan_csv {
        if !(a.scan_step_um > 0.0) {
            return Err(invalid("scan step must be positive"));
        }
        let mut csv = String::from("axis,position_um,energy_nK\n");
        for (axis, x, e) in trap::axis_profiles(&cfg, &min, a.scan_step_um * 1e-6) {
            let _ = writeln!(csv, "{},{},{}", axis.name(), to_um(x), joule_to_nk(e));
        }
        emit(Some(path), &csv)?;
    }
    if let Some(path) = &a.write_config {
        let json = serde_json::to_string_pretty(&cfg).map_err(|e| ExperimentError::Io(e.to_string()))?;
        emit(Some(path), &(json + "\n"))?;
    }
    Ok(())
}

fn run_tf(a: &TfArgs) -> Result<()> {
    let cfg = a.source.load()?;
    if a.steps < 2 || !(a.from_nk > 0.0) || !(a.to_nk > a.from_nk) {
        return Err(invalid("need 0 < from < to and at least two steps"));
    }
    let mut csv = String::from("U0_nK,mu_nK,N_full_trap,N_harmonic\n");
    for i in 0..a.steps {
        let nk = a.from_nk * (a.to_nk / a.from_nk).powf(i as f64 / (a.steps - 1) as f64);
        let at = cfg.with_power(Axis::X, trap::power_for_depth(&cfg, nk_to_joule(nk))?);
        let shape = trap::analyze(&at)?;
        let mu = shape.minimum_energy + shape.barrier(Axis::X);
        let full = condensate::atom_number_in(&at, &shape, mu)?;
        let harmonic = condensate::harmonic_tf_number(shape.barrier(Axis::X), shape.mean_frequency, &at.constants);
        let _ = writeln!(csv, "{},{},{},{}", nk, joule_to_nk(shape.barrier(Axis::X)), full, harmonic);
    }
    emit(a.out.as_deref(), &csv)
}

fn run_noise(a: &NoiseArgs) -> Result<()> {
    let base = a.source.load()?;
    let at = base.with_power(Axis::X, trap::power_for_depth(&base, nk_to_joule(a.depth_nk))?);
    let spec = match &a.spec {
        Some(p) => {
            let section: NoiseSection = serde_json::from_str(&read(p)?).map_err(|e| invalid(e.to_string()))?;
            section.build(&base)?
        }
        None => noise::tuned_spec(&at, &noise::OPERATING_POINT_CONTRIBUTIONS)?,
    };
    let table = noise::contribution_table(&at, &spec, a.samples, a.seed)?;
    let mut out = String::new();
    let _ = writeln!(out, "depth {:.3} nK, nominal N {:.2}", a.depth_nk, table.nominal_n);
    let _ = writeln!(out, "{:<5} {:>10} {:>11} {:>12} {:>11}", "param", "sigma_%", "elasticity", "contrib_MC_%", "contrib_lin_%");
    for p in NoiseParam::ALL {
        let _ = writeln!(
            out,
            "{:<5} {:>10.4} {:>11.4} {:>12.4} {:>11.4}",
            p.name(),
            100.0 * spec.sigma(p),
            noise::elasticity(&at, p)?,
            table.per_param[&p],
            table.linear[&p]
        );
    }
    let _ = writeln!(out, "combined {:.4} %", table.combined);
    let model = FluctModel {
        delta_tech: a.delta_percent / 100.0,
        background_mean: a.background,
    };
    match noise::unity_crossing(&model) {
        Some(n) => {
            let _ = writeln!(out, "model crosses the Poisson level at N = {:.2}", n);
        }
        None => {
            let _ = writeln!(out, "model never reaches the Poisson level");
        }
    }
    emit(None, &out)?;
    if let Some(path) = &a.model_csv {
        if !(a.model_max_n >= 1.0) {
            return Err(invalid("model range must reach N = 1"));
        }
        let mut csv = String::from("N,sigma_rel,sigma_normalized\n");
        let steps = a.model_max_n.round() as usize;
        for i in 1..=steps {
            let n = i as f64;
            let _ = writeln!(
                csv,
                "{},{},{}",
                n,
                noise::model_relative_fluct(n, &model),
                noise::model_normalized_fluct(n, &model)
            );
        }
        emit(Some(path), &csv)?;
    }
    Ok(())
}

fn parse_trace(text: &str, bin_duration: f64) -> Result<CountTrace> {
    let mut counts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let mut cols = line.split(',');
        let (idx, c) = (cols.next(), cols.next());
        let c = match (idx, c) {
            (Some(_), Some(c)) => c,
            (Some(c), None) => c,
            _ => return Err(invalid(format!("line {}: expected bin_index,counts", i + 1))),
        };
        counts.push(c.trim().parse::<u64>().map_err(|e| invalid(format!("line {}: {}", i + 1, e)))?);
    }
    Ok(CountTrace { counts, bin_duration })
}

fn run_detect(a: &DetectArgs) -> Result<()> {
    let spec: DetectorSpec = match &a.detector {
        Some(p) => serde_json::from_str::<DetectorSection>(&read(p)?)
            .map_err(|e| invalid(e.to_string()))?
            .build()?,
        None => DetectorSpec::default(),
    };
    if a.simulate {
        let schedule = detector::random_loading(
            &mut rng::stream(a.seed, &[0]),
            a.duration_s,
            a.load_rate_per_s,
            a.loss_rate_per_s,
            a.max_atoms,
        );
        let trace = detector::simulate_trace(&schedule, &spec, a.duration_s, a.seed)?;
        let mut csv = String::from("bin_index,counts\n");
        for (i, c) in trace.counts.iter().enumerate() {
            let _ = writeln!(csv, "{},{}", i, c);
        }
        return emit(a.out.as_deref(), &csv);
    }
    let path = a.trace.as_ref().ok_or_else(|| invalid("give --trace or --simulate"))?;
    let trace = parse_trace(&read(path)?, spec.bin_duration)?;
    let segments = detector::detect_steps(&trace, &spec)?;
    let mut csv = String::from("start_bin,end_bin,n_atoms\n");
    for s in segments {
        let _ = writeln!(csv, "{},{},{}", s.start, s.end, s.atoms);
    }
    emit(a.out.as_deref(), &csv)
}

fn run_stats(a: &StatsArgs) -> Result<()> {
    let mut values = Vec::new();
    for (i, line) in read(&a.input)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) => values.push(v),
            Err(_) if i == 0 => {}
            Err(e) => return Err(invalid(format!("line {}: {}", i + 1, e))),
        }
    }
    let sample = Sample::new(values)?;
    let levels = ConfLevels {
        normalized: a.level_normalized,
        relative: a.level_relative,
    };
    let report = stats::fluct_report_lenient(&sample, levels)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| ExperimentError::Io(e.to_string()))?;
    emit(None, &(json + "\n"))?;
    if let Some(path) = &a.hist {
        let rule = match a.bin_width {
            Some(w) => BinRule::Width(w),
            None => BinRule::FreedmanDiaconis,
        };
        let hist = stats::histogram(&sample, rule);
        let mut csv = String::from("bin_center,count,poisson_overlay\n");
        for (b, p) in hist.bins.iter().zip(&hist.poisson_overlay) {
            let _ = writeln!(csv, "{},{},{}", b.center(), b.count, p);
        }
        emit(Some(path), &csv)?;
    }
    Ok(())
}

fn run_simulate(a: &SimulateArgs) -> Result<()> {
    let plan = PlanFile::from_json(&read(&a.plan)?)?.into_plan()?;
    let result = experiment::run_experiment(&plan)?;
    let written = experiment::write_outputs(&plan, &result, &a.out, a.svg)?;
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {}", e);
            return ExitCode::from(1);
        }
    }
    let outcome = match &cli.command {
        Command::Trap(a) => run_trap(a),
        Command::Tf(a) => run_tf(a),
        Command::Noise(a) => run_noise(a),
        Command::Detect(a) => run_detect(a),
        Command::Stats(a) => run_stats(a),
        Command::Simulate(a) => run_simulate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
