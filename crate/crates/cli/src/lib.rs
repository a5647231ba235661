//! Command-line front end: `funnel synthesize | certify | simulate |
//! export-levelset | export-spec`.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 invalid spec or
//! certificate file, 3 solver failure, 4 certification failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use funnel_core::certify::{certify, funnel_box, CertifyError, SamplingOptions, Verdict, TOL_PSD, TOL_RESIDUAL};
use funnel_core::io::{
    certificate_to_json, read_certificate, read_spec, spec_hash, spec_to_toml, write_atomic, IoError,
    LoadedCertificate,
};
use funnel_core::models::{self, NamedSpec};
use funnel_core::simulate::{
    export_levelset, integrate, monte_carlo, DisturbanceMode, Signal, SimulateError, SliceSpec,
};
use funnel_core::synthesis::{synthesize, CertStatus, SynthesisError, SynthesisOptions};
use funnel_core::{Polynomial, ProblemSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_SPEC: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CERTIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "funnel", version, about = "Funnel synthesis and verification for polynomial systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a funnel and feedback law, then certify the result.
    Synthesize(SynthesizeArgs),
    /// Re-verify a certificate file.
    Certify(CertifyArgs),
    /// Simulate the closed loop from one state or from sampled funnel states.
    Simulate(SimulateArgs),
    /// Sample the storage function on a slice of state space.
    ExportLevelset(LevelsetArgs),
    /// Print a spec in the editable file format.
    ExportSpec(SpecSource),
}

#[derive(Debug, Args, Clone)]
#[group(required = true, multiple = false)]
struct SpecSource {
    /// Built-in system name.
    #[arg(long)]
    builtin: Option<String>,
    /// Spec file (TOML).
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    source: SpecSource,
    #[arg(long, default_value_t = 4)]
    iters: usize,
    #[arg(long = "deg-V")]
    deg_v: Option<u32>,
    #[arg(long = "deg-k")]
    deg_k: Option<u32>,
    #[arg(long = "deg-s")]
    deg_s: Option<u32>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    tol_bisect: f64,
    /// Initial storage function in polynomial syntax.
    #[arg(long, allow_hyphen_values = true)]
    v0: Option<String>,
    /// Samples per containment in the final check.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CertifyArgs {
    certificate: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    certificate: PathBuf,
    /// Initial state, comma separated; without it, runs Monte-Carlo from
    /// states sampled in the funnel.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long)]
    dt: Option<f64>,
    /// Number of Monte-Carlo runs.
    #[arg(long, default_value_t = 100)]
    runs: usize,
    /// Draw random budget-respecting disturbances and parameters.
    #[arg(long)]
    disturbed: bool,
    /// Redraw rate of random signals in Hz.
    #[arg(long, default_value_t = 50.0)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LevelsetArgs {
    certificate: PathBuf,
    /// Time of the slice; defaults to the initial time.
    #[arg(long)]
    t: Option<f64>,
    /// Fixed coordinates as `x3=0.1`; every other state is free.
    #[arg(long = "fix")]
    fixed: Vec<String>,
    /// Range of each free coordinate as `lo:hi`, in state order; derived
    /// from the funnel when omitted.
    #[arg(long = "range", allow_hyphen_values = true)]
    ranges: Vec<String>,
    #[arg(long, default_value_t = 101)]
    resolution: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Everything a run was configured with; recorded in the manifest.
#[derive(Debug, Serialize)]
struct RunConfig {
    command: String,
    builtin: Option<String>,
    spec_path: Option<PathBuf>,
    certificate: Option<PathBuf>,
    deg_v: Option<u32>,
    deg_k: Option<u32>,
    deg_s: Option<u32>,
    eps: Option<f64>,
    iterations: Option<usize>,
    tol_bisect: Option<f64>,
    samples: Option<usize>,
    seed: u64,
    dt: Option<f64>,
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct StepTime {
    iteration: usize,
    gamma_seconds: f64,
    v_seconds: f64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    spec_name: String,
    spec_hash: String,
    config: &'a RunConfig,
    artifacts: Vec<String>,
    step_times: Vec<StepTime>,
    wall_seconds: f64,
    outcome: String,
}

/// A failed command: exit code plus message.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Failure {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let code = match e {
            IoError::Io(_) => EXIT_USAGE,
            _ => EXIT_SPEC,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<CertifyError> for Failure {
    fn from(e: CertifyError) -> Self {
        let code = match e {
            CertifyError::Malformed(_) => EXIT_SPEC,
            _ => EXIT_CERTIFY,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<SimulateError> for Failure {
    fn from(e: SimulateError) -> Self {
        match e {
            SimulateError::Invalid(m) => Failure::new(EXIT_USAGE, m),
            SimulateError::Sampler(e) => e.into(),
        }
    }
}

impl From<SynthesisError> for Failure {
    fn from(e: SynthesisError) -> Self {
        let code = match e {
            SynthesisError::Spec(_) | SynthesisError::NominalWithUncertainty => EXIT_SPEC,
            _ => EXIT_SOLVER,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::ExportLevelset(a) => cmd_levelset(a),
        Command::ExportSpec(a) => load_spec(&a).map(|ns| print!("{}", spec_to_toml(&ns.spec))),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load_spec(src: &SpecSource) -> Result<NamedSpec, Failure> {
    match (&src.builtin, &src.spec) {
        (Some(name), _) => models::builtin(name).ok_or_else(|| {
            Failure::new(
                EXIT_SPEC,
                format!("unknown builtin `{name}`; known: {}", models::BUILTINS.join(", ")),
            )
        }),
        (None, Some(path)) => {
            let spec = read_spec(path)?;
            Ok(NamedSpec {
                name: spec.name.clone(),
                notes: format!("read from {}", path.display()),
                spec,
                full_templates: None,
                v0: None,
            })
        }
        (None, None) => Err(Failure::new(EXIT_USAGE, "one of --builtin or --spec is required")),
    }
}

fn write(out: &Path, name: &str, contents: &str, artifacts: &mut Vec<String>) -> Outcome {
    write_atomic(&out.join(name), contents.as_bytes())?;
    artifacts.push(name.to_string());
    Ok(())
}

fn write_manifest(out: &Path, manifest: Manifest<'_>) -> Outcome {
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out.join("manifest.json"), format!("{text}\n").as_bytes())?;
    Ok(())
}

fn manifest<'a>(spec: &ProblemSpec, config: &'a RunConfig, start: Instant) -> Manifest<'a> {
    Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        spec_name: spec.name.clone(),
        spec_hash: spec_hash(spec),
        config,
        artifacts: Vec::new(),
        step_times: Vec::new(),
        wall_seconds: start.elapsed().as_secs_f64(),
        outcome: String::new(),
    }
}

fn sampling(samples: usize, seed: u64) -> SamplingOptions {
    SamplingOptions {
        samples,
        seed,
        ..SamplingOptions::default()
    }
}

fn cmd_synthesize(a: SynthesizeArgs) -> Outcome {
    let start = Instant::now();
    let ns = load_spec(&a.source)?;
    let mut spec = ns.spec.clone();
    if let Some(d) = a.deg_v {
        spec.templates.deg_v = d;
    }
    if let Some(d) = a.deg_k {
        spec.templates.deg_k = d;
    }
    if let Some(d) = a.deg_s {
        spec.templates.deg_s = d;
    }
    if let Some(e) = a.eps {
        spec.eps = e;
    }
    spec.validate().map_err(|e| Failure::new(EXIT_SPEC, e.to_string()))?;
    if a.iters == 0 || !(a.tol_bisect > 0.0) || a.samples == 0 {
        return Err(Failure::new(EXIT_USAGE, "--iters, --tol-bisect and --samples must be positive"));
    }
    let mut opts = SynthesisOptions {
        iterations: a.iters,
        tol_bisect: a.tol_bisect,
        ..SynthesisOptions::default()
    };
    opts.v0 = match &a.v0 {
        Some(text) => Some(
            Polynomial::parse(&spec.vars, text)
                .map_err(|e| Failure::new(EXIT_USAGE, format!("--v0: {e}")))?,
        ),
        None => ns.v0.clone(),
    };
    let config = RunConfig {
        command: "synthesize".into(),
        builtin: a.source.builtin.clone(),
        spec_path: a.source.spec.clone(),
        certificate: None,
        deg_v: Some(spec.templates.deg_v),
        deg_k: Some(spec.templates.deg_k),
        deg_s: Some(spec.templates.deg_s),
        eps: Some(spec.eps),
        iterations: Some(a.iters),
        tol_bisect: Some(a.tol_bisect),
        samples: Some(a.samples),
        seed: a.seed,
        dt: None,
        out: a.out.clone(),
    };

    let cert = match synthesize(&spec, &opts) {
        Ok(c) => c,
        Err(e) => {
            let mut m = manifest(&spec, &config, start);
            m.outcome = format!("synthesis failed: {e}");
            write_manifest(&a.out, m)?;
            return Err(e.into());
        }
    };
    let mut artifacts = Vec::new();
    let json = certificate_to_json(&cert, &spec, TOL_RESIDUAL, TOL_PSD);
    write(&a.out, "certificate.json", &json, &mut artifacts)?;
    let mut history = String::new();
    for (i, g) in cert.gamma_history.iter().enumerate() {
        let _ = writeln!(history, "{i} {g:e}");
    }
    write(&a.out, "gamma_history.txt", &history, &mut artifacts)?;

    let report = certify(&cert, &spec, TOL_RESIDUAL, TOL_PSD, &sampling(a.samples, a.seed));
    let mut m = manifest(&spec, &config, start);
    m.step_times = cert
        .timings
        .iter()
        .map(|t| StepTime {
            iteration: t.iteration,
            gamma_seconds: t.gamma_seconds,
            v_seconds: t.v_seconds,
        })
        .collect();
    let result = match report {
        Ok(rep) => {
            write(&a.out, "report.txt", &rep.to_text(), &mut artifacts)?;
            m.outcome = rep.verdict().as_str().to_string();
            if rep.verdict() == Verdict::Certified {
                Ok(())
            } else {
                Err(Failure::new(EXIT_CERTIFY, format!("verdict {}", rep.verdict().as_str())))
            }
        }
        Err(e) => {
            m.outcome = format!("certification failed: {e}");
            Err(e.into())
        }
    };
    if let CertStatus::Degraded(why) = &cert.status {
        m.outcome.push_str(&format!(" (degraded: {why})"));
    }
    m.artifacts = artifacts;
    m.wall_seconds = start.elapsed().as_secs_f64();
    write_manifest(&a.out, m)?;
    println!(
        "gamma {:e} after {} iterations; {}",
        cert.gamma,
        cert.gamma_history.len(),
        if result.is_ok() { "certified" } else { "not certified" }
    );
    result
}

fn cmd_certify(a: CertifyArgs) -> Outcome {
    let start = Instant::now();
    let LoadedCertificate {
        spec,
        cert,
        tol_residual,
        tol_psd,
    } = read_certificate(&a.certificate)?;
    if a.samples == 0 {
        return Err(Failure::new(EXIT_USAGE, "--samples must be positive"));
    }
    let config = RunConfig {
        command: "certify".into(),
        builtin: None,
        spec_path: None,
        certificate: Some(a.certificate.clone()),
        deg_v: None,
        deg_k: None,
        deg_s: None,
        eps: None,
        iterations: None,
        tol_bisect: None,
        samples: Some(a.samples),
        seed: a.seed,
        dt: None,
        out: a.out.clone(),
    };
    let rep = certify(&cert, &spec, tol_residual, tol_psd, &sampling(a.samples, a.seed))?;
    let mut artifacts = Vec::new();
    let text = rep.to_text();
    write(&a.out, "report.txt", &text, &mut artifacts)?;
    let mut m = manifest(&spec, &config, start);
    m.artifacts = artifacts;
    m.outcome = rep.verdict().as_str().into();
    write_manifest(&a.out, m)?;
    print!("{text}");
    if rep.verdict() == Verdict::Certified {
        Ok(())
    } else {
        Err(Failure::new(EXIT_CERTIFY, format!("verdict {}", rep.verdict().as_str())))
    }
}

fn cmd_simulate(a: SimulateArgs) -> Outcome {
    let start = Instant::now();
    let LoadedCertificate { spec, cert, .. } = read_certificate(&a.certificate)?;
    let dt = a.dt.unwrap_or((spec.t_final - spec.t0) / 2000.0).max(f64::MIN_POSITIVE);
    if !(a.rate > 0.0) {
        return Err(Failure::new(EXIT_USAGE, "--rate must be positive"));
    }
    let config = RunConfig {
        command: "simulate".into(),
        builtin: None,
        spec_path: None,
        certificate: Some(a.certificate.clone()),
        deg_v: None,
        deg_k: None,
        deg_s: None,
        eps: None,
        iterations: None,
        tol_bisect: None,
        samples: Some(a.runs),
        seed: a.seed,
        dt: Some(dt),
        out: a.out.clone(),
    };
    let mut artifacts = Vec::new();
    let outcome;
    if let Some(x0) = &a.x0 {
        let (w, d) = if a.disturbed {
            (Signal::energy_shaped(&spec, a.rate, a.seed), Signal::random_delta(&spec, a.rate, a.seed))
        } else {
            (Signal::zero(spec.nw), Signal::zero(spec.nd))
        };
        let tr = integrate(&spec, &cert, x0, dt, &w, &d)?;
        let mut text = String::from("# t x.. u.. w.. d.. tube_margin\n");
        text.push_str(&tr.to_columns());
        write(&a.out, "trace.dat", &text, &mut artifacts)?;
        outcome = format!(
            "final state {:?}; saturation events {}; exited {}; terminal margin {:?}",
            tr.final_state(),
            tr.saturation_events,
            tr.exited(),
            tr.terminal_margin
        );
    } else {
        let mode = if a.disturbed {
            DisturbanceMode::Random { rate: a.rate }
        } else {
            DisturbanceMode::None
        };
        let s = monte_carlo(&spec, &cert, a.runs, a.seed, dt, mode)?;
        let mut text = String::new();
        let _ = writeln!(text, "runs {}", s.runs);
        let _ = writeln!(text, "exits {}", s.exits);
        let _ = writeln!(text, "saturated_runs {}", s.saturated_runs);
        let _ = writeln!(text, "blowups {}", s.blowups);
        let _ = writeln!(text, "worst_tube_margin {:e}", s.worst_tube_margin);
        let _ = writeln!(text, "worst_terminal_margin {:e}", s.worst_terminal_margin);
        write(&a.out, "montecarlo.txt", &text, &mut artifacts)?;
        outcome = format!("{} of {} runs left the funnel", s.exits, s.runs);
    }
    let mut m = manifest(&spec, &config, start);
    m.artifacts = artifacts;
    m.outcome = outcome.clone();
    write_manifest(&a.out, m)?;
    println!("{outcome}");
    Ok(())
}

fn parse_range(text: &str) -> Result<(f64, f64), Failure> {
    let bad = || Failure::new(EXIT_USAGE, format!("range `{text}` is not `lo:hi`"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if hi > lo {
        Ok((lo, hi))
    } else {
        Err(bad())
    }
}

fn cmd_levelset(a: LevelsetArgs) -> Outcome {
    let start = Instant::now();
    let LoadedCertificate { spec, cert, .. } = read_certificate(&a.certificate)?;
    let t = a.t.unwrap_or(spec.t0);
    let mut fixed: Vec<Option<f64>> = vec![None; spec.n];
    for f in &a.fixed {
        let bad = || Failure::new(EXIT_USAGE, format!("`--fix {f}` is not `x<i>=<value>`"));
        let (name, value) = f.split_once('=').ok_or_else(bad)?;
        let i: usize = name.trim().strip_prefix('x').and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if i == 0 || i > spec.n {
            return Err(bad());
        }
        fixed[i - 1] = Some(value.trim().parse().map_err(|_| bad())?);
    }
    let free: Vec<usize> = (0..spec.n).filter(|&i| fixed[i].is_none()).collect();
    let ranges = if a.ranges.is_empty() {
        let bbox = funnel_box(&spec, &cert)?;
        free.iter().map(|&i| bbox[i]).collect()
    } else {
        a.ranges.iter().map(|r| parse_range(r)).collect::<Result<Vec<_>, _>>()?
    };
    let slice = SliceSpec {
        fixed,
        ranges,
        resolution: a.resolution,
    };
    let grid = export_levelset(&spec, &cert, t, &slice)?;
    let config = RunConfig {
        command: "export-levelset".into(),
        builtin: None,
        spec_path: None,
        certificate: Some(a.certificate.clone()),
        deg_v: None,
        deg_k: None,
        deg_s: None,
        eps: None,
        iterations: None,
        tol_bisect: None,
        samples: None,
        seed: 0,
        dt: None,
        out: a.out.clone(),
    };
    let mut artifacts = Vec::new();
    write(&a.out, "levelset.dat", &grid.to_gnuplot(), &mut artifacts)?;
    if grid.axes.len() == 2 {
        write(&a.out, "contour.dat", &grid.contour_gnuplot(), &mut artifacts)?;
    }
    let mut m = manifest(&spec, &config, start);
    m.artifacts = artifacts;
    m.outcome = format!("slice at t = {t}, level {:e}", grid.level);
    write_manifest(&a.out, m)?;
    Ok(())
}
