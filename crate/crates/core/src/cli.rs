//! Command-line front end. Every subcommand writes its artifacts to
//! `--out-dir` plus a `metadata.json` holding the invocation and timestamp,
//! so that the artifacts themselves are reproducible byte for byte.
//!
//! Exit codes: 0 success or pass, 1 violation found, 2 usage or runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::augment::{augment_gas, augment_iss};
use crate::certificate::{
    self, CertificateFile, Condition, FalsifyBudget, GasDecrease, IssDecrease, IssForm, Sandwich, UgasDecrease,
    UgasSandwich,
};
use crate::comparison::{construct_rho, KInfFn, KLFn};
use crate::domain::BoxRegion;
use crate::envelope::{self, EnsembleSpec};
use crate::metric::{self, Metric};
use crate::rng::{task_rng, Stream};
use crate::system::{integrate, ControlSystem, InputSignal, SystemSpec, VectorField};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "incstab", version, about = "Check, falsify and validate incremental-stability certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the certificate conditions over a box and report the worst violation.
    Check(CertArgs),
    /// Search for a counterexample to the certificate conditions.
    Falsify(FalsifyArgs),
    /// Integrate a system and write the trajectory as CSV.
    Simulate(SimulateArgs),
    /// Write the augmented system on the doubled state space.
    Augment(AugmentArgs),
    /// Fit KL envelopes (and ISS gains) to simulated ensembles.
    Envelope(EnvelopeArgs),
    /// Construct the disturbance scaling rho from beta and gamma.
    Rho(RhoArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Gas,
    Iss,
    Ugas,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FormArg {
    Sum,
    Implication,
}

impl From<FormArg> for IssForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Sum => IssForm::Sum,
            FormArg::Implication => IssForm::Implication,
        }
    }
}

#[derive(Args, Debug)]
struct CertArgs {
    #[arg(long, value_enum, default_value = "gas")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "sum")]
    iss_form: FormArg,
    /// System JSON file.
    #[arg(long)]
    system: PathBuf,
    /// Certificate JSON file.
    #[arg(long)]
    certificate: PathBuf,
    /// State box as `LO HI` for every coordinate.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, default_values_t = [-2.0, 2.0])]
    domain: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct FalsifyArgs {
    #[command(flatten)]
    cert: CertArgs,
    /// Evaluations allowed for local ascent after sampling.
    #[arg(long, default_value_t = 20_000)]
    refine: usize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    system: PathBuf,
    /// Initial state.
    #[arg(long, num_args = 1.., allow_negative_numbers = true, required = true)]
    x0: Vec<f64>,
    /// Constant input; a random piecewise-constant signal is used when absent.
    #[arg(long, num_args = 1.., allow_negative_numbers = true)]
    input: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    /// Cell length of the random signal.
    #[arg(long, default_value_t = 0.5)]
    cell: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AugmentMode {
    Gas,
    Iss,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long, value_enum, default_value = "gas")]
    mode: AugmentMode,
    /// Metric JSON file (iss mode).
    #[arg(long)]
    metric: Option<PathBuf>,
    /// Class-K∞ function JSON file for rho (iss mode).
    #[arg(long)]
    rho: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EnvelopeArgs {
    #[arg(long)]
    system: PathBuf,
    /// Metric JSON file; Euclidean when absent.
    #[arg(long)]
    metric: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gas")]
    mode: Mode,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1e-2)]
    step: f64,
    #[arg(long, default_value_t = 0.5)]
    cell: f64,
    /// Box for initial states as `LO HI` for every coordinate.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, default_values_t = [-2.0, 2.0])]
    domain: Vec<f64>,
    /// Exponents tried for the gain family `c·r^p`.
    #[arg(long, num_args = 1.., default_values_t = [1.0])]
    gain_powers: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct RhoArgs {
    /// KL function JSON file, `{"k": {...}, "lambda": ...}`.
    #[arg(long)]
    beta: PathBuf,
    /// Class-K∞ function JSON file.
    #[arg(long)]
    gamma: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Any failure that maps to exit code 2.
#[derive(Debug)]
pub struct CliError(String);

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError(e.to_string())
    }
}

fn fail(msg: impl Into<String>) -> CliError {
    CliError(msg.into())
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return EXIT_ERROR;
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Check(a) => cmd_check(&a, &argv),
        Command::Falsify(a) => cmd_falsify(&a, &argv),
        Command::Simulate(a) => cmd_simulate(&a, &argv),
        Command::Augment(a) => cmd_augment(&a, &argv),
        Command::Envelope(a) => cmd_envelope(&a, &argv),
        Command::Rho(a) => cmd_rho(&a, &argv),
    };
    match result {
        Ok(code) => code,
        Err(CliError(msg)) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            EXIT_ERROR
        }
    }
}

fn load<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| fail(format!("cannot read {what} file {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| fail(format!("invalid {what} file {}: {e}", path.display())))
}

fn load_system(path: &Path) -> Result<ControlSystem, CliError> {
    let spec: SystemSpec = load(path, "system")?;
    ControlSystem::from_spec(spec).map_err(|e| fail(format!("invalid system file {}: {e}", path.display())))
}

fn domain_box(bounds: &[f64], n: usize) -> Result<BoxRegion, CliError> {
    let [lo, hi] = bounds else {
        return Err(fail("--domain takes two values"));
    };
    Ok(BoxRegion::cube(n, *lo, *hi)?)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text).map_err(|e| fail(format!("cannot write {}: {e}", dir.join(name).display())))
}

fn prepare(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| fail(format!("cannot create {}: {e}", dir.display())))
}

fn write_metadata(dir: &Path, argv: &[String], seed: Option<u64>) -> Result<(), CliError> {
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    write_json(
        dir,
        "metadata.json",
        &json!({
            "argv": argv,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
            "timestamp_unix": timestamp,
        }),
    )
}

struct Loaded {
    sys: ControlSystem,
    cert: CertificateFile,
    domain: BoxRegion,
}

fn load_cert_args(a: &CertArgs) -> Result<Loaded, CliError> {
    let sys = load_system(&a.system)?;
    let cert: CertificateFile = load(&a.certificate, "certificate")?;
    let domain = domain_box(&a.domain, sys.state_dim())?;
    warn_injectivity(&cert.metric, &domain)?;
    Ok(Loaded { sys, cert, domain })
}

/// Pullback maps are only checked for collisions on a grid over the domain; a hit is a warning.
fn warn_injectivity(m: &Metric, domain: &BoxRegion) -> Result<(), CliError> {
    if !matches!(m, Metric::Pullback { .. }) {
        return Ok(());
    }
    let report = metric::injectivity_check(m, domain, 2000)?;
    if let Some((a, b)) = &report.example {
        eprintln!(
            "warning: pullback map is not injective on the domain: {} collisions among {} grid points, e.g. {a:?} and {b:?}",
            report.collisions, report.samples
        );
    }
    Ok(())
}

fn cmd_check(a: &CertArgs, argv: &[String]) -> Result<i32, CliError> {
    let Loaded { sys, cert, domain } = load_cert_args(a)?;
    let n = sys.state_dim();
    let (gradient, checks) = match a.mode {
        Mode::Gas => {
            let c = cert.gas(n)?;
            let g = c.gradient_check(&domain, a.seed)?;
            let s = certificate::check_sandwich(&c, &domain, a.samples, a.seed)?;
            let d = certificate::check_decrease_gas(&c, &sys, &domain, a.samples, a.seed)?;
            (g, vec![s, d])
        }
        Mode::Iss => {
            let c = cert.iss(n)?;
            let g = c.gas.gradient_check(&domain, a.seed)?;
            let s = certificate::check_sandwich(&c.gas, &domain, a.samples, a.seed)?;
            let d = certificate::check_decrease_iss(&c, &sys, &domain, a.samples, a.seed, a.iss_form.into())?;
            (g, vec![s, d])
        }
        Mode::Ugas => {
            let c = cert.ugas(n)?;
            let g = c.gradient_check(&domain, a.seed)?;
            let r = certificate::check_ugas(&c, &sys, &domain, a.samples, a.seed)?;
            (g, vec![r.sandwich, r.decrease])
        }
    };
    let passed = checks.iter().all(|c| c.passed());
    prepare(&a.out_dir)?;
    write_json(
        &a.out_dir,
        "report.json",
        &json!({
            "command": "check",
            "mode": a.mode,
            "system": sys.name(),
            "seed": a.seed,
            "samples": a.samples,
            "passed": passed,
            "gradient_check": gradient,
            "checks": checks,
        }),
    )?;
    write_metadata(&a.out_dir, argv, Some(a.seed))?;
    for c in &checks {
        println!("{}: {:?} (worst violation {:e})", c.condition, c.verdict, c.worst_violation);
    }
    Ok(if passed { EXIT_OK } else { EXIT_VIOLATION })
}

fn cmd_falsify(f: &FalsifyArgs, argv: &[String]) -> Result<i32, CliError> {
    let a = &f.cert;
    let Loaded { sys, cert, domain } = load_cert_args(a)?;
    let n = sys.state_dim();
    let budget = FalsifyBudget {
        samples: a.samples,
        refine_evals: f.refine,
    };
    let run = |conds: &[&dyn Condition]| -> Result<Vec<certificate::FalsifyReport>, CliError> {
        conds.iter().map(|c| Ok(certificate::falsify(*c, budget, a.seed)?)).collect()
    };
    let reports = match a.mode {
        Mode::Gas => {
            let c = cert.gas(n)?;
            c.gradient_check(&domain, a.seed)?.into_result()?;
            run(&[
                &Sandwich { cert: &c, domain: domain.clone() },
                &GasDecrease { cert: &c, sys: &sys, domain: domain.clone() },
            ])?
        }
        Mode::Iss => {
            let c = cert.iss(n)?;
            let form: IssForm = a.iss_form.into();
            if form == IssForm::Implication && c.phi.is_none() {
                return Err(fail("implication form needs `phi` in the certificate"));
            }
            c.gas.gradient_check(&domain, a.seed)?.into_result()?;
            run(&[
                &Sandwich { cert: &c.gas, domain: domain.clone() },
                &IssDecrease { cert: &c, sys: &sys, domain: domain.clone(), form },
            ])?
        }
        Mode::Ugas => {
            let c = cert.ugas(n)?;
            c.gradient_check(&domain, a.seed)?.into_result()?;
            run(&[
                &UgasSandwich { cert: &c, domain: domain.clone() },
                &UgasDecrease { cert: &c, sys: &sys, domain: domain.clone() },
            ])?
        }
    };
    let found = reports.iter().any(|r| r.counterexample.is_some());
    prepare(&a.out_dir)?;
    write_json(
        &a.out_dir,
        "report.json",
        &json!({
            "command": "falsify",
            "mode": a.mode,
            "system": sys.name(),
            "seed": a.seed,
            "counterexample_found": found,
            "results": reports,
        }),
    )?;
    write_metadata(&a.out_dir, argv, Some(a.seed))?;
    for r in &reports {
        match &r.counterexample {
            Some(cx) => println!("{}: counterexample {} (violation {:e})", r.condition, serde_json::to_string(&cx.point)?, cx.violation),
            None => println!("{}: none found (best violation {:e})", r.condition, r.best_violation),
        }
    }
    Ok(if found { EXIT_VIOLATION } else { EXIT_OK })
}

fn cmd_simulate(a: &SimulateArgs, argv: &[String]) -> Result<i32, CliError> {
    let sys = load_system(&a.system)?;
    let signal = match &a.input {
        Some(u) => InputSignal::constant(u.clone(), a.horizon, a.cell)?,
        None if sys.input_dim() == 0 => InputSignal::constant(vec![], a.horizon, a.cell)?,
        None => {
            let mut rng = task_rng(a.seed, Stream::Signals, 0);
            InputSignal::random(sys.input_set(), a.horizon, a.cell, &mut rng)?
        }
    };
    let traj = integrate(&sys, &a.x0, &signal, a.horizon, a.step)?;
    prepare(&a.out_dir)?;
    let path = a.out_dir.join("trajectory.csv");
    let file = fs::File::create(&path).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))?;
    traj.write_csv(std::io::BufWriter::new(file))?;
    write_metadata(&a.out_dir, argv, Some(a.seed))?;
    println!("wrote {} rows to {}", traj.times.len(), path.display());
    Ok(EXIT_OK)
}

fn cmd_augment(a: &AugmentArgs, argv: &[String]) -> Result<i32, CliError> {
    let sys = load_system(&a.system)?;
    let asys = match a.mode {
        AugmentMode::Gas => augment_gas(&sys),
        AugmentMode::Iss => {
            let metric: Metric = match &a.metric {
                Some(p) => load(p, "metric")?,
                None => return Err(fail("iss mode needs --metric")),
            };
            let rho: KInfFn = match &a.rho {
                Some(p) => load(p, "rho")?,
                None => return Err(fail("iss mode needs --rho")),
            };
            augment_iss(&sys, &metric, &rho)?
        }
    };
    prepare(&a.out_dir)?;
    write_json(&a.out_dir, "augmented.json", &asys.to_spec())?;
    write_metadata(&a.out_dir, argv, None)?;
    println!("wrote {}", a.out_dir.join("augmented.json").display());
    Ok(EXIT_OK)
}

fn cmd_envelope(a: &EnvelopeArgs, argv: &[String]) -> Result<i32, CliError> {
    let sys = load_system(&a.system)?;
    let metric: Metric = match &a.metric {
        Some(p) => load(p, "metric")?,
        None => Metric::Euclidean,
    };
    let spec = EnsembleSpec {
        pairs: a.pairs,
        horizon: a.horizon,
        step: a.step,
        cell: a.cell,
        region: domain_box(&a.domain, sys.state_dim())?,
        ..EnsembleSpec::new(sys.state_dim(), a.seed)
    };
    warn_injectivity(&metric, &spec.region)?;
    let (gas, gas_ensemble) = envelope::estimate_gas_envelope(&sys, &metric, &spec)?;
    let mut report = json!({
        "command": "envelope",
        "mode": a.mode,
        "system": sys.name(),
        "seed": a.seed,
        "ensemble": spec,
        "gas": gas,
    });
    let mut traces = gas_ensemble;
    let mut passed = gas.exists;
    if a.mode != Mode::Gas && gas.exists {
        let beta = gas.beta.expect("envelope exists");
        let (gain, iss_ensemble) = envelope::estimate_iss_gain(&sys, &metric, &beta, &spec, &a.gain_powers)?;
        passed = gain.exists;
        report["iss"] = serde_json::to_value(&gain)?;
        traces = iss_ensemble;
        if a.mode == Mode::Ugas && gain.exists {
            // a zero gain is replaced by the identity, which is still an upper bound
            let gamma = gain.gamma.unwrap_or_else(KInfFn::identity);
            let rho = envelope::rho_from_fit(&beta, &gamma)?;
            let asys = augment_iss(&sys, &metric, &rho)?;
            let (ugas, ugas_ensemble) = envelope::validate_ugas(&asys, &metric, &spec)?;
            passed = ugas.exists;
            report["rho"] = serde_json::to_value(rho)?;
            report["ugas"] = serde_json::to_value(&ugas)?;
            traces = ugas_ensemble;
        }
    }
    report["passed"] = json!(passed);
    prepare(&a.out_dir)?;
    write_json(&a.out_dir, "envelope.json", &report)?;
    let path = a.out_dir.join("traces.csv");
    let file = fs::File::create(&path).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))?;
    traces.write_csv(std::io::BufWriter::new(file))?;
    write_metadata(&a.out_dir, argv, Some(a.seed))?;
    println!("envelope: {}", if passed { "found" } else { "not found" });
    Ok(if passed { EXIT_OK } else { EXIT_VIOLATION })
}

fn cmd_rho(a: &RhoArgs, argv: &[String]) -> Result<i32, CliError> {
    let beta: KLFn = load(&a.beta, "beta")?;
    let gamma: KInfFn = load(&a.gamma, "gamma")?;
    let rho = construct_rho(&beta, &gamma)?;
    prepare(&a.out_dir)?;
    write_json(&a.out_dir, "rho.json", &rho)?;
    write_metadata(&a.out_dir, argv, None)?;
    println!("{}", serde_json::to_string(&rho)?);
    Ok(EXIT_OK)
}
