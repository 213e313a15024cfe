//! Batch commands behind the `mfeq` binary. Each command reads an
//! [`ExperimentConfig`], writes its artifacts into the output directory and a
//! `manifest.json` carrying the echoed config and a SHA-256 per artifact.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::convergence::convergence_report;
use crate::error::{Error, Result};
use crate::limit::LimitSolution;
use crate::model::{EndowmentSpec, MarketConfig};
use crate::nagent::{h2_norm, picard_solve};
use crate::paths::{energy_inequality_check, simulate_paths, Noise, PathBundle, DEFAULT_MEMORY_CAP};
use crate::verify::{drift_check, perturbation_family, structural_checks, utility_compare, DriverForm};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_VIOLATION: u8 = 4;

/// Stream ids of the out-of-sample bundle start here, clear of the ids
/// `0..=N` used for the solve.
pub const FRESH_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Parser)]
#[command(name = "mfeq", version, about = "Finite-agent equilibrium and mean-field limit experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed; overrides the config and MFB_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Replace the differenced driver with a known-wrong form.
    #[arg(long, hide = true)]
    pub inject_driver_typo: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate paths; write the binary dump and increment moments.
    Simulate(CommonArgs),
    /// Tabulate the limit value and price on a (t, b) grid.
    Limit(CommonArgs),
    /// Solve the N-agent equilibrium.
    Solve(CommonArgs),
    /// Sweep N and compare with the mean-field limit.
    Converge(CommonArgs),
    /// Optimality and structural checks on a solved instance.
    Verify(CommonArgs),
    /// Structural checks on the driver only.
    CheckConditions(CommonArgs),
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a)
            | Command::Limit(a)
            | Command::Solve(a)
            | Command::Converge(a)
            | Command::Verify(a)
            | Command::CheckConditions(a) => a,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Limit(_) => "limit",
            Command::Solve(_) => "solve",
            Command::Converge(_) => "converge",
            Command::Verify(_) => "verify",
            Command::CheckConditions(_) => "check-conditions",
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::DimensionMismatch(_)
        | Error::SparsityViolation { .. }
        | Error::MalformedDump(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_VALIDATION,
        Error::ResourceExhausted { .. }
        | Error::RankDeficient { .. }
        | Error::OutsideReverseHolderRange { .. }
        | Error::NoConvergence { .. }
        | Error::WeightDegeneracy { .. } => EXIT_NUMERICAL,
        Error::TranscriptionMismatch { .. } => EXIT_VIOLATION,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
struct Artifact {
    file: String,
    bytes: usize,
    sha256: String,
}

/// Output directory plus the artifacts written so far.
struct Run {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Run {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Run { dir, artifacts: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.artifacts.push(Artifact { file: name.into(), bytes: bytes.len(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.write(name, &text)
    }

    fn manifest(&self, command: &str, config: &ExperimentConfig, extra: Value, elapsed: Option<f64>) -> Result<()> {
        let config_echo: Value = serde_json::from_str(&config.to_json())?;
        let mut m = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": config.seed(),
            "config": config_echo,
            "artifacts": self.artifacts,
        });
        if let (Value::Object(map), Value::Object(more)) = (&mut m, extra) {
            map.extend(more);
        }
        if let (Some(t), Value::Object(map)) = (elapsed, &mut m) {
            map.insert("wall_time_s".into(), json!(t));
        }
        let mut text = serde_json::to_vec_pretty(&m)?;
        text.push(b'\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn progress(msg: &str) {
    eprintln!("[mfeq] {msg}");
}

fn warn_unbounded(spec: &EndowmentSpec) {
    if !spec.is_bounded() {
        progress("warning: the linear test endowment is unbounded and outside the model's assumptions");
    }
}

/// Loads and resolves the config for a command.
pub fn prepare(args: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&args.config)?;
    let env = std::env::var("MFB_SEED").ok();
    config.resolve_seed(args.seed, env.as_deref())?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&config.output.dir));
    Ok((config, dir))
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let args = cli.command.args().clone();
    if let Some(n) = args.threads {
        if n == 0 {
            progress("error: --threads must be positive");
            return EXIT_VALIDATION;
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = prepare(&args).and_then(|(config, dir)| {
        let form = if args.inject_driver_typo { DriverForm::InjectedTypo } else { DriverForm::Equilibrium };
        dispatch(&cli.command, &config, &dir, form)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            progress(&format!("error: {e}"));
            if let Error::NoConvergence { residuals, .. } = &e {
                progress(&format!("residual trace: {residuals:?}"));
            }
            exit_code(&e)
        }
    }
}

pub fn dispatch(command: &Command, config: &ExperimentConfig, dir: &Path, form: DriverForm) -> Result<u8> {
    let start = Instant::now();
    let mut run = Run::new(dir.to_path_buf())?;
    let (extra, code) = match command {
        Command::Simulate(_) => cmd_simulate(config, &mut run)?,
        Command::Limit(_) => cmd_limit(config, &mut run)?,
        Command::Solve(_) => cmd_solve(config, &mut run)?,
        Command::Converge(_) => cmd_converge(config, &mut run)?,
        Command::Verify(_) => cmd_verify(config, &mut run, form)?,
        Command::CheckConditions(_) => cmd_check_conditions(config, &mut run, form)?,
    };
    let elapsed = config.output.timing.then(|| start.elapsed().as_secs_f64());
    run.manifest(command.name(), config, extra, elapsed)?;
    Ok(code)
}

type Outcome = (Value, u8);

#[derive(Debug, Serialize)]
struct Moment {
    component: String,
    mean: f64,
    variance: f64,
    expected_variance: f64,
    mean_z: f64,
    variance_z: f64,
}

/// Increment moments with CLT z-scores against `N(0, dt)`.
pub fn moment_report(bundle: &PathBundle) -> Value {
    let dt = bundle.grid().dt();
    let count = (bundle.paths() * bundle.steps()) as f64;
    let comps = std::iter::once((Noise::Common, "B".to_string()))
        .chain((0..bundle.agents()).map(|i| (Noise::Own(i), format!("W{}", i + 1))));
    let moments: Vec<Moment> = comps
        .map(|(noise, component)| {
            let (mean, variance) = bundle.increment_moments(noise);
            Moment {
                component,
                mean,
                variance,
                expected_variance: dt,
                mean_z: mean / (dt / count).sqrt(),
                variance_z: (variance - dt) / (dt * (2.0 / (count - 1.0)).sqrt()),
            }
        })
        .collect();
    let worst = moments.iter().map(|m| m.mean_z.abs().max(m.variance_z.abs())).fold(0.0, f64::max);
    json!({ "moments": moments, "max_abs_z": worst, "within_clt_bounds": worst <= 5.0 })
}

fn cmd_simulate(config: &ExperimentConfig, run: &mut Run) -> Result<Outcome> {
    progress("simulating paths");
    let bundle = PathBundle::simulate(&config.market(), DEFAULT_MEMORY_CAP)?;
    let mut dump = Vec::new();
    bundle.write_dump(&mut dump)?;
    run.write("paths.bin", &dump)?;
    run.write_json("moments.json", &moment_report(&bundle))?;
    Ok((json!({}), EXIT_OK))
}

fn cmd_limit(config: &ExperimentConfig, run: &mut Run) -> Result<Outcome> {
    let spec = config.spec();
    warn_unbounded(&spec);
    progress("building limit solution");
    let sol = LimitSolution::new(&spec, config.horizon, config.solver.quadrature_order)?;
    let g = &config.limit_grid;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "b", "Y", "lambda"])?;
    for j in 0..g.times {
        let t = if g.times == 1 { 0.0 } else { config.horizon * j as f64 / (g.times - 1) as f64 };
        for i in 0..g.points {
            let b = if g.points == 1 { 0.0 } else { -g.b_max + 2.0 * g.b_max * i as f64 / (g.points - 1) as f64 };
            w.write_record([t.to_string(), b.to_string(), sol.value(t, b).to_string(), sol.mpr(t, b).value.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    run.write("limit.csv", &bytes)?;
    Ok((json!({}), EXIT_OK))
}

fn cmd_solve(config: &ExperimentConfig, run: &mut Run) -> Result<Outcome> {
    let spec = config.spec();
    warn_unbounded(&spec);
    progress("simulating paths");
    let bundle = simulate_paths(&config.market())?;
    progress("Picard iteration");
    let sol = picard_solve(&bundle, &spec, &config.basis(), &config.solver)?;
    progress(&format!("converged in {} iterations", sol.iterations));
    let mut csv_bytes = Vec::new();
    sol.write_csv(&bundle.grid(), config.output.csv_paths, &mut csv_bytes)?;
    run.write("equilibrium.csv", &csv_bytes)?;
    let mut summary = serde_json::to_value(sol.summary())?;
    if spec.is_bounded() {
        let limit = LimitSolution::new(&spec, config.horizon, config.solver.quadrature_order)?;
        let lp = limit.along_paths(&bundle);
        summary["h2_lambda_vs_limit"] = json!(h2_norm(&sol.lambda.sub(&lp.lambda)?, bundle.grid().dt()));
    }
    run.write_json("summary.json", &summary)?;
    Ok((json!({}), EXIT_OK))
}

fn cmd_converge(config: &ExperimentConfig, run: &mut Run) -> Result<Outcome> {
    let spec = config.spec();
    warn_unbounded(&spec);
    let outcome = convergence_report(&config.sweep_config(), progress)?;
    let mut bytes = Vec::new();
    outcome.write_csv(&mut bytes)?;
    run.write("convergence.csv", &bytes)?;
    let code = if outcome.rows.is_empty() { EXIT_NUMERICAL } else { EXIT_OK };
    if !outcome.failures.is_empty() {
        progress(&format!("{} of {} sweep entries failed", outcome.failures.len(), config.sweep.agents.len()));
    }
    Ok((json!({ "failures": outcome.failures, "partial": !outcome.failures.is_empty() }), code))
}

fn structural(config: &ExperimentConfig, form: DriverForm) -> Result<(Vec<crate::verify::StructuralReport>, bool)> {
    let v = &config.verify;
    let mut reports = Vec::new();
    for &n in &v.condition_agents {
        progress(&format!("structural checks N={n}"));
        reports.push(structural_checks(n, v.condition_samples, v.radius, config.seed(), form)?);
    }
    let pass = reports.iter().all(|r| r.pass);
    Ok((reports, pass))
}

fn cmd_check_conditions(config: &ExperimentConfig, run: &mut Run, form: DriverForm) -> Result<Outcome> {
    let (reports, pass) = structural(config, form)?;
    run.write_json("conditions.json", &json!({ "conditions": reports, "pass": pass }))?;
    Ok((json!({ "pass": pass }), if pass { EXIT_OK } else { EXIT_VIOLATION }))
}

fn cmd_verify(config: &ExperimentConfig, run: &mut Run, form: DriverForm) -> Result<Outcome> {
    let spec = config.spec();
    warn_unbounded(&spec);
    let v = &config.verify;
    progress("solving");
    let bundle = simulate_paths(&config.market())?;
    let basis = config.basis();
    let sol = picard_solve(&bundle, &spec, &basis, &config.solver)?;

    progress("evaluating policy on fresh paths");
    let fresh_cfg = MarketConfig::new(config.agents, config.horizon, config.steps, v.eval_paths, config.seed());
    let streams = (0..=config.agents as u64).map(|c| FRESH_STREAM_BASE + c).collect();
    let fresh = PathBundle::simulate_streams(&fresh_cfg, streams, DEFAULT_MEMORY_CAP)?;
    let policy = sol.fitted_policy().evaluate(&fresh)?;
    let drift = drift_check(&policy, &fresh, v.agent, v.perturbations, v.points, config.seed())?;
    let utility = utility_compare(&policy, &fresh, &spec, &perturbation_family(config.seed()), v.agent)?;

    progress("energy inequality");
    let energy = [1u32, 2]
        .iter()
        .map(|&p| energy_inequality_check(&sol.lambda, &bundle, &basis, p))
        .collect::<Result<Vec<_>>>()?;
    let energy_pass = energy.iter().all(|e| !e.violated);

    let (conditions, cond_pass) = structural(config, form)?;
    let pass = drift.pass && utility.pass && energy_pass && cond_pass;
    let report = json!({
        "solve": sol.summary(),
        "drift": drift,
        "utility": utility,
        "energy": energy,
        "conditions": conditions,
        "pass": pass,
    });
    run.write_json("verify.json", &report)?;
    Ok((json!({ "pass": pass }), if pass { EXIT_OK } else { EXIT_VIOLATION }))
}

/// Hex SHA-256 of a file, for comparing runs.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}
