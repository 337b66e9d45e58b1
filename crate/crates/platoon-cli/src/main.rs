//! Command-line harness for the platoon simulator and certificate suite.
//!
//! One binary, three subcommands:
//! `simulate` integrates a scenario and writes a trajectory CSV, an audit
//! JSON, and a run manifest; `certify` evaluates the closed-form guarantees
//! and writes a certificate report; `sweep` re-runs a scenario across one
//! varied parameter and writes a summary CSV.
//!
//! Exit codes are a stable contract: 0 success, 1 input error, 2 runtime
//! monitor violation (barrier breach or collision), 3 certificate failure.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use platoon_core::certificates::{self, CertificateReport, TrajectoryAudit, ZbarMode};
use platoon_core::engine::{EngineError, Simulator, Trajectory};
use platoon_core::model::{self, Scenario};

const EXIT_INPUT: u8 = 1;
const EXIT_MONITOR: u8 = 2;
const EXIT_CERTIFICATE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "platoon",
    version,
    about = "Adaptive vehicle-platoon simulation and guarantee certification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a scenario; write trajectory.csv, audit.json, manifest.json.
    Simulate {
        /// Scenario JSON file; any omitted field takes its built-in default.
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory, created if missing.
        #[arg(long, default_value = "platoon-out")]
        out: PathBuf,
        /// Reserved for future stochastic features; accepted and ignored.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the closed-form guarantees; write the report JSON.
    Certify {
        /// Scenario JSON file; any omitted field takes its built-in default.
        #[arg(long)]
        scenario: PathBuf,
        /// Output path for the certificate report JSON.
        #[arg(long, default_value = "certificate.json")]
        out: PathBuf,
        /// Tracking-radius variant gating the standstill check.
        #[arg(long, value_enum, default_value_t = ModeArg::Sound)]
        mode: ModeArg,
        /// Reserved for future stochastic features; accepted and ignored.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one simulation per parameter value; write summary.csv.
    Sweep {
        /// Scenario JSON file; any omitted field takes its built-in default.
        #[arg(long)]
        scenario: PathBuf,
        /// Which parameter to vary.
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Output directory, created if missing.
        #[arg(long, default_value = "platoon-out")]
        out: PathBuf,
        /// Reserved for future stochastic features; accepted and ignored.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Literal radius formula c / lambda_min(P).
    Paper,
    /// Norm-equivalence radius c / sqrt(lambda_min(P)); provably valid.
    Sound,
}

impl From<ModeArg> for ZbarMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Paper => ZbarMode::Paper,
            ModeArg::Sound => ZbarMode::Sound,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    /// Adaptation-rate scale: all three gain-update weights become value * I.
    Gamma,
    /// Barrier radius.
    C,
    /// Integration step.
    Dt,
    /// Scales every vehicle's deviation from nominal parameters.
    HeterogeneityScale,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::C => "c",
            SweepParam::Dt => "dt",
            SweepParam::HeterogeneityScale => "heterogeneity-scale",
        }
    }
}

/// Command failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
    fn monitor(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_MONITOR,
            message: message.into(),
        }
    }
    fn certificate(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CERTIFICATE,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let informational = matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if informational {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_INPUT)
            };
        }
    };

    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PLATOON_LOG", "warn"))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Simulate {
            scenario,
            out,
            seed,
        } => {
            note_seed(seed);
            cmd_simulate(&scenario, &out)
        }
        Command::Certify {
            scenario,
            out,
            mode,
            seed,
        } => {
            note_seed(seed);
            cmd_certify(&scenario, &out, mode.into())
        }
        Command::Sweep {
            scenario,
            param,
            values,
            out,
            seed,
        } => {
            note_seed(seed);
            cmd_sweep(&scenario, param, &values, &out)
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn note_seed(seed: Option<u64>) {
    if let Some(s) = seed {
        log::info!("--seed {s} accepted but unused; all runs are deterministic");
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::input(format!("cannot parse {}: {e}", path.display())))
}

fn engine_failure(e: EngineError) -> Failure {
    match e {
        EngineError::BarrierViolation { .. } | EngineError::NonFiniteDerivative { .. } => {
            Failure::monitor(e.to_string())
        }
        other => Failure::input(other.to_string()),
    }
}

/// Writes via a sibling temp file and rename, so a crash never leaves a
/// half-written artifact at the target path.
fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

fn write_output(path: &Path, contents: &str) -> Result<(), Failure> {
    write_atomic(path, contents)
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    scenario_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<ZbarMode>,
    /// The scenario with every default resolved, as actually executed.
    scenario: &'a Scenario,
    outputs: Vec<String>,
    duration_seconds: f64,
}

fn pretty_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Failure::input(format!("serialization failed: {e}")))
}

const CSV_COLUMNS: [&str; 9] = [
    "e", "v", "a", "u_bl", "u_ad", "s_prev", "xtilde_pm_norm", "V", "e_v",
];

/// Renders the sampled trajectory with nine significant digits per value.
fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.n_vehicles();
    let mut out = String::with_capacity(traj.samples.len() * (9 * n + 1) * 16 + 256);
    out.push('t');
    for j in 0..n {
        for col in CSV_COLUMNS {
            let _ = write!(out, ",{col}_{j}");
        }
    }
    out.push('\n');
    for (state, derived) in traj.samples.iter().zip(&traj.derived) {
        let _ = write!(out, "{:.8e}", state.t);
        for j in 0..n {
            let ap = &state.ap[j];
            for value in [
                ap.e,
                ap.v,
                ap.a,
                ap.u_bl,
                derived.u_ad[j],
                derived.spacing[j],
                derived.xtilde_norm[j],
                derived.lyapunov[j],
                derived.e_v[j],
            ] {
                let _ = write!(out, ",{value:.8e}");
            }
        }
        out.push('\n');
    }
    out
}

fn cmd_simulate(scenario_path: &Path, out_dir: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let scenario = load_scenario(scenario_path)?;
    for warning in model::scenario_warnings(&scenario) {
        log::warn!("{warning}");
    }
    let sim = Simulator::new(scenario).map_err(engine_failure)?;
    let traj = sim.run().map_err(engine_failure)?;
    let audit = certificates::audit_trajectory(
        &traj,
        &sim.scenario().gains,
        sim.p_m(),
        sim.p_m0(),
        sim.scenario().gains.c,
    );

    fs::create_dir_all(out_dir)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", out_dir.display())))?;
    let csv_path = out_dir.join("trajectory.csv");
    let audit_path = out_dir.join("audit.json");
    let manifest_path = out_dir.join("manifest.json");

    write_output(&csv_path, &trajectory_csv(&traj))?;
    write_output(&audit_path, &pretty_json(&audit)?)?;
    let manifest = RunManifest {
        tool: "platoon",
        version: env!("CARGO_PKG_VERSION"),
        command: "simulate",
        scenario_path: scenario_path.display().to_string(),
        mode: None,
        scenario: sim.scenario(),
        outputs: vec![
            csv_path.display().to_string(),
            audit_path.display().to_string(),
        ],
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    write_output(&manifest_path, &pretty_json(&manifest)?)?;

    let max_ratio = audit
        .max_xtilde_ratio
        .iter()
        .copied()
        .fold(0.0_f64, f64::max);
    println!(
        "simulated {} samples to t = {:.3}; max containment ratio {:.6}; min spacing {:.6}",
        traj.samples.len(),
        traj.final_state().t,
        max_ratio,
        audit.overall_min_spacing,
    );
    println!("wrote {}", csv_path.display());
    println!("wrote {}", audit_path.display());
    println!("wrote {}", manifest_path.display());

    if !audit.collision_free {
        return Err(Failure::monitor(format!(
            "collision monitor: spacing reached {:.6} m (must stay positive)",
            audit.overall_min_spacing
        )));
    }
    if !audit.contained {
        return Err(Failure::monitor(
            "containment monitor: a weighted tracking error reached the barrier radius"
                .to_string(),
        ));
    }
    Ok(())
}

fn certificate_failure_message(report: &CertificateReport) -> String {
    if !report.routh_hurwitz.pass {
        let failed: Vec<&str> = report
            .routh_hurwitz
            .inequalities
            .iter()
            .filter(|i| !i.pass)
            .map(|i| i.name.as_str())
            .collect();
        return format!("stability conditions failed: {}", failed.join(", "));
    }
    if let Some(ly) = &report.lyapunov {
        if !ly.pass {
            return "tracking-metric solve exceeded its residual tolerance".to_string();
        }
    }
    if !report.positivity.pass {
        return "external positivity check failed".to_string();
    }
    if !report.string_stability.pass {
        return "string stability check failed".to_string();
    }
    match &report.standstill {
        Some(ss) if !ss.pass => format!(
            "standstill distance below the certified minimum r_min = {:.6} ({} mode)",
            ss.r_min, ss.mode
        ),
        None => "standstill bound not computable".to_string(),
        _ => "trajectory audit failed".to_string(),
    }
}

fn cmd_certify(scenario_path: &Path, out_path: &Path, mode: ZbarMode) -> Result<(), Failure> {
    let scenario = load_scenario(scenario_path)?;
    let report = certificates::certify_scenario(&scenario, mode, None)
        .map_err(|e| Failure::input(e.to_string()))?;

    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Failure::input(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    write_output(out_path, &pretty_json(&report)?)?;
    print!("{}", report.render_text());
    println!("wrote {}", out_path.display());

    if report.pass {
        Ok(())
    } else {
        Err(Failure::certificate(certificate_failure_message(&report)))
    }
}

fn apply_sweep_param(
    mut scenario: Scenario,
    param: SweepParam,
    value: f64,
) -> Result<Scenario, Failure> {
    if !value.is_finite() {
        return Err(Failure::input(format!(
            "sweep value for {} must be finite, got {value}",
            param.name()
        )));
    }
    match param {
        SweepParam::Gamma => {
            if value <= 0.0 {
                return Err(Failure::input(format!(
                    "adaptation-rate scale must be positive, got {value}"
                )));
            }
            scenario.gains.gamma_follower = model::scaled_identity(value);
            scenario.gains.gamma_leader_x = model::scaled_identity(value);
            scenario.gains.gamma_leader_xt = model::scaled_identity(value);
        }
        SweepParam::C => scenario.gains.c = value,
        SweepParam::Dt => scenario.dt = value,
        SweepParam::HeterogeneityScale => {
            let tau_bar = scenario.gains.tau_bar;
            for v in &mut scenario.vehicles {
                v.tau = tau_bar + value * (v.tau - tau_bar);
                v.lambda = 1.0 + value * (v.lambda - 1.0);
            }
        }
    }
    Ok(scenario)
}

struct SweepRow {
    value: f64,
    max_ratio: f64,
    min_spacing: f64,
    final_max_abs_e: f64,
}

fn sweep_run(sim: &Simulator) -> Result<(Trajectory, TrajectoryAudit), EngineError> {
    let traj = sim.run()?;
    let audit = certificates::audit_trajectory(
        &traj,
        &sim.scenario().gains,
        sim.p_m(),
        sim.p_m0(),
        sim.scenario().gains.c,
    );
    Ok((traj, audit))
}

fn cmd_sweep(
    scenario_path: &Path,
    param: SweepParam,
    values: &[f64],
    out_dir: &Path,
) -> Result<(), Failure> {
    let started = Instant::now();
    if values.is_empty() {
        return Err(Failure::input("sweep needs at least one value".to_string()));
    }
    let base = load_scenario(scenario_path)?;

    // Validate every point before running any, so input errors cannot waste
    // a partial sweep.
    let mut simulators = Vec::with_capacity(values.len());
    for &value in values {
        let scenario = apply_sweep_param(base.clone(), param, value)?;
        let sim = Simulator::new(scenario).map_err(|e| {
            Failure::input(format!("{} = {value}: {e}", param.name()))
        })?;
        simulators.push((value, sim));
    }

    // One worker per value; results keep the input order.
    let results: Vec<(f64, Result<(Trajectory, TrajectoryAudit), EngineError>)> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = simulators
                .iter()
                .map(|(value, sim)| {
                    let v = *value;
                    (v, scope.spawn(move || sweep_run(sim)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(v, h)| (v, h.join().expect("sweep worker panicked")))
                .collect()
        });

    let mut rows = Vec::with_capacity(results.len());
    let mut first_monitor_failure: Option<String> = None;
    for (value, outcome) in results {
        match outcome {
            Ok((_, audit)) => {
                rows.push(SweepRow {
                    value,
                    max_ratio: audit
                        .max_xtilde_ratio
                        .iter()
                        .copied()
                        .fold(0.0_f64, f64::max),
                    min_spacing: audit.overall_min_spacing,
                    final_max_abs_e: audit.final_abs_e.iter().copied().fold(0.0_f64, f64::max),
                });
            }
            Err(e) => {
                log::warn!("{} = {value}: {e}", param.name());
                if first_monitor_failure.is_none() {
                    first_monitor_failure = Some(format!("{} = {value}: {e}", param.name()));
                }
            }
        }
    }

    fs::create_dir_all(out_dir)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", out_dir.display())))?;
    let summary_path = out_dir.join("summary.csv");
    let mut csv = String::from("value,max_xtilde_ratio,min_spacing,final_max_abs_e\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{:.8e},{:.8e},{:.8e},{:.8e}",
            row.value, row.max_ratio, row.min_spacing, row.final_max_abs_e
        );
    }
    write_output(&summary_path, &csv)?;

    let manifest = RunManifest {
        tool: "platoon",
        version: env!("CARGO_PKG_VERSION"),
        command: "sweep",
        scenario_path: scenario_path.display().to_string(),
        mode: None,
        scenario: &base,
        outputs: vec![summary_path.display().to_string()],
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    write_output(&out_dir.join("manifest.json"), &pretty_json(&manifest)?)?;

    println!(
        "swept {} over {} values; wrote {}",
        param.name(),
        values.len(),
        summary_path.display()
    );

    if let Some(msg) = first_monitor_failure {
        return Err(Failure::monitor(msg));
    }
    Ok(())
}
