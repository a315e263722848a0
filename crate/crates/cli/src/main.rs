//! `dcgrid` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dcgrid::analysis::{check_condition, scenario_equilibrium};
use dcgrid::controllers::ControllerKind;
use dcgrid::lyapunov::{annotate, audit_scenario, LyapunovContext};
use dcgrid::netmodel::build_laplacian;
use dcgrid::scenario::{load_scenario, LoadedScenario};
use dcgrid::simulator::{simulate, steady_state_check, Scenario, Trajectory};
use dcgrid::GridError;

#[derive(Parser)]
#[command(name = "dcgrid", version, about = "Power-sharing DC microgrid simulator")]
struct Cli {
    /// Directory for CSV and JSON artifacts (created if missing).
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,

    /// Run with a different source controller than the scenario declares.
    #[arg(long, global = true, value_enum)]
    controller_override: Option<Controller>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a scenario; writes the trajectory CSV and a steady-state summary.
    Simulate { scenario: PathBuf },
    /// Solve for the equilibrium on a geometric-mean level set.
    Equilibrium {
        scenario: PathBuf,
        /// Target value of `Σ C_i ln V_i`; defaults to the initial condition's.
        #[arg(long, allow_negative_numbers = true)]
        geomean: Option<f64>,
    },
    /// Evaluate the stability certificate at the scenario's equilibrium.
    Check { scenario: PathBuf },
    /// Audit a trajectory CSV for monotone decrease of the Lyapunov function.
    Audit { scenario: PathBuf, csv: PathBuf },
    /// Run consensus and integral controllers side by side.
    Compare { scenario: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    Consensus,
    Dapi,
    #[value(name = "constant_voltage", alias = "constant-voltage")]
    ConstantVoltage,
}

impl From<Controller> for ControllerKind {
    fn from(c: Controller) -> Self {
        match c {
            Controller::Consensus => ControllerKind::Consensus,
            Controller::Dapi => ControllerKind::Dapi,
            Controller::ConstantVoltage => ControllerKind::ConstantVoltage,
        }
    }
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl From<GridError> for Failure {
    fn from(e: GridError) -> Self {
        Failure::Numerical(e.to_string())
    }
}

type CmdResult = Result<Value, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scenario } => cmd_simulate(&cli, scenario),
        Command::Equilibrium { scenario, geomean } => cmd_equilibrium(&cli, scenario, *geomean),
        Command::Check { scenario } => cmd_check(&cli, scenario),
        Command::Audit { scenario, csv } => cmd_audit(&cli, scenario, csv),
        Command::Compare { scenario } => cmd_compare(&cli, scenario),
    };
    match result {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load(cli: &Cli, path: &Path) -> Result<(LoadedScenario, Scenario), Failure> {
    let loaded = load_scenario(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut scenario = loaded.scenario.clone();
    if let Some(c) = cli.controller_override {
        scenario = scenario.with_controller(c.into());
        scenario
            .validate()
            .map_err(|e| Failure::Config(format!("--controller-override: {e}")))?;
    }
    Ok((loaded, scenario))
}

fn stem(loaded: &LoadedScenario, path: &Path) -> String {
    loaded.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map_or_else(|| "scenario".to_string(), |s| s.to_string_lossy().into_owned())
    })
}

fn output_path(cli: &Cli, name: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(&cli.output_dir)
        .map_err(|e| Failure::Numerical(format!("cannot create {}: {e}", cli.output_dir.display())))?;
    Ok(cli.output_dir.join(name))
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Failure::Numerical(format!("cannot write {}: {e}", path.display())))
}

fn write_csv(path: &Path, traj: &Trajectory) -> Result<(), Failure> {
    let file = fs::File::create(path).map_err(|e| Failure::Numerical(format!("cannot write {}: {e}", path.display())))?;
    traj.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

/// Runs a scenario and fills the `M` column when a consensus equilibrium is available.
fn run(scenario: &Scenario) -> Result<Trajectory, GridError> {
    let mut traj = simulate(scenario)?;
    if scenario.controller == ControllerKind::Consensus {
        let m = scenario_equilibrium(scenario, Some(traj.first().geomean_log))
            .and_then(|eq| LyapunovContext::for_scenario(scenario, &eq));
        if let Ok(ctx) = m {
            annotate(&ctx, &mut traj)?;
        }
    }
    Ok(traj)
}

fn summary(scenario: &Scenario, traj: &Trajectory) -> Value {
    let steady = steady_state_check(traj, 0.1 * scenario.t_end, 1e-6);
    let last = traj.last();
    json!({
        "controller": scenario.controller.to_string(),
        "t_end_s": last.t,
        "steady_state": steady,
        "final": {
            "Vs_V": last.vs.as_slice(),
            "Vl_V": last.vl.as_slice(),
            "Ps_W": last.ps.as_slice(),
            "total_source_power_W": last.ps.sum(),
        },
        "stats": traj.stats,
    })
}

fn cmd_simulate(cli: &Cli, path: &Path) -> CmdResult {
    let (loaded, scenario) = load(cli, path)?;
    let name = stem(&loaded, path);
    let traj = run(&scenario)?;
    let csv = match &loaded.csv_path {
        Some(p) if cli.controller_override.is_none() => p.clone(),
        _ => PathBuf::from(format!("{name}.{}.csv", scenario.controller)),
    };
    let csv_path = output_path(cli, &csv.to_string_lossy())?;
    write_csv(&csv_path, &traj)?;
    let mut report = summary(&scenario, &traj);
    report["scenario"] = json!(name);
    report["csv"] = json!(csv_path.display().to_string());
    write_json(&output_path(cli, &format!("{name}.summary.json"))?, &report)?;
    Ok(report)
}

fn cmd_equilibrium(cli: &Cli, path: &Path, geomean: Option<f64>) -> CmdResult {
    let (loaded, scenario) = load(cli, path)?;
    let report = scenario_equilibrium(&scenario, geomean)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    write_json(&output_path(cli, &format!("{}.equilibrium.json", stem(&loaded, path)))?, &value)?;
    Ok(value)
}

fn cmd_check(cli: &Cli, path: &Path) -> CmdResult {
    let (loaded, scenario) = load(cli, path)?;
    let eq = scenario_equilibrium(&scenario, None)?;
    let blocks = build_laplacian(&scenario.network);
    let bank = scenario.schedule()?.final_bank();
    let cond = check_condition(&blocks, &bank, scenario.params.c(), &eq.vs(), &eq.vl())?;
    let mut value = serde_json::to_value(&cond).expect("report serializes");
    value["Vbar_s"] = json!(eq.vbar_s);
    value["Vbar_l"] = json!(eq.vbar_l);
    write_json(&output_path(cli, &format!("{}.check.json", stem(&loaded, path)))?, &value)?;
    Ok(value)
}

fn cmd_audit(cli: &Cli, path: &Path, csv: &Path) -> CmdResult {
    let (_, scenario) = load(cli, path)?;
    let file = fs::File::open(csv).map_err(|e| Failure::Config(format!("cannot open {}: {e}", csv.display())))?;
    let traj = Trajectory::read_csv(std::io::BufReader::new(file), scenario.params.c())
        .map_err(|e| Failure::Config(format!("{}: {e}", csv.display())))?;
    if traj.n_loads() != scenario.network.n_loads() {
        return Err(Failure::Config(format!(
            "{} has {} load columns but the scenario has {} loads",
            csv.display(),
            traj.n_loads(),
            scenario.network.n_loads()
        )));
    }
    let audit = audit_scenario(&scenario, &traj)?;
    Ok(serde_json::to_value(&audit).expect("report serializes"))
}

/// Per-source overshoot of `P_i` above its final value after the last load step,
/// relative to the final value.
fn overshoot(traj: &Trajectory, since: f64) -> Vec<f64> {
    let last = traj.last();
    (0..traj.n_sources())
        .map(|i| {
            let peak = traj
                .samples
                .iter()
                .filter(|s| s.t >= since)
                .map(|s| s.ps[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let fin = last.ps[i];
            if fin.abs() > 0.0 {
                ((peak - fin) / fin.abs()).max(0.0)
            } else {
                0.0
            }
        })
        .collect()
}

fn cmd_compare(cli: &Cli, path: &Path) -> CmdResult {
    let (loaded, scenario) = load(cli, path)?;
    let name = stem(&loaded, path);
    let variants = [
        scenario.with_controller(ControllerKind::Consensus),
        scenario.with_controller(ControllerKind::Dapi),
    ];
    for v in &variants {
        v.validate().map_err(|e| Failure::Config(e.to_string()))?;
    }
    let since = scenario
        .events
        .iter()
        .map(|e| e.t_start)
        .fold(0.0, f64::max);
    let results: Vec<Result<Trajectory, GridError>> = std::thread::scope(|s| {
        let handles: Vec<_> = variants.iter().map(|v| s.spawn(move || run(v))).collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut runs = serde_json::Map::new();
    for (v, res) in variants.iter().zip(results) {
        let traj = res?;
        let kind = v.controller.to_string();
        let csv_path = output_path(cli, &format!("{name}.{kind}.csv"))?;
        write_csv(&csv_path, &traj)?;
        let mut s = summary(v, &traj);
        s["overshoot_relative"] = json!(overshoot(&traj, since));
        s["csv"] = json!(csv_path.display().to_string());
        runs.insert(kind, s);
    }
    let report = json!({ "scenario": name, "runs": runs });
    write_json(&output_path(cli, &format!("{name}.compare.json"))?, &report)?;
    Ok(report)
}
