mod launcher;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dflshield_core::fabric::{Backend, PeerAddress};
use dflshield_core::ids::{NodeId, SecuritySetting};
use dflshield_core::scenario::{
    compare_runs, run_scenario, run_tcp_node, write_artifacts, write_comparison, compare_reports, NodeLaunch,
    RunOutput, RunStatus, ScenarioConfig, ScenarioError, ThreadLauncher, REPORT_FILE,
};

use launcher::ProcessLauncher;

const EXIT_ABORTED: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_EMPTY: u8 = 3;

#[derive(Parser)]
#[command(name = "dflshield", version, about = "Secured decentralized federated learning testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the fabric backend.
        #[arg(long)]
        backend: Option<Backend>,
        /// Run Baseline, Encryption and EncryptionMtd and compare them.
        #[arg(long)]
        matrix: bool,
        /// Output directory; `DFLSHIELD_OUT` takes precedence.
        #[arg(long)]
        out: Option<PathBuf>,
        /// TCP only: run nodes as threads instead of processes.
        #[arg(long)]
        in_process: bool,
    },
    /// Compare run reports side by side.
    Compare {
        #[arg(required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a scenario without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// One participant of a TCP run; started by `run`.
    #[command(hide = true)]
    Node {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        id: u32,
        #[arg(long)]
        address: PeerAddress,
        #[arg(long)]
        controller: PeerAddress,
        #[arg(long)]
        linger_ms: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            backend,
            matrix,
            out,
            in_process,
        } => cmd_run(&config, seed, backend, matrix, out, in_process),
        Command::Compare { reports, out } => cmd_compare(&reports, out.as_deref()),
        Command::Validate { config } => cmd_validate(&config),
        Command::Node {
            config,
            base,
            id,
            address,
            controller,
            linger_ms,
        } => cmd_node(&config, base.as_deref(), id, address, controller, linger_ms),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<ScenarioError>() {
                Some(se) if se.is_input_error() => EXIT_INVALID,
                _ => EXIT_ABORTED,
            };
            ExitCode::from(code)
        }
    }
}

fn load(config: &Path) -> anyhow::Result<ScenarioConfig> {
    ScenarioConfig::load(config).map_err(|e| match e {
        ScenarioError::Parse(m) => ScenarioError::Parse(format!("{}: {m}", config.display())),
        other => other,
    })
    .map_err(anyhow::Error::from)
}

fn base_dir(config: &Path) -> Option<PathBuf> {
    config.parent().map(Path::to_path_buf)
}

/// `DFLSHIELD_OUT`, then `--out`, then the config, then `out/<name>`.
fn output_dir(cfg: &ScenarioConfig, flag: Option<PathBuf>) -> PathBuf {
    std::env::var_os("DFLSHIELD_OUT")
        .map(PathBuf::from)
        .or(flag)
        .or_else(|| cfg.scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.scenario.name))
}

fn exit_code(out: &RunOutput) -> u8 {
    match out.status() {
        RunStatus::Completed => 0,
        RunStatus::Empty => EXIT_EMPTY,
        RunStatus::Aborted { .. } => EXIT_ABORTED,
    }
}

fn print_run(out: &RunOutput, dir: &Path) {
    let s = &out.summary;
    let f1 = s
        .final_f1
        .map(|f| format!("{:.4} ± {:.4}", f.mean, f.sd))
        .unwrap_or_else(|| "-".into());
    println!(
        "{:<14} status={:<9} F1={f1} bytes={} ctrl={:.2}% reports={}/{} -> {}",
        out.label(),
        match &s.status {
            RunStatus::Completed => "completed",
            RunStatus::Empty => "empty",
            RunStatus::Aborted { .. } => "aborted",
        },
        s.total_bytes,
        s.ctrl_overhead_pct,
        s.reports,
        s.expected_reports,
        dir.display()
    );
    if let RunStatus::Aborted { reason } = &s.status {
        eprintln!("run aborted: {reason}");
    }
    if let Some(a) = &s.attack {
        println!(
            "  attack={} target={} isolated={}/{} recovered={} success={}",
            a.attack.as_str(),
            a.target,
            a.isolated_rounds,
            a.window_rounds,
            a.plaintext_param_sets_recovered,
            a.success
        );
    }
}

fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    backend: Option<Backend>,
    matrix: bool,
    out: Option<PathBuf>,
    in_process: bool,
) -> anyhow::Result<u8> {
    let mut cfg = load(config)?;
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    if let Some(b) = backend {
        cfg.fabric.backend = b;
    }
    cfg.validate()?;
    let base = base_dir(config);
    let dir = output_dir(&cfg, out);
    let settings: Vec<SecuritySetting> = if matrix {
        SecuritySetting::ALL.to_vec()
    } else {
        vec![cfg.scenario.security]
    };
    let mut code = 0;
    let mut reports = Vec::new();
    for s in settings {
        let run_cfg = cfg.with_security(s);
        let run_dir = if matrix { dir.join(s.as_str()) } else { dir.clone() };
        let out = match run_cfg.fabric.backend {
            Backend::Tcp if !in_process => {
                let launcher = ProcessLauncher::new(&run_dir, base.clone())?;
                run_scenario(&run_cfg, base.as_deref(), Backend::Tcp, &launcher)?
            }
            b => run_scenario(&run_cfg, base.as_deref(), b, &ThreadLauncher)?,
        };
        write_artifacts(&out, &run_dir).with_context(|| format!("writing {}", run_dir.display()))?;
        print_run(&out, &run_dir);
        code = code.max(exit_code(&out));
        reports.push(out.rows);
    }
    if matrix {
        let usable: Vec<_> = reports.into_iter().filter(|r| !r.is_empty()).collect();
        if usable.len() >= 2 {
            let cmp = compare_reports(&usable)?;
            write_comparison(&cmp, &dir)?;
            print!("{}", cmp.to_table());
        }
    }
    Ok(code)
}

fn cmd_compare(reports: &[PathBuf], out: Option<&Path>) -> anyhow::Result<u8> {
    let paths: Vec<PathBuf> = reports
        .iter()
        .map(|p| if p.is_dir() { p.join(REPORT_FILE) } else { p.clone() })
        .collect();
    let cmp = compare_runs(&paths, out)?;
    print!("{}", cmp.to_table());
    Ok(0)
}

fn cmd_validate(config: &Path) -> anyhow::Result<u8> {
    let cfg = load(config)?;
    println!(
        "{}: ok ({} nodes, {} rounds, {})",
        cfg.scenario.name,
        cfg.scenario.nodes,
        cfg.scenario.rounds,
        cfg.scenario.security.as_str()
    );
    Ok(0)
}

fn cmd_node(
    config: &Path,
    base: Option<&Path>,
    id: u32,
    address: PeerAddress,
    controller: PeerAddress,
    linger_ms: u64,
) -> anyhow::Result<u8> {
    let cfg = load(config)?;
    let launch = NodeLaunch {
        id: NodeId(id),
        address,
        controller,
        linger_ms,
    };
    let stop = AtomicBool::new(false);
    let result = run_tcp_node(&cfg, base, &launch, &stop)?;
    serde_json::to_writer(std::io::stdout().lock(), &result)?;
    Ok(0)
}
