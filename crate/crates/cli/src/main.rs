//! `standby-sms`: run continuity scenarios or fuzz campaigns and write the
//! event log as JSON lines.
//!
//! Exit codes: 0 all assertions passed, 1 a scenario or property failed,
//! 2 configuration or usage error.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use standby_core::harness::fuzz::run_campaign;
use standby_core::harness::scenario::run_twice_with;
use standby_core::harness::{HarnessError, Scenario, ScenarioReport, ScenarioScript};
use standby_core::{parse_config, EventLog, World, WorldConfig};

#[derive(Parser)]
#[command(name = "standby-sms", version, about = "Standby SMS continuity channel simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario twice and compare the runs.
    Scenario {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=4))]
        n: u8,
        #[command(flatten)]
        common: Common,
    },
    /// Run all four scenarios, each twice.
    All {
        #[command(flatten)]
        common: Common,
    },
    /// Random TXN batches under random fault models.
    Fuzz {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        iterations: u64,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Event log destination (default: stdout).
    #[arg(long)]
    log: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Property,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig(e) => Failure::Usage(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

/// Log output shared by every world in one invocation.
struct LogTarget {
    file: Option<File>,
}

impl LogTarget {
    fn open(path: Option<&PathBuf>) -> Result<Self, Failure> {
        let file = match path {
            Some(p) => Some(
                File::create(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        Ok(Self { file })
    }

    fn writer(&self) -> Box<dyn Write> {
        match &self.file {
            Some(f) => Box::new(f.try_clone().expect("log file handle clones")),
            None => Box::new(io::stdout()),
        }
    }
}

fn load_config(common: &Common) -> Result<WorldConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            parse_config(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => WorldConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn print_report(run: usize, report: &ScenarioReport) {
    for (i, step) in report.steps.iter().enumerate() {
        eprintln!(
            "scenario {} run {run} step {}: {} {} ({})",
            report.scenario,
            i + 1,
            if step.passed { "PASS" } else { "FAIL" },
            step.label,
            step.detail
        );
    }
}

fn scenario(n: Scenario, config: &WorldConfig, target: &LogTarget) -> Result<bool, Failure> {
    let script = ScenarioScript::for_config(config);
    let (first, second, identical) = run_twice_with(n, config, &script, |w: World| {
        w.with_sink(target.writer())
    })?;
    print_report(1, &first);
    print_report(2, &second);
    let ok = first.passed && second.passed && identical;
    eprintln!(
        "scenario {}: {}{}",
        n.number(),
        if ok { "PASS" } else { "FAIL" },
        if identical { " (runs identical)" } else { " (runs differ)" }
    );
    Ok(ok)
}

fn fuzz(iterations: u64, config: &WorldConfig, target: &LogTarget) -> Result<bool, Failure> {
    let summary = run_campaign(config, iterations);
    let mut log = EventLog::new();
    for it in &summary.iterations {
        log.push(
            0,
            "fuzz",
            "iteration",
            json!({
                "iteration": it.iteration,
                "seed": it.seed,
                "loss_prob": it.loss_prob,
                "dup_prob": it.dup_prob,
                "delay_max": it.delay_max,
                "txns": it.txns,
                "queued": it.queued,
                "ticks": it.ticks,
                "passed": it.failures.is_empty(),
                "failures": it.failures.join("; "),
            }),
        );
    }
    log.flush_to(target.writer().as_mut())
        .map_err(|e| Failure::Usage(format!("writing log: {e}")))?;
    for f in summary.failures() {
        eprintln!("fuzz failure: {f}");
    }
    let txns: usize = summary.iterations.iter().map(|i| i.txns).sum();
    eprintln!(
        "fuzz: {} iterations, {txns} transactions: {}",
        summary.iterations.len(),
        if summary.passed() { "PASS" } else { "FAIL" }
    );
    Ok(summary.passed())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (common, action) = match &cli.command {
        Command::Scenario { common, .. } | Command::All { common } | Command::Fuzz { common, .. } => {
            (common, &cli.command)
        }
    };
    let config = load_config(common)?;
    let target = LogTarget::open(common.log.as_ref())?;
    let ok = match action {
        Command::Scenario { n, .. } => {
            let n = Scenario::try_from(*n).map_err(|n| Failure::Usage(format!("no scenario {n}")))?;
            scenario(n, &config, &target)?
        }
        Command::All { .. } => {
            let mut all = true;
            for n in Scenario::ALL {
                all &= scenario(n, &config, &target)?;
            }
            all
        }
        Command::Fuzz { iterations, .. } => fuzz(*iterations, &config, &target)?,
    };
    if ok {
        Ok(())
    } else {
        Err(Failure::Property)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Property) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
