use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cpgd_cli::{find, parse_config, run_scenario, SCENARIOS};

#[derive(Parser)]
#[command(name = "cpgd", version, about = "Run CPGD laboratory scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named scenario and write its artifacts.
    Run(RunArgs),
    /// Run the oracle suite; exits nonzero if any check fails.
    Verify {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List available scenarios.
    ListScenarios,
}

#[derive(Args, Default)]
struct RunArgs {
    scenario: String,
    /// TOML config layered over the scenario preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set loss.epsilon=0.3` or `--set learning_rate=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(short, long)]
    verbose: bool,
    /// Print the resolved config with provenance and exit.
    #[arg(long)]
    dry_run: bool,
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let name = args.scenario.as_str();
    let scenario = find(name)?;
    let mut overrides = args.overrides;
    if let Some(seeds) = args.seeds {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("run.seeds=[{}]", list.join(",")));
    }
    if let Some(out) = args.out {
        overrides.push(format!(
            "run.out={}",
            toml::Value::String(out.display().to_string())
        ));
    }
    if args.verbose {
        overrides.push("run.verbose=true".into());
    }
    let cfg = parse_config(&scenario.preset(), args.config.as_deref(), &overrides)
        .with_context(|| format!("resolving config for `{name}`"))?;
    if args.dry_run {
        print!("{}", cfg.to_toml());
        for (key, source) in &cfg.provenance {
            println!(
                "# {key}: {}",
                serde_json::to_value(source)?.as_str().unwrap_or_default()
            );
        }
        return Ok(ExitCode::SUCCESS);
    }
    let outcome = run_scenario(scenario, &cfg).with_context(|| format!("running `{name}`"))?;
    for path in &outcome.artifacts {
        println!("{}", path.display());
    }
    if scenario.name == "verify" {
        println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    }
    Ok(if outcome.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run(args) => run(args),
        Command::Verify { out } => run(RunArgs {
            scenario: "verify".into(),
            out,
            ..RunArgs::default()
        }),
        Command::ListScenarios => {
            for s in SCENARIOS {
                println!("{:<20} {}", s.name, s.summary);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
