//! Command-line front end: `run`, `sweep` and `plan`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splitmoco::experiment::{cmd_plan, cmd_run, cmd_sweep, output_root, resolve_arch, ExperimentConfig, RunOutcome};
use splitmoco::Result;

#[derive(Parser)]
#[command(name = "splitmoco", version, about = "Split federated momentum-contrastive learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured cut and scheme once per seed.
    Run(RunArgs),
    /// Train every (cut layer, scheme, seed) combination and write summary.csv.
    Sweep(RunArgs),
    /// Tabulate per-cut communication bytes for both schemes.
    Plan(PlanArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file.
    config: PathBuf,
    /// Override a configuration key, e.g. `--set schedule.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root directory (default: run.output from the configuration).
    #[arg(long, env = "SPLITMOCO_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Built-in architecture name (toy, mobile) or architecture file.
    #[arg(long, default_value = "mobile")]
    arch: String,
    /// Images one client processes per epoch.
    #[arg(long, default_value_t = 250)]
    images: u64,
    /// Synchronizations per epoch.
    #[arg(long, default_value_t = 10)]
    syncs: u64,
    /// Also write the table as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn report(outcomes: &[RunOutcome]) {
    for o in outcomes {
        let s = &o.summary;
        let knn = s.final_knn.map_or("-".into(), |k| format!("{k:.4}"));
        println!(
            "{}  knn={knn}  bytes={}  peak_misalignment={:.3e}",
            o.dir.display(),
            s.total_bytes,
            s.peak_misalignment
        );
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = ExperimentConfig::load(&args.config, &args.overrides)?;
            let root = output_root(&config, args.out, None);
            report(&cmd_run(&config, &root)?);
        }
        Command::Sweep(args) => {
            let config = ExperimentConfig::load(&args.config, &args.overrides)?;
            let root = output_root(&config, args.out, None);
            let outcomes = cmd_sweep(&config, &root)?;
            report(&outcomes);
            println!("{}", root.join(&config.run.name).join("summary.csv").display());
        }
        Command::Plan(args) => {
            let spec = resolve_arch(&args.arch)?;
            let plan = cmd_plan(&spec, args.images, args.syncs)?;
            print!("{}", plan.render_text());
            if let Some(path) = args.csv {
                plan.write_csv(path)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_configuration() { 2 } else { 1 })
        }
    }
}
