use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lilac_expctl::output::threads_from_env;
use lilac_expctl::{cmd_gen, cmd_importance, cmd_run, cmd_sweep, CtlError, Experiment, Options};

#[derive(Parser)]
#[command(name = "lilac", version, about = "Continual vision-language experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON). `sweep` accepts several.
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root, overriding the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs of the same config.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and export the task stream of each seed.
    Gen(Common),
    /// Train every baseline for every seed.
    Run(Common),
    /// Run configs and tabulate mean and standard error over seeds.
    Sweep(Common),
    /// Score modules and measure the gain of specialising each one.
    Importance(Common),
}

fn single(c: &Common) -> Result<Experiment, CtlError> {
    match &c.config[..] {
        [path] => Experiment::load(path, c.seed, c.out.as_deref()),
        _ => Err(CtlError::Config("this command takes exactly one --config".into())),
    }
}

fn execute(cmd: Command) -> Result<(), CtlError> {
    let threads = threads_from_env()?;
    match cmd {
        Command::Gen(c) => {
            let opts = Options { force: c.force, threads };
            for g in cmd_gen(&single(&c)?, opts)? {
                println!("{}", g.dir.display());
            }
        }
        Command::Run(c) => {
            let opts = Options { force: c.force, threads };
            let s = cmd_run(&single(&c)?, opts)?;
            for a in &s.aggregate.baselines {
                println!("{:<24} acc {:.4} ± {:.4}", a.baseline, a.acc.mean, a.acc.stderr);
            }
            println!("{}", s.dir.display());
        }
        Command::Sweep(c) => {
            let opts = Options { force: c.force, threads };
            let exps = c
                .config
                .iter()
                .map(|p| Experiment::load(p, c.seed, c.out.as_deref()))
                .collect::<Result<Vec<_>, _>>()?;
            let s = cmd_sweep(&exps, opts)?;
            print!("{}", s.wide);
            println!("{}", s.dir.display());
        }
        Command::Importance(c) => {
            let opts = Options { force: c.force, threads };
            let s = cmd_importance(&single(&c)?, opts)?;
            let show = |r: Option<f64>| r.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            println!("pearson is_grad {}", show(s.summary.pearson_grad));
            println!("pearson is_act  {}", show(s.summary.pearson_act));
            println!("{}", s.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lilac: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
