use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use derl_cli::config::{self, LoadOptions};
use derl_cli::runner::{self, RunResult};
use derl_cli::{report, CliError};

#[derive(Parser)]
#[command(name = "derl", version, about = "Derivative-learning experiments: data, training, transfer, evaluation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// experiment config (TOML); repeat to run several
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// seed or comma-separated seeds, overriding the config
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// output directory (the parent directory when several runs are requested)
    #[arg(long)]
    out: Option<PathBuf>,
    /// merge the config's `[full]` table (full-scale budgets)
    #[arg(long)]
    full: bool,
    /// worker processes for independent runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Verb {
    /// Sample collocation sets and the test grid
    Generate(RunArgs),
    /// Generate, train and evaluate
    Train(RunArgs),
    /// Run the staged transfer pipeline
    Transfer(RunArgs),
    /// Train or transfer, whichever the config describes
    Run(RunArgs),
    /// Evaluate a saved network on the config's test grid
    Evaluate {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long)]
        net: PathBuf,
    },
    /// Comparison table (CSV) of run directories
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// write the table here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Difference of the error fields of two runs
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::Generate(_) => "generate",
            Verb::Train(_) => "train",
            Verb::Transfer(_) => "transfer",
            Verb::Run(_) => "run",
            Verb::Evaluate { .. } => "evaluate",
            Verb::Report { .. } => "report",
            Verb::Diff { .. } => "diff",
        }
    }
}

struct Task {
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn tasks(args: &RunArgs) -> Vec<Task> {
    let seeds: Vec<Option<u64>> = if args.seed.is_empty() {
        vec![None]
    } else {
        args.seed.iter().copied().map(Some).collect()
    };
    let single = args.configs.len() == 1 && seeds.len() == 1;
    let mut out = Vec::new();
    for c in &args.configs {
        for &s in &seeds {
            let dir = if single {
                args.out.clone()
            } else {
                let mut d = args.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
                if args.configs.len() > 1 {
                    d.push(c.file_stem().unwrap_or_default());
                }
                if let (Some(s), true) = (s, seeds.len() > 1) {
                    d.push(format!("seed{s}"));
                }
                Some(d)
            };
            out.push(Task {
                config: c.clone(),
                seed: s,
                out: dir,
            });
        }
    }
    out
}

fn execute(verb: &Verb, args: &RunArgs, task: &Task, net: Option<&Path>) -> Result<(), CliError> {
    let opts = LoadOptions {
        full: args.full,
        seed: task.seed,
        overrides: Vec::new(),
    }
    .with_env();
    let cfg = config::load(&task.config, &opts)?;
    let out = runner::output_dir(&cfg, &task.config, task.out.as_deref());
    match verb {
        Verb::Generate(_) => {
            let d = runner::generate_run(&cfg, &out)?;
            println!(
                "{}: {} interior, {} boundary points -> {}",
                task.config.display(),
                d.interior.len(),
                d.boundary.len(),
                out.display()
            );
        }
        Verb::Train(_) => print_metrics(&task.config, &out, &runner::train_run(&cfg, &out)?),
        Verb::Transfer(_) => print_transfer(&task.config, &out, &runner::transfer_run(&cfg, &out)?),
        Verb::Run(_) => match runner::run(&cfg, &out)? {
            RunResult::Train(m) => print_metrics(&task.config, &out, &m),
            RunResult::Transfer(o) => print_transfer(&task.config, &out, &o),
        },
        Verb::Evaluate { .. } => {
            let m = runner::evaluate_run(&cfg, net.expect("evaluate has --net"), &out)?;
            print_metrics(&task.config, &out, &m);
        }
        Verb::Report { .. } | Verb::Diff { .. } => unreachable!("not a config verb"),
    }
    Ok(())
}

fn print_metrics(config: &Path, out: &Path, m: &derl::eval::MetricsReport) {
    println!(
        "{}: l2_u {:.4e}, residual {:.4e} ({}) -> {}",
        config.display(),
        m.l2_u,
        m.residual,
        m.units,
        out.display()
    );
}

fn print_transfer(config: &Path, out: &Path, o: &derl::transfer::TransferOutcome) {
    for v in o.variants.iter().chain(o.pinn_full.iter()) {
        if let Some(r) = v.reports.last() {
            println!(
                "{}: {} stage {}: full-domain l2_u {:.4e}",
                config.display(),
                v.name,
                r.stage,
                r.full.l2_u
            );
        }
    }
    println!("-> {}", out.display());
}

/// Runs `tasks` as child processes, at most `jobs` at a time.
fn fan_out(verb: &str, args: &RunArgs, tasks: &[Task], net: Option<&Path>) -> Result<(), CliError> {
    let exe = std::env::current_exe().map_err(|e| CliError::io("current_exe", e))?;
    let mut failed = 0;
    for chunk in tasks.chunks(args.jobs.max(1)) {
        let mut children = Vec::new();
        for t in chunk {
            let mut cmd = Command::new(&exe);
            cmd.arg(verb).arg("--config").arg(&t.config);
            if let Some(s) = t.seed {
                cmd.arg("--seed").arg(s.to_string());
            }
            if let Some(o) = &t.out {
                cmd.arg("--out").arg(o);
            }
            if args.full {
                cmd.arg("--full");
            }
            if let Some(n) = net {
                cmd.arg("--net").arg(n);
            }
            children.push(cmd.spawn().map_err(|e| CliError::io(&exe, e))?);
        }
        for mut c in children {
            let ok = c.wait().map(|s| s.success()).unwrap_or(false);
            if !ok {
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Jobs {
            failed,
            total: tasks.len(),
        });
    }
    Ok(())
}

fn run_verb(verb: &Verb) -> Result<(), CliError> {
    match verb {
        Verb::Report { dirs, out } => {
            let table = report::build(dirs)?;
            let csv = table.to_csv();
            match out {
                Some(p) => std::fs::write(p, &csv).map_err(|e| CliError::io(p, e))?,
                None => print!("{csv}"),
            }
            if table.has_missing() {
                let bad: Vec<String> = table
                    .rows
                    .iter()
                    .filter(|r| r.metrics.is_none())
                    .map(|r| r.run.display().to_string())
                    .collect();
                return Err(CliError::MissingMetrics(bad));
            }
            Ok(())
        }
        Verb::Diff { a, b, out } => {
            let d = runner::diff_runs(a, b, out)?;
            let e = d.component(0);
            let mean = e.iter().sum::<f64>() / e.len() as f64;
            println!("mean squared-error difference {mean:.4e} -> {}", out.display());
            Ok(())
        }
        Verb::Generate(args) | Verb::Train(args) | Verb::Transfer(args) | Verb::Run(args) => {
            dispatch(verb, args, None)
        }
        Verb::Evaluate { args, net } => dispatch(verb, args, Some(net)),
    }
}

fn dispatch(verb: &Verb, args: &RunArgs, net: Option<&Path>) -> Result<(), CliError> {
    let tasks = tasks(args);
    if args.jobs > 1 && tasks.len() > 1 {
        return fan_out(verb.name(), args, &tasks, net);
    }
    let mut worst: Option<CliError> = None;
    let total = tasks.len();
    let mut failed = 0;
    for t in &tasks {
        if let Err(e) = execute(verb, args, t, net) {
            eprintln!("error: {}: {e}", t.config.display());
            failed += 1;
            if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                worst = Some(e);
            }
        }
    }
    match worst {
        None => Ok(()),
        Some(e) if total == 1 => Err(e),
        Some(e) if e.exit_code() == 2 => Err(e),
        Some(_) => Err(CliError::Jobs { failed, total }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_verb(&cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
