use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use unimul_bench::config::{Execution, Lowerer};
use unimul_bench::harness::{choose_stationarity, run_one, run_sweep, Problem};
use unimul_bench::{parse_config, parse_sweep, RunConfig};

/// Universal one-sided distributed matrix multiply simulator.
///
/// Log verbosity follows the UNIMUL_LOG variable (error, warn, info, debug,
/// trace).
#[derive(Parser)]
#[command(name = "unimul", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and verify it.
    Run {
        config: PathBuf,
        /// Write links.csv and flops.csv counter dumps into this directory.
        #[arg(long)]
        counters: Option<PathBuf>,
    },
    /// Run the cross product described by a sweep file.
    Sweep {
        file: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print every rank's op list in execution order.
    DumpOps { config: PathBuf },
    /// Print every rank's lowered IR program.
    DumpIr { config: PathBuf },
}

fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = parse_config(&text).with_context(|| path.display().to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(config: &Path, counters: Option<&Path>) -> Result<bool> {
    let cfg = load(config)?;
    let r = run_one(&cfg)?;
    println!("config        {}", r.config);
    println!("stationarity  {}", r.stationarity);
    println!("pass          {}", r.pass);
    println!("max_rel_err   {:e}", r.max_rel_err);
    println!("comm_bytes    {}", r.comm_bytes);
    println!("flops         {:?}", r.flops);
    println!("model_cost    {}", r.model_cost);
    println!("ops           {}", r.ops);
    if let Some(dir) = counters {
        fs::create_dir_all(dir)?;
        r.counters.write_links_csv(BufWriter::new(File::create(dir.join("links.csv"))?))?;
        r.counters.write_flops_csv(BufWriter::new(File::create(dir.join("flops.csv"))?))?;
    }
    Ok(r.pass)
}

fn sweep(file: &Path, output: &Path) -> Result<bool> {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let configs = parse_sweep(&text).with_context(|| file.display().to_string())?;
    let out = BufWriter::new(File::create(output).with_context(|| format!("creating {}", output.display()))?);
    let ok = run_sweep(&configs, out)?;
    eprintln!("{} configurations, {}", configs.len(), if ok { "all passed" } else { "some failed" });
    Ok(ok)
}

fn dump(config: &Path, ir: bool) -> Result<()> {
    let cfg = load(config)?;
    let problem = Problem::build(&cfg)?;
    let machine = cfg.machine()?;
    let st = choose_stationarity(&problem, &cfg, &machine)?;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    use std::io::Write;
    if ir {
        let lowerer = match cfg.execution {
            Execution::Ir(l) => l,
            Execution::Direct => Lowerer::Greedy,
        };
        for (_, prog) in problem.lower(st, lowerer, cfg.limits, &machine, cfg.exhaustive_bound)? {
            writeln!(w, "rank {} ({st}, {} steps)", prog.caller, prog.steps.len())?;
            write!(w, "{prog}")?;
        }
    } else {
        for (r, list) in problem.op_lists(st)?.iter().enumerate() {
            writeln!(w, "rank {r} ({st}, {} ops)", list.len())?;
            for (i, op) in list.iter().enumerate() {
                writeln!(w, "  op#{i} {op}")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNIMUL_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, counters } => run(config, counters.as_deref()),
        Command::Sweep { file, output } => sweep(file, output),
        Command::DumpOps { config } => dump(config, false).map(|_| true),
        Command::DumpIr { config } => dump(config, true).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
