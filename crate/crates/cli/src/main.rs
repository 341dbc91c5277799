use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowsteer::config::ExperimentConfig;
use flowsteer::experiment::{self, Overrides};
use flowsteer::trainer::EvalRecord;
use flowsteer::Error;

/// Distribution steering with Lipschitz-constrained neural policies.
#[derive(Parser, Debug)]
#[command(name = "flowsteer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train, evaluate and write all artifacts for one config.
    Run(RunArgs),
    /// Affine benchmark and SDPA export (linear-Gaussian configs only).
    Benchmark(RunArgs),
    /// Redraw figures from an existing run directory.
    EmitFigures {
        /// Run directory
        dir: PathBuf,
    },
    /// Parse and assemble a config without training.
    Validate {
        #[arg(long, short)]
        config: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory [default: runs/<name>]
    #[arg(long, short, env = "FLOWSTEER_OUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> flowsteer::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        Overrides {
            steps: self.steps,
            seed: self.seed,
            threads: self.threads,
        }
        .apply(&mut cfg);
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&cfg.name));
        Ok((cfg, out))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) | Error::Singular { .. } | Error::Convergence { .. } => 3,
        _ => 2,
    }
}

fn progress(r: &EvalRecord) {
    let kl = r
        .kl_estimate
        .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "step {:>6}  loss {:>12.4}  effort {:>10.4}  potential {:>9.4}  kl {:>8}  {:>7.1}s",
        r.step, r.loss.total, r.loss.effort, r.loss.potential, kl, r.seconds
    );
}

fn dispatch(cmd: Command) -> flowsteer::Result<()> {
    match cmd {
        Command::Run(args) => {
            let (cfg, out) = args.load()?;
            let mut obs = progress;
            let art = experiment::run(&cfg, &out, Some(&mut obs))?;
            let m = &art.report;
            println!("experiment      {}", m.experiment);
            println!("w2              {:.6}", m.w2);
            println!("min |logdet|    {:.6}", m.min_abs_logdet);
            println!("train minutes   {:.2}", m.train_minutes);
            if let (Some(b), Some(c)) = (&art.benchmark, art.log.last().and_then(|r| r.cost(cfg.lambda))) {
                println!("cost            {c:.6}");
                println!("benchmark cost  {:.6}", b.cost.total);
            }
            println!("artifacts       {}", out.display());
        }
        Command::Benchmark(args) => {
            let (cfg, out) = args.load()?;
            let b = experiment::benchmark(&cfg, &out)?;
            println!("cost     {:.10}", b.benchmark.cost.total);
            println!("effort   {:.10}", b.benchmark.cost.effort);
            println!("kl       {:.10}", b.benchmark.cost.kl);
            println!("spread   {:.3e}", b.benchmark.spread());
            println!("sdp      {} variables, {} blocks", b.sdp.num_vars(), b.sdp.blocks.len());
            println!("written  {}", out.display());
        }
        Command::EmitFigures { dir } => {
            for f in experiment::emit_figures(&dir)? {
                println!("{}", dir.join(f).display());
            }
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let asm = cfg.assemble()?;
            let sys = &asm.problem.system;
            println!(
                "{}: {} (n = {}, m = {}, N = {}), budget ok, {} policies",
                cfg.name,
                sys.name(),
                sys.state_dim(),
                sys.input_dim(),
                sys.horizon(),
                asm.stack.policies().len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
