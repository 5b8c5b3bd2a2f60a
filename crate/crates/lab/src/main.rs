use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lfo_lab::config::{ControllerKind, ExperimentConfig, PAPER_SCALE_EPISODES};
use lfo_lab::{eval, plot, powerflow, sweep, train, LabError};

#[derive(Parser)]
#[command(name = "lfo", version, about = "Wide-area damping-control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Channel preset, `zero`, `constant:<s>` or `constant:<preset>`.
    #[arg(long, global = true)]
    channel: Option<String>,
    #[arg(long, global = true)]
    controller: Option<String>,
    /// Full 5000-episode training budget.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Dotted override such as `scenario.pv.share=0.5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the case power flow and report the tie-line transfer.
    Powerflow,
    /// Train one agent per seed.
    Train,
    /// Evaluate controllers over the channel and scenario grid.
    Eval {
        /// Policy checkpoint used for every seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Short training runs over a hyperparameter grid.
    Sweep,
    /// Figure data from training logs and evaluation traces.
    Plotdata {
        #[arg(long)]
        svg: bool,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, LabError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &common.overrides)?;
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(ch) = &common.channel {
        cfg.scenario.channel = ch.clone();
        cfg.eval.channels = vec![ch.clone()];
    }
    if let Some(c) = &common.controller {
        let kind: ControllerKind = c.parse()?;
        cfg.controller = kind;
        cfg.eval.controllers = vec![kind];
    }
    if common.paper_scale {
        cfg.episodes = PAPER_SCALE_EPISODES;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("LFO_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("LFO_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads().map_err(|e| LabError::Config(format!("{e:#}")))?;
    let mut cfg = load(&cli.common)?;
    match cli.command {
        Command::Powerflow => {
            print!("{}", powerflow::powerflow(&cfg.case)?);
        }
        Command::Train => {
            for r in train::cmd_train(&cfg)? {
                let (first, last) = train::leading_trailing_means(&r.records, 50);
                let window = cfg.success_window.min(r.records.len());
                let rate =
                    lfo_core::metrics::success_rate(&r.records, window).map_err(LabError::from)?;
                println!(
                    "seed {}: first-50 return {first:.2}, last-50 return {last:.2}, trailing success {rate:.2} -> {}",
                    r.seed,
                    r.dir.display()
                );
            }
        }
        Command::Eval { checkpoint } => {
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            let out = eval::cmd_eval(&cfg)?;
            if let Some(t) = &out.pid {
                println!(
                    "pid gains kp {} ki {} kd {} (score {:.4})",
                    t.best.kp, t.best.ki, t.best.kd, t.best_score
                );
            }
            let lost = out.rows.iter().filter(|r| !r.success).count();
            println!(
                "{} episodes, {lost} lost synchronism -> {}",
                out.rows.len(),
                cfg.out.join(eval::EVAL_REPORT).display()
            );
        }
        Command::Sweep => {
            let out = sweep::cmd_sweep(&cfg)?;
            let b = &out.rows[0];
            println!(
                "best of {} points: #{} success {:.2} return {:.2} -> {}",
                out.rows.len(),
                b.point,
                b.success,
                b.mean_return,
                cfg.out.join(sweep::BEST_CONFIG).display()
            );
        }
        Command::Plotdata { svg } => {
            cfg.plot.svg |= svg;
            for f in plot::cmd_plotdata(&cfg)?.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<LabError>().map_or(1, LabError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
