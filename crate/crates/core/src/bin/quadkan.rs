use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use quadkan::analyze::export_all;
use quadkan::config::{RunConfig, DESK_STEPS, FULL_STEPS};
use quadkan::envsim::TerrainKind;
use quadkan::eval::{compute_cov, evaluate, write_report, Actor, EvalReport, LoadedPolicy};
use quadkan::train::run_training;

#[derive(Parser)]
#[command(name = "quadkan", version, about = "Train, evaluate and inspect spline-based locomotion policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy; resumes when OUT already holds a checkpoint.
    Train {
        /// key = value file; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Train for 10M environment steps instead of the desk-scale default.
        #[arg(long)]
        full_scale: bool,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint with the deterministic mean action.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "thin_obstacle")]
        env: String,
        /// Number of runs (each up to three episodes or a fall).
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also report a uniform-random-action baseline.
        #[arg(long)]
        random_baseline: bool,
        /// Directory for summary and per-episode CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export spline statistics and parameter counts.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coefficient of variation of the returns in one or more metrics CSVs.
    Cov {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn train(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf, full_scale: bool, dry_run: bool) -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.ppo.total_steps = if full_scale { FULL_STEPS } else { DESK_STEPS };
    if let Some(p) = &config {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", p.display()))?;
        if full_scale {
            cfg.ppo.total_steps = FULL_STEPS;
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    print!("# resolved configuration\n{}", cfg.to_text());
    if dry_run {
        return Ok(());
    }
    let total = cfg.ppo.updates();
    let t = run_training(cfg, &out, |row| {
        log::info!(
            "update {}/{} steps {} return {:.2} ± {:.2} distance {:.2} kl {:.4} clip {:.3} epochs {}",
            row.update,
            total,
            row.env_steps,
            row.return_mean,
            row.return_std,
            row.distance_mean,
            row.stats.approx_kl,
            row.stats.clip_fraction,
            row.stats.epochs_run
        );
    })?;
    println!("finished {} updates, {} environment steps; outputs in {}", t.update, t.env_steps, out.display());
    Ok(())
}

fn eval(checkpoint: PathBuf, env: String, runs: usize, seed: u64, random: bool, out: Option<PathBuf>) -> Result<()> {
    let kind: TerrainKind = env.parse()?;
    if runs == 0 {
        bail!("--episodes must be positive");
    }
    let policy = LoadedPolicy::load(&checkpoint)?;
    let mut report = EvalReport::default();
    let (row, eps) = evaluate(&Actor::Deterministic(&policy), &policy.cfg, kind, runs, seed)?;
    report.rows.push(row);
    report.episodes.extend(eps);
    if random {
        let (row, _) = evaluate(&Actor::Random, &policy.cfg, kind, runs, seed)?;
        report.rows.push(row);
    }
    print!("{}", report.table());
    if let Some(dir) = out {
        write_report(&report, &dir)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train { config, seed, out, full_scale, dry_run } => train(config, seed, out, full_scale, dry_run),
        Cmd::Eval { checkpoint, env, episodes, seed, random_baseline, out } => {
            eval(checkpoint, env, episodes, seed, random_baseline, out)
        }
        Cmd::Analyze { checkpoint, out } => LoadedPolicy::load(&checkpoint)
            .map_err(anyhow::Error::from)
            .and_then(|p| {
                let counts = p.net.param_counts(&p.store);
                for (name, n) in &counts.rows {
                    println!("{name:<10} {n}");
                }
                println!("{:<10} {}", "total", counts.total);
                let stats = export_all(&p.net, &p.store, &out)?;
                println!("{} KAN layers exported to {}", stats.len(), out.display());
                Ok(())
            }),
        Cmd::Cov { metrics } => metrics.iter().try_for_each(|m| {
            let c = compute_cov(m)?;
            println!("{}\t{c:.6}", m.display());
            Ok(())
        }),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
