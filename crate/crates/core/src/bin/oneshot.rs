use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use oneshot3d::pipeline::{
    run_pipeline_in, stage_evaluate, stage_geos, stage_phantom_gen, stage_propagate, stage_sweep_tau,
    stage_train_prnet, stage_train_seg, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "oneshot", version, about = "One-shot scribble-supervised 3D segmentation on phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom subjects and the support scribble.
    PhantomGen(Common),
    /// Self-supervised training of the localization network.
    TrainPrnet(Common),
    /// Relocate the support scribble onto every other subject.
    Propagate(Common),
    /// Geodesic pseudo masks from the kept points.
    Geos(Common),
    /// Train the segmenters on pseudo masks.
    TrainSeg(Common),
    /// Score every stage on the test subjects; writes report.json/csv.
    Evaluate(Common),
    /// Run every stage in order.
    Pipeline(Common),
    /// Compare feature-check thresholds; writes sweep_tau.json/csv.
    SweepTau(Common),
}

fn load(c: &Common) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("[config] reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate().context("[config] invalid experiment config")?;
    let out = cfg.output_dir.clone();
    Ok((cfg, out))
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::PhantomGen(c) => {
            let (cfg, out) = load(&c)?;
            stage_phantom_gen(&cfg, &out)?;
        }
        Command::TrainPrnet(c) => {
            let (cfg, out) = load(&c)?;
            let logs = stage_train_prnet(&cfg, &out)?;
            if let (Some(a), Some(b)) = (logs.first(), logs.last()) {
                println!("L_ssl {:.4} -> {:.4} over {} epochs", a.ssl, b.ssl, logs.len());
            }
        }
        Command::Propagate(c) => {
            let (cfg, out) = load(&c)?;
            let r = stage_propagate(&cfg, &out)?;
            let kept: usize = r.queries.iter().map(|q| q.points.iter().filter(|p| p.kept).count()).sum();
            let total: usize = r.queries.iter().map(|q| q.points.len()).sum();
            println!("kept {kept}/{total} relocated points at tau {}", r.tau);
        }
        Command::Geos(c) => {
            let (cfg, out) = load(&c)?;
            for w in stage_geos(&cfg, &out)? {
                eprintln!("[geos] warning: {w}");
            }
        }
        Command::TrainSeg(c) => {
            let (cfg, out) = load(&c)?;
            stage_train_seg(&cfg, &out)?;
        }
        Command::Evaluate(c) => {
            let (cfg, out) = load(&c)?;
            stage_evaluate(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("report.csv"))?);
        }
        Command::Pipeline(c) => {
            let (cfg, out) = load(&c)?;
            run_pipeline_in(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("report.csv"))?);
        }
        Command::SweepTau(c) => {
            let (cfg, out) = load(&c)?;
            stage_sweep_tau(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("sweep_tau.csv"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // stage errors already name their stage
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
