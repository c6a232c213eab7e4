//! The whole experiment on a small configuration, into a temporary
//! directory: prints the ablation table and the threshold sweep.
//!
//! Usage: `cargo run --release --example pipeline -- [config.json]`

use oneshot3d::phantom::PhantomConfig;
use oneshot3d::pipeline::{run_pipeline_in, tau_csv, report_csv, ExperimentConfig, SubjectCounts};
use oneshot3d::prnet::{PRNetConfig, PrnetTrainConfig};
use oneshot3d::seg::SegConfig;

fn main() -> oneshot3d::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig {
            phantom: PhantomConfig {
                shape: [16, 32, 32],
                ..PhantomConfig::default()
            },
            subjects: SubjectCounts {
                unlabeled: 4,
                validation: 0,
                test: 2,
            },
            prnet: PRNetConfig {
                patch_size: [16, 16, 16],
                ..PRNetConfig::default()
            },
            prnet_train: PrnetTrainConfig {
                epochs: 4,
                ..PrnetTrainConfig::default()
            },
            seg: SegConfig {
                depth: 2,
                base_channels: 4,
                crop: [8, 16, 16],
                epochs: 10,
                ..SegConfig::default()
            },
            ..ExperimentConfig::default()
        },
    };
    let dir = tempfile::tempdir()?;
    let report = run_pipeline_in(&cfg, dir.path())?;
    print!("{}", report_csv(&report));
    print!("{}", tau_csv(&report.tau_sweep));
    Ok(())
}
