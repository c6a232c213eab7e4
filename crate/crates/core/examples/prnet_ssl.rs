//! Self-supervised training of the localization network on two phantoms,
//! then relocating the support scribble onto its own volume.
//!
//! Knobs (environment): EPOCHS, ITERS, LR, HEAD, PATCH_HW, RESTARTS, REFINE,
//! and CACHE, a directory to reuse a trained network from.

use std::time::Instant;

use oneshot3d::nn::AdamConfig;
use oneshot3d::phantom::{generate_phantom, PhantomConfig};
use oneshot3d::prnet::{train_prnet, PRNet, PRNetConfig, PrnetTrainConfig};
use oneshot3d::propagate::{propagate_scribbles, PropagationConfig};
use oneshot3d::scribble::draw_support_scribble;
use oneshot3d::volume::normalize_intensity;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> oneshot3d::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let pc = PhantomConfig::default();
    let (v0, l0) = generate_phantom(&pc, 0)?;
    let (v1, _) = generate_phantom(&pc, 1)?;
    let vols = [normalize_intensity(&v0), normalize_intensity(&v1)];

    let hw = knob("PATCH_HW", 16);
    let cfg = PRNetConfig {
        patch_size: [16, hw, hw],
        head_width: knob("HEAD", 0),
        ..PRNetConfig::default()
    };
    let tc = PrnetTrainConfig {
        epochs: knob("EPOCHS", 10),
        iters_per_epoch: knob("ITERS", 16),
        adam: AdamConfig {
            lr: knob("LR", 1e-3),
            ..AdamConfig::default()
        },
        ..PrnetTrainConfig::default()
    };
    let cache = std::env::var("CACHE").ok().map(std::path::PathBuf::from);
    let net = match &cache {
        Some(dir) if dir.join("prnet.json").exists() => PRNet::load(dir)?,
        _ => {
            let t = Instant::now();
            let (net, logs) = train_prnet(&vols, &cfg, &tc)?;
            println!("trained in {:.1}s, r = {:.1} mm", t.elapsed().as_secs_f64(), net.r);
            println!(
                "L_ssl first epoch {:.3}, last epoch {:.3}",
                logs[0].ssl,
                logs.last().unwrap().ssl
            );
            if let Some(dir) = &cache {
                std::fs::create_dir_all(dir)?;
                net.save(dir)?;
            }
            net
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut scribble = draw_support_scribble(&l0, 1, 12, &mut rng)?;
    scribble.extend(&draw_support_scribble(&l0, 2, 12, &mut rng)?);
    let prop = PropagationConfig {
        tau: -1.1,
        restarts: knob("RESTARTS", 1),
        refine_steps: knob("REFINE", 2),
        ..PropagationConfig::default()
    };
    let res = propagate_scribbles(&net, (&vols[0], &scribble), &[&vols[0]], &prop, &mut rng)?;
    let mut dists = Vec::new();
    let mut axis_err = [0.0; 3];
    for lp in &res.queries[0].points {
        let diff: Vec<f64> = (0..3).map(|a| lp.located[a] as f64 - lp.source[a] as f64).collect();
        for a in 0..3 {
            axis_err[a] += diff[a].abs() / scribble.len() as f64;
        }
        dists.push(diff.iter().map(|d| d * d).sum::<f64>().sqrt());
    }
    let hits = dists.iter().filter(|&&d| d <= 4.0).count();
    dists.sort_by(f64::total_cmp);
    println!(
        "self-localization ({} restarts, {} refinements): {hits}/{} within 4 voxels, median error {:.2} voxels, mean |error| per axis {:.2?}",
        prop.restarts,
        prop.refine_steps,
        dists.len(),
        dists[dists.len() / 2],
        axis_err
    );
    Ok(())
}
