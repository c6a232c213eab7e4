//! Propagate a support scribble onto other subjects with a briefly trained
//! localization network, then filter with the dual-level feature check at
//! several thresholds.

use oneshot3d::phantom::{generate_phantom, PhantomConfig};
use oneshot3d::prnet::{train_prnet, PRNetConfig, PrnetTrainConfig};
use oneshot3d::propagate::{precision_report, propagate_scribbles, PropagationConfig};
use oneshot3d::scribble::draw_support_scribble;
use oneshot3d::volume::normalize_intensity;
use oneshot3d::LabelGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> oneshot3d::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let pc = PhantomConfig::default();
    let subjects = (0..4)
        .map(|id| generate_phantom(&pc, id).map(|(v, l)| (normalize_intensity(&v), l)))
        .collect::<oneshot3d::Result<Vec<_>>>()?;
    let vols: Vec<_> = subjects.iter().map(|(v, _)| v.clone()).collect();

    let cfg = PRNetConfig {
        patch_size: [16, 16, 16],
        ..PRNetConfig::default()
    };
    let tc = PrnetTrainConfig {
        epochs: 4,
        ..PrnetTrainConfig::default()
    };
    let (net, _) = train_prnet(&vols, &cfg, &tc)?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt0 = &subjects[0].1;
    let mut scribble = draw_support_scribble(gt0, 1, 10, &mut rng)?;
    scribble.extend(&draw_support_scribble(gt0, 2, 10, &mut rng)?);
    let queries: Vec<_> = vols[1..].iter().collect();
    let gts: Vec<&LabelGrid> = subjects[1..].iter().map(|(_, l)| l).collect();
    let result = propagate_scribbles(&net, (&vols[0], &scribble), &queries, &PropagationConfig::default(), &mut rng)?;

    for tau in [0.0, 0.5, 0.9] {
        let r = result.with_tau(tau);
        let classes = precision_report(&r, &gts)?;
        let row: Vec<String> = classes
            .iter()
            .map(|c| format!("class {}: {} kept, precision {:.2}", c.class, c.kept, c.precision))
            .collect();
        println!("tau {tau}: {}", row.join("; "));
    }
    Ok(())
}
