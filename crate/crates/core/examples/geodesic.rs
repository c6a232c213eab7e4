//! Geodesic distance from a scribble: the raster-scan transform against the
//! Dijkstra reference, then a two-class pseudo mask and its Dice.

use std::time::Instant;

use oneshot3d::geos::{geodesic_dijkstra, geodesic_raster, pseudo_mask, GeosConfig};
use oneshot3d::metrics::dice;
use oneshot3d::phantom::{generate_phantom, PhantomConfig};
use oneshot3d::scribble::draw_support_scribble;
use oneshot3d::volume::normalize_intensity;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> oneshot3d::Result<()> {
    let (v, gt) = generate_phantom(&PhantomConfig::default(), 0)?;
    let v = normalize_intensity(&v);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scribble = draw_support_scribble(&gt, 1, 12, &mut rng)?;
    let seeds: Vec<_> = scribble.of_class(1).collect();

    for gamma in [0.0, 32.0] {
        let cfg = GeosConfig {
            gamma,
            ..GeosConfig::default()
        };
        let t = Instant::now();
        let fast = geodesic_raster(&v, &seeds, &cfg)?;
        let t_fast = t.elapsed();
        let t = Instant::now();
        let exact = geodesic_dijkstra(&v, &seeds, &cfg)?;
        println!(
            "gamma {gamma:>4}: raster {:.0?}, Dijkstra {:.0?}, max |diff| {:.2e}",
            t_fast,
            t.elapsed(),
            fast.max_abs_diff(&exact)
        );
    }

    let (mask, warnings) = pseudo_mask(&v, &scribble, &GeosConfig::default())?;
    println!(
        "pseudo mask from {} scribble points: Dice {:.3} against ground truth",
        scribble.len(),
        dice(&mask.binary(1), &gt.binary(1))?
    );
    for w in warnings {
        println!("warning: {w}");
    }
    Ok(())
}
