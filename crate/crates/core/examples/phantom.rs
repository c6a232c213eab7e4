//! Generate a few phantom subjects, print their organ statistics and write
//! them as `.vol3` files.
//!
//! Usage: `cargo run --example phantom -- [out_dir]`

use oneshot3d::io::{save_labels, save_volume};
use oneshot3d::phantom::{generate_phantom, PhantomConfig};
use oneshot3d::volume::normalize_intensity;

fn main() -> oneshot3d::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "phantoms".into());
    let cfg = PhantomConfig::default();
    println!("shape {:?}, spacing {:?} mm", cfg.shape, cfg.spacing);
    for id in 0..3 {
        let (v, labels) = generate_phantom(&cfg, id)?;
        let (lo, hi) = v.min_max();
        let n = labels.labels().len() as f64;
        let fractions: Vec<String> = (1..=cfg.organ_count as u8)
            .map(|c| format!("organ {c}: {:.2}%", 100.0 * labels.count(c) as f64 / n))
            .collect();
        println!("subject {id}: intensity [{lo:.3}, {hi:.3}], {}", fractions.join(", "));
        save_volume(&format!("{out}/subject_{id:03}.vol3").as_ref(), &normalize_intensity(&v))?;
        save_labels(&format!("{out}/subject_{id:03}.labels").as_ref(), &labels)?;
    }
    println!("wrote {out}/");
    Ok(())
}
