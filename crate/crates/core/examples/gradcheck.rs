//! Finite-difference check of both networks' analytic gradients.

use oneshot3d::nn::{finite_diff_check, finite_diff_check_terms, DEFAULT_STEPS};
use oneshot3d::phantom::{generate_phantom, PhantomConfig};
use oneshot3d::prnet::{gt_offset, PRNet, PRNetConfig};
use oneshot3d::seg::{SegConfig, SegModel};
use oneshot3d::volume::{crop_patch, normalize_intensity};

fn main() -> oneshot3d::Result<()> {
    let (v, gt) = generate_phantom(&PhantomConfig::default(), 0)?;
    let v = normalize_intensity(&v);

    let cfg = PRNetConfig {
        patch_size: [16, 16, 16],
        encoder_channels: [4, 4, 8, 8],
        decoder_channels: [8, 4, 4, 4],
        ..PRNetConfig::default()
    };
    let net = PRNet::new(cfg, 60.0, 1)?;
    let (c0, c1) = ([10, 20, 24], [14, 30, 18]);
    let x0 = crop_patch(&v, c0, [16, 16, 16])?;
    let x1 = crop_patch(&v, c1, [16, 16, 16])?;
    let d10 = gt_offset(c1, c0, v.spacing());
    let r = finite_diff_check_terms(
        &net.params,
        |p| {
            let (l, g) = net.pair_loss(p, &x0, &x1, d10)?;
            Ok((vec![l.dis, l.rec], g))
        },
        32,
        &DEFAULT_STEPS,
        1e-4,
        0,
    )?;
    println!("localization network: {} params checked, max rel err {:.2e}", r.checked, r.max_rel_err);

    let seg = SegModel::new(SegConfig {
        depth: 2,
        base_channels: 4,
        crop: [8, 8, 8],
        ..SegConfig::default()
    })?;
    let crop = crop_patch(&v, [12, 24, 24], [8, 8, 8])?;
    let labels = oneshot3d::volume::crop_label_patch(&gt, [12, 24, 24], [8, 8, 8]);
    let labels: Vec<u8> = labels.iter().map(|&l| u8::from(l == 1)).collect();
    let r = finite_diff_check(
        &seg.params,
        |p| {
            let (l, g) = seg.crop_loss(p, &crop, &labels)?;
            Ok((l.total, g))
        },
        32,
        &DEFAULT_STEPS,
        1e-4,
        0,
    )?;
    println!("segmenter: {} params checked, max rel err {:.2e}", r.checked, r.max_rel_err);
    Ok(())
}
