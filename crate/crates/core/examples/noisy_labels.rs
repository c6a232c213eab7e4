//! Train a segmenter on deliberately corrupted masks, with and without
//! progressive label correction, and compare Dice against ground truth.

use oneshot3d::geos::crop_roi;
use oneshot3d::metrics::dice;
use oneshot3d::nn::AdamConfig;
use oneshot3d::phantom::{generate_phantom, PhantomConfig};
use oneshot3d::seg::{train_segmenter, PlcConfig, SegConfig, TrainPair};
use oneshot3d::volume::{normalize_intensity, voxel_of, LabelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> oneshot3d::Result<()> {
    let pc = PhantomConfig {
        shape: [16, 32, 32],
        ..PhantomConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pairs = Vec::new();
    for id in 0..4 {
        let (v, gt) = generate_phantom(&pc, id)?;
        let clean = gt.binary(1);
        let roi = crop_roi(&gt, 1, 4)?;
        // flip 15% of the labels inside the box
        let noisy: Vec<u8> = clean
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let flip = roi.contains(voxel_of(gt.shape(), i)) && rng.gen_bool(0.15);
                u8::from(b != flip)
            })
            .collect();
        let mask = LabelGrid::new(gt.shape(), gt.spacing(), noisy)?;
        println!("subject {id}: noisy mask Dice {:.3}", dice(&mask.binary(1), &clean)?);
        pairs.push(TrainPair {
            volume: normalize_intensity(&v),
            mask,
            roi,
            gt: Some(clean),
        });
    }

    for plc in [false, true] {
        let cfg = SegConfig {
            depth: 2,
            base_channels: 4,
            crop: [8, 16, 16],
            epochs: 12,
            crops_per_epoch: 32,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            plc: PlcConfig {
                enabled: plc,
                warmup_epochs: 4,
                ..PlcConfig::default()
            },
            ..SegConfig::default()
        };
        let mut p = pairs.clone();
        let (_, metrics) = train_segmenter(&mut p, &cfg)?;
        let last = metrics.last().expect("at least one epoch");
        let flips: usize = metrics.iter().map(|m| m.flips).sum();
        let mask_dice: f64 = p
            .iter()
            .map(|x| dice(&x.mask.binary(1), x.gt.as_ref().unwrap()).unwrap())
            .sum::<f64>()
            / p.len() as f64;
        println!(
            "plc {plc:>5}: final loss {:.3}, prediction Dice {:.3}, {flips} flips, training-mask Dice after {:.3}",
            last.loss,
            last.gt_dice.unwrap_or(f64::NAN),
            mask_dice
        );
    }
    Ok(())
}
