//! Binary 3D UNet segmenter trained on pseudo masks with cross-entropy plus
//! Dice loss, with optional progressive label correction (PLC): after a
//! warm-up, labels the model contradicts with high confidence are flipped at
//! the end of every epoch.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geos::BoundingBox;
use crate::metrics::dice;
use crate::nn::{
    self, load_params, save_params, AdamConfig, AdamState, Gradients, Layer, ModelParams, NetworkBuilder,
    NetworkSpec,
};
use crate::tensor::Tensor;
use crate::volume::{crop_label_window, crop_window, linear_index, LabelGrid, Offset, Volume3};

/// Smoothing of the Dice term.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clipped to `[P_CLIP, 1 − P_CLIP]` inside the log.
const P_CLIP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlcConfig {
    pub enabled: bool,
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
    /// Use `max(p, 1 − p)` as confidence so background flips count too;
    /// otherwise only confident foreground predictions flip labels.
    pub symmetric: bool,
    /// Epochs trained on the raw masks before the first correction. An
    /// untrained net is confidently wrong (mostly "background"), and
    /// correcting against it erases the foreground.
    pub warmup_epochs: usize,
    /// End-of-epoch predictions that must agree (same class, each above δ)
    /// before a label flips. 1 corrects from the latest snapshot alone.
    pub agreement: usize,
}

impl Default for PlcConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            initial: 0.95,
            decay: 0.99,
            floor: 0.85,
            symmetric: true,
            warmup_epochs: 20,
            agreement: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    /// Number of downsampling levels.
    pub depth: usize,
    pub base_channels: usize,
    /// Training crop `(d, h, w)`; each axis divisible by `2^depth`.
    pub crop: [usize; 3],
    pub crops_per_epoch: usize,
    pub batch: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Voxels added around the pseudo mask's bounding box.
    pub roi_margin: usize,
    pub leaky_slope: f64,
    pub plc: PlcConfig,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            crop: [16, 32, 32],
            crops_per_epoch: 48,
            batch: 8,
            epochs: 40,
            // the 0.9-per-10-epochs decay of a 150-epoch run, compressed
            // onto 40 epochs (≈ 0.25× by the end)
            adam: AdamConfig {
                decay_every: 3,
                ..AdamConfig::default()
            },
            roi_margin: 4,
            leaky_slope: 0.1,
            plc: PlcConfig::default(),
            seed: 31,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.epochs == 0 || self.base_channels == 0 {
            return Err(Error::Config("depth, epochs and base_channels must be positive".into()));
        }
        if self.batch == 0 || self.crops_per_epoch < self.batch {
            return Err(Error::Config("need batch >= 1 and crops_per_epoch >= batch".into()));
        }
        let m = 1 << self.depth;
        if self.crop.iter().any(|&c| c == 0 || c % m != 0) {
            return Err(Error::Config(format!(
                "crop {:?} must be divisible by {m} on every axis",
                self.crop
            )));
        }
        let p = &self.plc;
        if !(0.5 < p.floor && p.floor <= p.initial && p.initial <= 1.0 && p.decay > 0.0 && p.decay <= 1.0) {
            return Err(Error::Config("PLC needs 0.5 < floor <= initial <= 1 and 0 < decay <= 1".into()));
        }
        if p.agreement == 0 {
            return Err(Error::Config("PLC agreement must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build_spec(&self) -> Result<NetworkSpec> {
        self.validate()?;
        let act = Layer::LeakyRelu { slope: self.leaky_slope };
        let mut b = NetworkBuilder::new(vec![1, 0, 0, 0]);
        let mut x = NetworkBuilder::INPUT;
        let mut ch = 1;
        let mut skips = Vec::new();
        for l in 0..self.depth {
            let c = self.base_channels << l;
            x = b.conv(format!("enc{l}_conv"), x, ch, c, 3);
            x = b.add(format!("enc{l}_act"), act.clone(), &[x]);
            skips.push((x, c));
            x = b.add(format!("enc{l}_down"), Layer::Downsample2, &[x]);
            ch = c;
        }
        let c = self.base_channels << self.depth;
        x = b.conv("mid_conv", x, ch, c, 3);
        x = b.add("mid_act", act.clone(), &[x]);
        ch = c;
        for l in (0..self.depth).rev() {
            let (skip, sc) = skips[l];
            x = b.add(format!("dec{l}_up"), Layer::Upsample2, &[x]);
            x = b.add(format!("dec{l}_cat"), Layer::Concat, &[x, skip]);
            x = b.conv(format!("dec{l}_conv"), x, ch + sc, sc, 3);
            x = b.add(format!("dec{l}_act"), act.clone(), &[x]);
            ch = sc;
        }
        x = b.conv("logit", x, ch, 1, 1);
        b.add("prob", Layer::Sigmoid, &[x]);
        b.output("prob");
        b.build()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLoss {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
}

/// CE + soft Dice loss and its gradient with respect to the probabilities.
pub fn seg_loss_grad(probs: &[f64], labels: &[f64]) -> Result<(SegLoss, Vec<f64>)> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let n = probs.len() as f64;
    let mut ce = 0.0;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(labels) {
        let pc = p.clamp(P_CLIP, 1.0 - P_CLIP);
        ce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
        inter += p * g;
        sp += p;
        sg += g;
    }
    ce /= n;
    let num = 2.0 * inter + DICE_EPS;
    let den = sp + sg + DICE_EPS;
    let dice_term = 1.0 - num / den;

    let grad = probs
        .iter()
        .zip(labels)
        .map(|(&p, &g)| {
            let dce = if (P_CLIP..=1.0 - P_CLIP).contains(&p) {
                (-g / p + (1.0 - g) / (1.0 - p)) / n
            } else {
                0.0
            };
            let ddice = -(2.0 * g * den - num) / (den * den);
            dce + ddice
        })
        .collect();
    Ok((
        SegLoss {
            total: ce + dice_term,
            ce,
            dice: dice_term,
        },
        grad,
    ))
}

pub fn seg_loss(probs: &[f64], labels: &[f64]) -> Result<SegLoss> {
    Ok(seg_loss_grad(probs, labels)?.0)
}

/// Confidence threshold schedule and per-epoch flip counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlcState {
    pub delta: f64,
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
    pub history: Vec<usize>,
}

impl PlcState {
    pub fn new(cfg: &PlcConfig) -> Self {
        Self {
            delta: cfg.initial,
            initial: cfg.initial,
            decay: cfg.decay,
            floor: cfg.floor,
            history: Vec::new(),
        }
    }

    /// Closed form of the threshold after `k` updates.
    pub fn delta_at(&self, k: usize) -> f64 {
        (self.initial * self.decay.powi(k as i32)).max(self.floor)
    }
}

/// `δ' = max(floor, δ · decay)`.
pub fn plc_update_delta(state: &PlcState) -> PlcState {
    PlcState {
        delta: (state.delta * state.decay).max(state.floor),
        ..state.clone()
    }
}

/// Flips each label to the model's prediction where they disagree and the
/// confidence exceeds `delta`. Returns the corrected labels and the flip count.
pub fn plc_correct(probs: &[f64], labels: &[u8], delta: f64, symmetric: bool) -> Result<(Vec<u8>, usize)> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut flips = 0;
    let out = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let pred = u8::from(p > 0.5);
            let conf = if symmetric { p.max(1.0 - p) } else { p };
            if pred != l && conf > delta && (symmetric || pred == 1) {
                flips += 1;
                pred
            } else {
                l
            }
        })
        .collect();
    Ok((out, flips))
}

/// Folds several probability maps into one: where every snapshot predicts
/// the same class, the least confident of them; elsewhere 0.5, which no
/// threshold above one half can flip.
pub fn agreed_probs(snapshots: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = snapshots.first() else {
        return Err(Error::Shape("no probability snapshots".into()));
    };
    if snapshots.iter().any(|s| s.len() != first.len()) {
        return Err(Error::Shape("probability snapshots differ in length".into()));
    }
    Ok((0..first.len())
        .map(|i| {
            let (lo, hi) = snapshots
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[i]), hi.max(s[i])));
            if lo > 0.5 {
                lo
            } else if hi < 0.5 {
                hi
            } else {
                0.5
            }
        })
        .collect())
}

/// A trained (or initialized) segmenter.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: SegConfig,
    pub spec: NetworkSpec,
    pub params: ModelParams,
}

impl SegModel {
    pub fn new(config: SegConfig) -> Result<Self> {
        let spec = config.build_spec()?;
        let params = ModelParams::init(&spec, config.seed);
        Ok(Self { config, spec, params })
    }

    fn input(&self, crop: &Tensor) -> Result<Tensor> {
        let m = 1 << self.config.depth;
        let s = crop.shape();
        if s.len() != 3 || s.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::Shape(format!(
                "segmenter input {s:?} must be 3D with every axis divisible by {m}"
            )));
        }
        crop.clone().reshape(vec![1, s[0], s[1], s[2]])
    }

    /// Foreground probability per voxel of a `(d, h, w)` crop.
    pub fn forward(&self, crop: &Tensor) -> Result<Tensor> {
        seg_forward(&self.spec, &self.params, crop, self.config.depth)
    }

    /// Loss and gradients on one crop under `params`.
    pub fn crop_loss(&self, params: &ModelParams, crop: &Tensor, labels: &[u8]) -> Result<(SegLoss, Gradients)> {
        let pass = nn::forward(&self.spec, params, &self.input(crop)?)?;
        let probs = pass.output(&self.spec, "prob")?;
        let g: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let (loss, dp) = seg_loss_grad(probs.data(), &g)?;
        let dp = Tensor::new(probs.shape().to_vec(), dp)?;
        let grads = nn::backward(&self.spec, params, &pass, &[("prob", &dp)])?;
        Ok((loss, grads))
    }

    /// Foreground probabilities over `roi` (row-major over the box), from
    /// crop-sized tiles covering it; overlapping tiles are averaged.
    pub fn predict_roi(&self, volume: &Volume3, roi: &BoundingBox) -> Result<Vec<f64>> {
        let size = roi.size();
        let crop = self.config.crop;
        let starts: Vec<Vec<i64>> = (0..3)
            .map(|a| {
                let (lo, s, c) = (roi.lo[a] as i64, size[a] as i64, crop[a] as i64);
                if s <= c {
                    vec![lo - (c - s) / 2]
                } else {
                    let mut v: Vec<i64> = (0..).map(|j| lo + j * c).take_while(|&o| o + c <= lo + s).collect();
                    if v.last() != Some(&(lo + s - c)) {
                        v.push(lo + s - c);
                    }
                    v
                }
            })
            .collect();
        let pad = volume.min_max().0 as f64;
        let mut sum = vec![0.0; size.iter().product()];
        let mut count = vec![0u32; sum.len()];
        for &oz in &starts[0] {
            for &ox in &starts[1] {
                for &oy in &starts[2] {
                    let origin: Offset = [oz, ox, oy];
                    let probs = self.forward(&crop_window(volume, origin, crop, pad))?;
                    for (i, &p) in probs.data().iter().enumerate() {
                        let t = crate::volume::voxel_of(crop, i);
                        let v: [i64; 3] = std::array::from_fn(|a| origin[a] + t[a] as i64);
                        if (0..3).all(|a| v[a] >= roi.lo[a] as i64 && v[a] <= roi.hi[a] as i64) {
                            let r = linear_index(size, std::array::from_fn(|a| v[a] as usize - roi.lo[a]));
                            sum[r] += p;
                            count[r] += 1;
                        }
                    }
                }
            }
        }
        Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
    }

    /// Full-volume binary mask: thresholded prediction inside `roi`, 0 elsewhere.
    pub fn segment(&self, volume: &Volume3, roi: &BoundingBox) -> Result<Vec<bool>> {
        let probs = self.predict_roi(volume, roi)?;
        let shape = volume.shape();
        let mut out = vec![false; volume.len()];
        for_each_roi_voxel(roi, |r, v| out[linear_index(shape, v)] = probs[r] > 0.5);
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_params(dir, &self.spec, &self.params)?;
        fs::write(dir.join("seg.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("seg.json");
        let config: SegConfig = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        let (spec, params) = load_params(dir)?;
        if spec != config.build_spec()? {
            return Err(Error::format(&path, "stored network does not match its config"));
        }
        Ok(Self { config, spec, params })
    }
}

pub fn seg_forward(spec: &NetworkSpec, params: &ModelParams, crop: &Tensor, depth: usize) -> Result<Tensor> {
    let m = 1 << depth;
    let s = crop.shape().to_vec();
    if s.len() != 3 || s.iter().any(|&d| d == 0 || d % m != 0) {
        return Err(Error::Shape(format!(
            "segmenter input {s:?} must be 3D with every axis divisible by {m}"
        )));
    }
    let pass = nn::forward(spec, params, &crop.clone().reshape(vec![1, s[0], s[1], s[2]])?)?;
    pass.output(spec, "prob")?.clone().reshape(s)
}

/// Calls `f(box_index, voxel)` for every voxel of `roi` in row-major order.
fn for_each_roi_voxel(roi: &BoundingBox, mut f: impl FnMut(usize, [usize; 3])) {
    let mut r = 0;
    for z in roi.lo[0]..=roi.hi[0] {
        for x in roi.lo[1]..=roi.hi[1] {
            for y in roi.lo[2]..=roi.hi[2] {
                f(r, [z, x, y]);
                r += 1;
            }
        }
    }
}

/// One training volume with its (noisy, binary) mask and crop region.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub volume: Volume3,
    pub mask: LabelGrid,
    pub roi: BoundingBox,
    /// Ground truth for monitoring only; never used for fitting.
    pub gt: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub dice_loss: f64,
    /// Threshold used for this epoch's correction.
    pub delta: Option<f64>,
    pub flips: usize,
    pub gt_dice: Option<f64>,
}

/// Epoch-by-epoch segmenter training. Cloning a trainer forks the run: the
/// plain and PLC variants share every epoch before the first correction.
#[derive(Clone, Debug)]
pub struct SegTrainer {
    pub model: SegModel,
    pub pairs: Vec<TrainPair>,
    pub plc: PlcState,
    pub metrics: Vec<SegEpochMetrics>,
    /// Latest end-of-epoch ROI predictions per pair, oldest first.
    recent: Vec<Vec<Vec<f64>>>,
    adam: AdamState,
    rng: ChaCha8Rng,
    pads: Vec<f64>,
}

impl SegTrainer {
    pub fn new(pairs: Vec<TrainPair>, cfg: &SegConfig) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("segmenter training needs at least one volume".into()));
        }
        for p in &pairs {
            if p.mask.shape() != p.volume.shape() {
                return Err(Error::Shape("mask and volume shapes differ".into()));
            }
        }
        let model = SegModel::new(cfg.clone())?;
        Ok(Self {
            adam: AdamState::new(cfg.adam.clone(), &model.params),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e6_0001),
            plc: PlcState::new(&cfg.plc),
            pads: pairs.iter().map(|p| p.volume.min_max().0 as f64).collect(),
            metrics: Vec::with_capacity(cfg.epochs),
            recent: vec![Vec::new(); pairs.len()],
            model,
            pairs,
        })
    }

    pub fn config(&self) -> &SegConfig {
        &self.model.config
    }

    /// Switches label correction on or off for the remaining epochs.
    pub fn set_plc(&mut self, enabled: bool) {
        self.model.config.plc.enabled = enabled;
    }

    pub fn epochs_done(&self) -> usize {
        self.metrics.len()
    }

    pub fn finished(&self) -> bool {
        self.epochs_done() >= self.config().epochs
    }

    /// One epoch of optimizer steps, then (past warm-up) one correction pass.
    pub fn run_epoch(&mut self) -> Result<&SegEpochMetrics> {
        let cfg = self.model.config.clone();
        let epoch = self.epochs_done();
        let half: [i64; 3] = cfg.crop.map(|c| (c / 2) as i64);
        let iters = cfg.crops_per_epoch / cfg.batch;
        self.adam.set_epoch(epoch);
        let mut sum = SegLoss {
            total: 0.0,
            ce: 0.0,
            dice: 0.0,
        };
        for iter in 0..iters {
            let mut grads = Gradients::zeros_like(&self.model.params);
            for _ in 0..cfg.batch {
                let k = self.rng.gen_range(0..self.pairs.len());
                let p = &self.pairs[k];
                let origin: Offset =
                    std::array::from_fn(|a| self.rng.gen_range(p.roi.lo[a]..=p.roi.hi[a]) as i64 - half[a]);
                let image = crop_window(&p.volume, origin, cfg.crop, self.pads[k]);
                let labels = crop_label_window(&p.mask, origin, cfg.crop);
                let (loss, g) = self.model.crop_loss(&self.model.params, &image, &labels)?;
                if !loss.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "segmentation loss {} at epoch {epoch}, iteration {iter}, volume {k}",
                        loss.total
                    )));
                }
                sum.total += loss.total;
                sum.ce += loss.ce;
                sum.dice += loss.dice;
                grads.accumulate(&g)?;
            }
            grads.scale(1.0 / cfg.batch as f64);
            self.adam.step(&mut self.model.params, &grads)?;
        }

        let want_gt = self.pairs.iter().any(|p| p.gt.is_some());
        let mut flips = 0;
        let mut gt_scores = Vec::new();
        let (warmup, keep) = (cfg.plc.warmup_epochs, cfg.plc.agreement);
        let delta = (cfg.plc.enabled && epoch >= warmup).then_some(self.plc.delta);
        // snapshots for the agreement rule start before the first correction;
        // the pre-fork part is shared by both variants
        let snapshot = keep > 1 && epoch + keep > warmup && (cfg.plc.enabled || epoch < warmup);
        if delta.is_some() || want_gt || snapshot {
            for (p, recent) in self.pairs.iter_mut().zip(&mut self.recent) {
                let probs = self.model.predict_roi(&p.volume, &p.roi)?;
                if snapshot {
                    recent.push(probs.clone());
                    if recent.len() > keep {
                        recent.remove(0);
                    }
                }
                let shape = p.volume.shape();
                if let Some(gt) = &p.gt {
                    let mut pred = vec![false; p.volume.len()];
                    for_each_roi_voxel(&p.roi, |r, v| pred[linear_index(shape, v)] = probs[r] > 0.5);
                    gt_scores.push(dice(&pred, gt)?);
                }
                if let Some(delta) = delta {
                    let mut labels = Vec::with_capacity(probs.len());
                    for_each_roi_voxel(&p.roi, |_, v| labels.push(p.mask.get(v)));
                    let conf = if keep > 1 { agreed_probs(recent)? } else { probs };
                    let (fixed, n) = plc_correct(&conf, &labels, delta, cfg.plc.symmetric)?;
                    for_each_roi_voxel(&p.roi, |r, v| p.mask.set(v, fixed[r]));
                    flips += n;
                }
            }
        }
        if delta.is_some() {
            self.plc.history.push(flips);
            self.plc = plc_update_delta(&self.plc);
        }
        let n = (iters * cfg.batch) as f64;
        let m = SegEpochMetrics {
            epoch: epoch + 1,
            loss: sum.total / n,
            ce: sum.ce / n,
            dice_loss: sum.dice / n,
            delta,
            flips,
            gt_dice: (!gt_scores.is_empty()).then(|| gt_scores.iter().sum::<f64>() / gt_scores.len() as f64),
        };
        info!(
            "seg epoch {}: loss {:.4} flips {} gt dice {:?}",
            m.epoch, m.loss, m.flips, m.gt_dice
        );
        self.metrics.push(m);
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Runs epochs until `epochs_done() == n` (or the configured total).
    pub fn run_until(&mut self, n: usize) -> Result<()> {
        while self.epochs_done() < n.min(self.config().epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }
}

/// Trains a fresh segmenter on `pairs`. With PLC enabled, the masks in
/// `pairs` are corrected in place after every post-warm-up epoch; δ starts
/// decaying with the first correction.
pub fn train_segmenter(pairs: &mut [TrainPair], cfg: &SegConfig) -> Result<(SegModel, Vec<SegEpochMetrics>)> {
    let mut t = SegTrainer::new(pairs.to_vec(), cfg)?;
    t.run_until(cfg.epochs)?;
    pairs.clone_from_slice(&t.pairs);
    Ok((t.model, t.metrics))
}

pub fn seg_metrics_csv(metrics: &[SegEpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from("epoch,loss,ce,dice_loss,delta,flips,gt_dice\n");
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.epoch,
            m.loss,
            m.ce,
            m.dice_loss,
            opt(m.delta),
            m.flips,
            opt(m.gt_dice)
        );
    }
    s
}
