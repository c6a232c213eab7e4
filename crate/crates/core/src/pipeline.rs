//! End-to-end experiment: phantoms → support scribble → self-supervised
//! localization network → propagation and feature check → geodesic pseudo
//! masks → segmenters with and without label correction → evaluation.
//!
//! Stages communicate only through files under the output directory, so each
//! can be rerun on its own (see the `oneshot` binary).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geos::{crop_roi, pseudo_mask, BoundingBox, GeosConfig};
use crate::io::{load_labels, load_scribbles, load_volume, save_labels, save_scribbles, save_volume};
use crate::metrics::dice;
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::prnet::{ssl_log_csv, train_prnet, PRNet, PRNetConfig, PrnetTrainConfig, SslEpochLog};
use crate::propagate::{precision_report, propagate_scribbles, ClassPrecision, PropagationConfig, PropagationResult};
use crate::scribble::draw_support_scribble;
use crate::seg::{seg_metrics_csv, SegConfig, SegModel, SegTrainer, TrainPair};
use crate::volume::{normalize_intensity, LabelGrid, ScribbleSet, Volume3};

/// Tie tolerance when comparing stage means.
pub const TREND_TOLERANCE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubjectCounts {
    pub unlabeled: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SubjectCounts {
    fn default() -> Self {
        Self {
            unlabeled: 8,
            validation: 0,
            test: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScribbleConfig {
    pub points_per_class: usize,
    pub seed: u64,
}

impl Default for ScribbleConfig {
    fn default() -> Self {
        Self {
            points_per_class: 12,
            seed: 5,
        }
    }
}

/// The whole experiment as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub subjects: SubjectCounts,
    pub scribble: ScribbleConfig,
    pub prnet: PRNetConfig,
    pub prnet_train: PrnetTrainConfig,
    pub propagation: PropagationConfig,
    pub geos: GeosConfig,
    pub seg: SegConfig,
    /// Train segmenters both without and with label correction; otherwise
    /// only the variant selected by `seg.plc.enabled`.
    pub ablation: bool,
    /// Track Dice against ground truth during segmenter training (costs one
    /// inference pass per epoch).
    pub monitor_gt: bool,
    pub sweep_taus: Vec<f64>,
    pub output_dir: PathBuf,
    /// Mixed into every stage seed.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            subjects: SubjectCounts::default(),
            scribble: ScribbleConfig::default(),
            prnet: PRNetConfig::default(),
            prnet_train: PrnetTrainConfig::default(),
            propagation: PropagationConfig::default(),
            geos: GeosConfig::default(),
            seg: SegConfig::default(),
            ablation: true,
            monitor_gt: false,
            sweep_taus: vec![0.0, 0.5, 0.9],
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.prnet.validate()?;
        self.geos.validate()?;
        self.seg.validate()?;
        if self.phantom.organ_count == 0 {
            return Err(Error::Config("need at least one organ class".into()));
        }
        if self.subjects.unlabeled == 0 || self.subjects.test == 0 {
            return Err(Error::Config("need at least one unlabeled and one test subject".into()));
        }
        if self.scribble.points_per_class == 0 {
            return Err(Error::Config("points_per_class must be positive".into()));
        }
        if self.propagation.restarts == 0 {
            return Err(Error::Config("propagation restarts must be at least 1".into()));
        }
        Ok(())
    }

    /// Copy with every stage seed mixed with the global seed.
    pub fn effective(&self) -> Self {
        let g = splitmix(self.seed);
        let mix = |s: u64| splitmix(g ^ s);
        let mut c = self.clone();
        c.phantom.seed = mix(c.phantom.seed);
        c.scribble.seed = mix(c.scribble.seed);
        c.prnet_train.seed = mix(c.prnet_train.seed);
        c.propagation.seed = mix(c.propagation.seed);
        c.seg.seed = mix(c.seg.seed);
        c
    }

    pub fn split(&self) -> Split {
        let s = &self.subjects;
        let range = |from: usize, n: usize| (from..from + n).collect::<Vec<_>>();
        Split {
            support: 0,
            unlabeled: range(1, s.unlabeled),
            validation: range(1 + s.unlabeled, s.validation),
            test: range(1 + s.unlabeled + s.validation, s.test),
        }
    }

    pub fn class_count(&self) -> u8 {
        self.phantom.organ_count as u8 + 1
    }
}

/// Subject ids per role. The support subject is always 0; every other
/// subject is a propagation query, query `i` being subject `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub support: usize,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn queries(&self) -> Vec<usize> {
        self.unlabeled
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .copied()
            .collect()
    }

    /// Subjects used to compare thresholds: validation if any, else test.
    pub fn tau_subjects(&self) -> &[usize] {
        if self.validation.is_empty() {
            &self.test
        } else {
            &self.validation
        }
    }
}

/// File locations under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn volume(&self, s: usize) -> PathBuf {
        self.root.join(format!("data/subject_{s:03}.vol3"))
    }
    pub fn labels(&self, s: usize) -> PathBuf {
        self.root.join(format!("data/subject_{s:03}.labels"))
    }
    pub fn support_scribble(&self) -> PathBuf {
        self.root.join("data/support.scribble.json")
    }
    pub fn prnet(&self) -> PathBuf {
        self.root.join("prnet")
    }
    pub fn propagation(&self) -> PathBuf {
        self.root.join("propagation")
    }
    pub fn pseudo(&self, s: usize) -> PathBuf {
        self.root.join(format!("pseudo/subject_{s:03}.labels"))
    }
    pub fn seg(&self, class: u8, plc: bool) -> PathBuf {
        self.root
            .join(format!("seg/class_{class}_{}", if plc { "plc" } else { "plain" }))
    }
}

fn staged<T>(stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    })
}

/// Generates every subject, writes normalized volumes, ground-truth labels
/// and the support scribble.
pub fn stage_phantom_gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    staged("phantom-gen", || {
        cfg.validate()?;
        let eff = cfg.effective();
        let lay = Layout::new(out);
        fs::create_dir_all(out)?;
        fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        let split = eff.split();
        fs::create_dir_all(out.join("data"))?;
        fs::write(out.join("data/split.json"), serde_json::to_string_pretty(&split)?)?;
        let n = 1 + split.queries().len();
        let mut support_gt = None;
        for s in 0..n {
            let (v, l) = generate_phantom(&eff.phantom, s as u64)?;
            save_volume(&lay.volume(s), &normalize_intensity(&v))?;
            save_labels(&lay.labels(s), &l)?;
            if s == split.support {
                support_gt = Some(l);
            }
        }
        let gt = support_gt.expect("support subject generated");
        let mut rng = ChaCha8Rng::seed_from_u64(eff.scribble.seed);
        let mut scribble = ScribbleSet::new(eff.class_count());
        for class in 1..eff.class_count() {
            scribble.extend(&draw_support_scribble(&gt, class, eff.scribble.points_per_class, &mut rng)?);
        }
        save_scribbles(&lay.support_scribble(), &scribble)?;
        info!("generated {n} subjects, support scribble of {} points", scribble.len());
        Ok(())
    })
}

fn load_split(out: &Path) -> Result<Split> {
    let path = out.join("data/split.json");
    serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::format(&path, e.to_string()))
}

/// Trains the localization network on the support and unlabeled volumes.
pub fn stage_train_prnet(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SslEpochLog>> {
    staged("train-prnet", || {
        let eff = cfg.effective();
        let lay = Layout::new(out);
        let split = load_split(out)?;
        let vols = std::iter::once(split.support)
            .chain(split.unlabeled.iter().copied())
            .map(|s| load_volume(&lay.volume(s)))
            .collect::<Result<Vec<_>>>()?;
        let (net, logs) = train_prnet(&vols, &eff.prnet, &eff.prnet_train)?;
        net.save(&lay.prnet())?;
        fs::write(lay.prnet().join("ssl_log.csv"), ssl_log_csv(&logs))?;
        Ok(logs)
    })
}

/// Relocates the support scribble onto every other subject.
pub fn stage_propagate(cfg: &ExperimentConfig, out: &Path) -> Result<PropagationResult> {
    staged("propagate", || {
        let eff = cfg.effective();
        let lay = Layout::new(out);
        let split = load_split(out)?;
        let net = PRNet::load(&lay.prnet())?;
        let support = load_volume(&lay.volume(split.support))?;
        let scribble = load_scribbles(&lay.support_scribble(), support.shape())?;
        let queries = split
            .queries()
            .iter()
            .map(|&s| load_volume(&lay.volume(s)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Volume3> = queries.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(eff.propagation.seed);
        let result = propagate_scribbles(&net, (&support, &scribble), &refs, &eff.propagation, &mut rng)?;
        result.save(&lay.propagation())?;
        Ok(result)
    })
}

fn query_of(split: &Split, subject: usize) -> Result<usize> {
    split
        .queries()
        .iter()
        .position(|&s| s == subject)
        .ok_or_else(|| Error::Config(format!("subject {subject} is not a query")))
}

/// Geodesic pseudo masks for `subjects` from the kept points of `prop`.
fn pseudo_masks(
    geos: &crate::geos::GeosConfig,
    lay: &Layout,
    split: &Split,
    prop: &PropagationResult,
    subjects: &[usize],
) -> Result<(Vec<LabelGrid>, Vec<String>)> {
    let mut masks = Vec::with_capacity(subjects.len());
    let mut warnings = Vec::new();
    for &s in subjects {
        let v = load_volume(&lay.volume(s))?;
        let q = &prop.queries[query_of(split, s)?];
        let scribble = q.scribbles(prop.class_count);
        let has_fg = (1..prop.class_count).any(|c| scribble.has_class(c));
        if !scribble.has_class(0) || !has_fg {
            warnings.push(format!("subject {s}: too few kept points; pseudo mask is all background"));
            masks.push(LabelGrid::background(v.shape(), v.spacing()));
            continue;
        }
        let (mask, w) = pseudo_mask(&v, &scribble, geos)?;
        warnings.extend(w.into_iter().map(|w| format!("subject {s}: {w}")));
        masks.push(mask);
    }
    Ok((masks, warnings))
}

/// Writes a pseudo mask for every query subject.
pub fn stage_geos(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    staged("geos", || {
        let eff = cfg.effective();
        let lay = Layout::new(out);
        let split = load_split(out)?;
        let prop = PropagationResult::load(&lay.propagation())?.with_tau(eff.propagation.tau);
        let subjects = split.queries();
        let (masks, warnings) = pseudo_masks(&eff.geos, &lay, &split, &prop, &subjects)?;
        for (&s, m) in subjects.iter().zip(&masks) {
            save_labels(&lay.pseudo(s), m)?;
        }
        for w in &warnings {
            warn!("{w}");
        }
        fs::write(out.join("pseudo/warnings.json"), serde_json::to_string_pretty(&warnings)?)?;
        Ok(warnings)
    })
}

fn binary(grid: &LabelGrid, class: u8) -> Result<LabelGrid> {
    let labels = grid.labels().iter().map(|&l| u8::from(l == class)).collect();
    LabelGrid::new(grid.shape(), grid.spacing(), labels)
}

fn whole(shape: [usize; 3]) -> BoundingBox {
    BoundingBox {
        lo: [0; 3],
        hi: shape.map(|d| d - 1),
    }
}

/// Segmenter variants to train: `false` plain, `true` with label correction.
fn variants(cfg: &ExperimentConfig) -> Vec<bool> {
    if cfg.ablation {
        vec![false, true]
    } else {
        vec![cfg.seg.plc.enabled]
    }
}

/// Trains one binary segmenter per foreground class (and per variant) on
/// the unlabeled subjects' pseudo masks.
pub fn stage_train_seg(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    staged("train-seg", || {
        let eff = cfg.effective();
        let lay = Layout::new(out);
        let split = load_split(out)?;
        let data = split
            .unlabeled
            .iter()
            .map(|&s| Ok((s, load_volume(&lay.volume(s))?, load_labels(&lay.pseudo(s))?, load_labels(&lay.labels(s))?)))
            .collect::<Result<Vec<_>>>()?;
        for class in 1..eff.class_count() {
            let mut pairs = Vec::new();
            for (s, v, pseudo, gt) in &data {
                let mask = binary(pseudo, class)?;
                let Ok(roi) = crop_roi(&mask, 1, eff.seg.roi_margin) else {
                    warn!("class {class}: subject {s} has no pseudo foreground; skipped");
                    continue;
                };
                pairs.push(TrainPair {
                    volume: v.clone(),
                    mask,
                    roi,
                    gt: eff.monitor_gt.then(|| gt.binary(class)),
                });
            }
            if pairs.is_empty() {
                return Err(Error::Config(format!("class {class}: no subject has pseudo foreground")));
            }
            // the variants only differ once correction starts, so the shared
            // warm-up is trained once and forked
            let t = Instant::now();
            let mut shared = SegTrainer::new(pairs, &eff.seg)?;
            shared.run_until(eff.seg.plc.warmup_epochs)?;
            let forked = t.elapsed().as_secs_f64();
            for plc in variants(&eff) {
                let t = Instant::now();
                let mut tr = shared.clone();
                tr.set_plc(plc);
                tr.run_until(eff.seg.epochs)?;
                let dir = lay.seg(class, plc);
                fs::create_dir_all(&dir)?;
                tr.model.save(&dir)?;
                fs::write(dir.join("metrics.csv"), seg_metrics_csv(&tr.metrics))?;
                info!(
                    "class {class} segmenter (plc {plc}) trained in {:.1}s + {forked:.1}s shared",
                    t.elapsed().as_secs_f64()
                );
            }
        }
        Ok(())
    })
}

/// Mean Dice per stage for one class over the evaluation subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDice {
    pub class: u8,
    pub pseudo: f64,
    pub trained: Option<f64>,
    pub trained_plc: Option<f64>,
    pub per_subject: Vec<SubjectDice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectDice {
    pub subject: usize,
    pub pseudo: f64,
    pub trained: Option<f64>,
    pub trained_plc: Option<f64>,
}

/// Class-averaged Dice per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMeans {
    pub pseudo: f64,
    pub trained: Option<f64>,
    pub trained_plc: Option<f64>,
}

/// Propagation quality and pseudo-mask Dice at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    /// Kept-point precision pooled over every class.
    pub precision: f64,
    pub kept: usize,
    pub kept_per_volume: f64,
    pub classes: Vec<ClassPrecision>,
    /// Pseudo-mask Dice per foreground class on the comparison subjects.
    pub pseudo_dice: Vec<f64>,
    pub mean_pseudo_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageVerdicts {
    pub training_helps: Option<bool>,
    pub plc_helps: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub test_subjects: Vec<usize>,
    pub classes: Vec<ClassDice>,
    pub mean: StageMeans,
    pub verdicts: StageVerdicts,
    pub tau_subjects: Vec<usize>,
    pub tau_sweep: Vec<TauRow>,
    pub warnings: Vec<String>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    xs.into_iter().collect::<Option<Vec<f64>>>().map(mean)
}

/// Trend checks between consecutive stages, with [`TREND_TOLERANCE`].
pub fn compare_stages(mean: &StageMeans) -> StageVerdicts {
    StageVerdicts {
        training_helps: mean.trained.map(|t| t >= mean.pseudo - TREND_TOLERANCE),
        plc_helps: mean
            .trained
            .zip(mean.trained_plc)
            .map(|(t, p)| p >= t - TREND_TOLERANCE),
    }
}

/// Precision and pseudo-mask Dice for each threshold in `cfg.sweep_taus`.
pub fn stage_sweep_tau(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TauRow>> {
    staged("sweep-tau", || {
        let eff = cfg.effective();
        let lay = Layout::new(out);
        let split = load_split(out)?;
        let audit = PropagationResult::load(&lay.propagation())?;
        let gts = split
            .queries()
            .iter()
            .map(|&s| load_labels(&lay.labels(s)))
            .collect::<Result<Vec<_>>>()?;
        let gt_refs: Vec<&LabelGrid> = gts.iter().collect();
        let subjects = split.tau_subjects().to_vec();
        let mut rows = Vec::new();
        for &tau in &eff.sweep_taus {
            let prop = audit.with_tau(tau);
            let classes = precision_report(&prop, &gt_refs)?;
            let kept: usize = classes.iter().map(|c| c.kept).sum();
            let correct: f64 = classes.iter().map(|c| c.precision * c.kept as f64).sum();
            let (masks, _) = pseudo_masks(&eff.geos, &lay, &split, &prop, &subjects)?;
            let pseudo_dice = (1..eff.class_count())
                .map(|c| {
                    let per = subjects
                        .iter()
                        .zip(&masks)
                        .map(|(&s, m)| dice(&m.binary(c), &gts[query_of(&split, s)?].binary(c)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(mean(per))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(TauRow {
                tau,
                precision: if kept == 0 { 0.0 } else { correct / kept as f64 },
                kept,
                kept_per_volume: kept as f64 / audit.queries.len().max(1) as f64,
                mean_pseudo_dice: mean(pseudo_dice.iter().copied()),
                classes,
                pseudo_dice,
            });
        }
        fs::write(out.join("sweep_tau.json"), serde_json::to_string_pretty(&rows)?)?;
        fs::write(out.join("sweep_tau.csv"), tau_csv(&rows))?;
        Ok(rows)
    })
}

pub fn tau_csv(rows: &[TauRow]) -> String {
    let mut s = String::from("tau,precision,kept,kept_per_volume,mean_pseudo_dice\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.tau, r.precision, r.kept, r.kept_per_volume, r.mean_pseudo_dice
        );
    }
    s
}

/// Ablation table: one row per stage, one column per class plus the mean.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut s = String::from("stage");
    for c in &report.classes {
        let _ = write!(s, ",class_{}", c.class);
    }
    s.push_str(",mean\n");
    let rows: [(&str, Box<dyn Fn(&ClassDice) -> Option<f64>>, Option<f64>); 3] = [
        ("pseudo_mask", Box::new(|c| Some(c.pseudo)), Some(report.mean.pseudo)),
        ("trained", Box::new(|c| c.trained), report.mean.trained),
        ("trained_plc", Box::new(|c| c.trained_plc), report.mean.trained_plc),
    ];
    for (name, get, m) in rows {
        let Some(m) = m else { continue };
        s.push_str(name);
        for c in &report.classes {
            let _ = write!(s, ",{}", get(c).unwrap_or(f64::NAN));
        }
        let _ = writeln!(s, ",{m}");
    }
    s
}

/// Dice of pseudo masks and trained segmenters on the test subjects, plus
/// the threshold sweep. Writes `report.json` and `report.csv`.
pub fn stage_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    let tau_sweep = stage_sweep_tau(cfg, out)?;
    staged("evaluate", || {
        let eff = cfg.effective();
        let lay = Layout::new(out);
        let split = load_split(out)?;
        let warnings: Vec<String> = match fs::read_to_string(out.join("pseudo/warnings.json")) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => Vec::new(),
        };
        let mut models = Vec::new();
        for class in 1..eff.class_count() {
            let mut m = [None, None];
            for plc in variants(&eff) {
                m[usize::from(plc)] = Some(SegModel::load(&lay.seg(class, plc))?);
            }
            models.push(m);
        }
        let mut classes: Vec<ClassDice> = (1..eff.class_count())
            .map(|class| ClassDice {
                class,
                pseudo: 0.0,
                trained: None,
                trained_plc: None,
                per_subject: Vec::new(),
            })
            .collect();
        for &s in &split.test {
            let v = load_volume(&lay.volume(s))?;
            let gt = load_labels(&lay.labels(s))?;
            let pseudo = load_labels(&lay.pseudo(s))?;
            for (ci, cd) in classes.iter_mut().enumerate() {
                let g = gt.binary(cd.class);
                let pm = pseudo.binary(cd.class);
                let roi = crop_roi(&binary(&pseudo, cd.class)?, 1, eff.seg.roi_margin)
                    .unwrap_or_else(|_| whole(v.shape()));
                let score = |m: &Option<SegModel>| -> Result<Option<f64>> {
                    m.as_ref().map(|m| dice(&m.segment(&v, &roi)?, &g)).transpose()
                };
                cd.per_subject.push(SubjectDice {
                    subject: s,
                    pseudo: dice(&pm, &g)?,
                    trained: score(&models[ci][0])?,
                    trained_plc: score(&models[ci][1])?,
                });
            }
        }
        for cd in &mut classes {
            cd.pseudo = mean(cd.per_subject.iter().map(|d| d.pseudo));
            cd.trained = mean_opt(cd.per_subject.iter().map(|d| d.trained));
            cd.trained_plc = mean_opt(cd.per_subject.iter().map(|d| d.trained_plc));
        }
        let means = StageMeans {
            pseudo: mean(classes.iter().map(|c| c.pseudo)),
            trained: mean_opt(classes.iter().map(|c| c.trained)),
            trained_plc: mean_opt(classes.iter().map(|c| c.trained_plc)),
        };
        let report = MetricsReport {
            test_subjects: split.test.clone(),
            verdicts: compare_stages(&means),
            mean: means,
            classes,
            tau_subjects: split.tau_subjects().to_vec(),
            tau_sweep,
            warnings,
        };
        fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(out.join("report.csv"), report_csv(&report))?;
        Ok(report)
    })
}

/// Wall-clock seconds per stage, kept apart from the report so the report
/// stays reproducible.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
    pub total: f64,
}

/// Runs every stage into `cfg.output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    run_pipeline_in(cfg, &cfg.output_dir)
}

pub fn run_pipeline_in(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    staged("config", || cfg.validate())?;
    let mut timings = Timings::default();
    let start = Instant::now();
    let mut timed = |name: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let t = Instant::now();
        f()?;
        timings.stages.push((name.to_string(), t.elapsed().as_secs_f64()));
        info!("stage {name} done in {:.1}s", t.elapsed().as_secs_f64());
        Ok(())
    };
    timed("phantom-gen", &mut || stage_phantom_gen(cfg, out))?;
    timed("train-prnet", &mut || stage_train_prnet(cfg, out).map(drop))?;
    timed("propagate", &mut || stage_propagate(cfg, out).map(drop))?;
    timed("geos", &mut || stage_geos(cfg, out).map(drop))?;
    timed("train-seg", &mut || stage_train_seg(cfg, out))?;
    let mut report = None;
    timed("evaluate", &mut || {
        report = Some(stage_evaluate(cfg, out)?);
        Ok(())
    })?;
    timings.total = start.elapsed().as_secs_f64();
    fs::write(out.join("timings.json"), serde_json::to_string_pretty(&timings)?)?;
    Ok(report.expect("evaluate ran"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_roles() {
        let cfg = ExperimentConfig {
            subjects: SubjectCounts {
                unlabeled: 3,
                validation: 2,
                test: 2,
            },
            ..ExperimentConfig::default()
        };
        let s = cfg.split();
        assert_eq!(s.unlabeled, vec![1, 2, 3]);
        assert_eq!(s.validation, vec![4, 5]);
        assert_eq!(s.test, vec![6, 7]);
        assert_eq!(s.queries(), (1..8).collect::<Vec<_>>());
        assert_eq!(s.tau_subjects(), &[4, 5]);
        assert_eq!(cfg.split().tau_subjects(), cfg.split().validation.as_slice());
    }

    #[test]
    fn global_seed_changes_every_stage_seed() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..a.clone() };
        let (ea, eb) = (a.effective(), b.effective());
        assert_ne!(ea.phantom.seed, eb.phantom.seed);
        assert_ne!(ea.scribble.seed, eb.scribble.seed);
        assert_ne!(ea.prnet_train.seed, eb.prnet_train.seed);
        assert_ne!(ea.propagation.seed, eb.propagation.seed);
        assert_ne!(ea.seg.seed, eb.seg.seed);
        assert_eq!(a.effective(), ea);
    }

    #[test]
    fn config_json_accepts_partial_documents() {
        let c = ExperimentConfig::from_json(r#"{"seed": 9, "subjects": {"test": 2}, "geos": {"gamma": 10}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.subjects.test, 2);
        assert_eq!(c.subjects.unlabeled, 8);
        assert_eq!(c.geos.gamma, 10.0);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::from_json(r#"{"seed": "x"}"#).is_err());
    }

    #[test]
    fn stage_comparison_with_ties() {
        let m = |p, t, l| StageMeans {
            pseudo: p,
            trained: Some(t),
            trained_plc: Some(l),
        };
        let v = compare_stages(&m(0.7, 0.7, 0.7));
        assert_eq!((v.training_helps, v.plc_helps), (Some(true), Some(true)));
        let v = compare_stages(&m(0.7, 0.696, 0.69));
        assert_eq!((v.training_helps, v.plc_helps), (Some(true), Some(false)));
        let v = compare_stages(&m(0.8, 0.7, 0.9));
        assert_eq!((v.training_helps, v.plc_helps), (Some(false), Some(true)));
        let none = compare_stages(&StageMeans {
            pseudo: 0.5,
            trained: None,
            trained_plc: None,
        });
        assert_eq!((none.training_helps, none.plc_helps), (None, None));
    }

    #[test]
    fn ablation_table_layout() {
        let report = MetricsReport {
            test_subjects: vec![3],
            classes: vec![ClassDice {
                class: 1,
                pseudo: 0.5,
                trained: Some(0.6),
                trained_plc: Some(0.75),
                per_subject: Vec::new(),
            }],
            mean: StageMeans {
                pseudo: 0.5,
                trained: Some(0.6),
                trained_plc: Some(0.75),
            },
            verdicts: StageVerdicts {
                training_helps: Some(true),
                plc_helps: Some(true),
            },
            tau_subjects: vec![3],
            tau_sweep: Vec::new(),
            warnings: Vec::new(),
        };
        assert_eq!(
            report_csv(&report),
            "stage,class_1,mean\npseudo_mask,0.5,0.5\ntrained,0.6,0.6\ntrained_plc,0.75,0.75\n"
        );
    }

    #[test]
    fn stage_errors_carry_the_stage_name() {
        let dir = tempfile::tempdir().unwrap();
        let err = stage_train_prnet(&ExperimentConfig::default(), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "train-prnet", .. }), "{err}");
        assert!(err.to_string().starts_with("stage `train-prnet` failed"));
    }
}
