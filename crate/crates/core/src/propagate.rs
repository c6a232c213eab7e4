//! One-shot scribble propagation: each support point is relocated onto a
//! query volume by predicting its offset from a random start patch, then
//! checked by comparing mid-level and full-resolution features.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::save_scribbles;
use crate::prnet::{pred_offset, PRNet, Vec3};
use crate::volume::{clamp_to, LabelGrid, ScribbleSet, Volume3, Voxel};

/// What the localizer needs from a patch: its coordinate and the two
/// center feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeatures {
    pub p: Vec3,
    pub f2: Vec<f64>,
    pub f4: Vec<f64>,
}

/// Anything that embeds a volume location; the trained network in
/// practice, an exact oracle in tests.
pub trait PointEncoder {
    fn encode(&self, volume: &Volume3, center: Voxel) -> Result<PointFeatures>;
    /// The `r` of the bounded offset prediction.
    fn offset_bound(&self) -> f64;
}

impl PointEncoder for PRNet {
    fn encode(&self, volume: &Volume3, center: Voxel) -> Result<PointFeatures> {
        let o = PRNet::encode(self, volume, center)?;
        Ok(PointFeatures {
            p: o.p,
            f2: o.f2,
            f4: o.f4,
        })
    }

    fn offset_bound(&self) -> f64 {
        self.r
    }
}

/// Exact localizer for volumes sharing one frame: coordinates are the
/// physical position scaled by `1 / r`, so `r · tanh(p0 − p1)` reproduces
/// the true offset up to `O(offset³ / r²)`. Features are the local
/// intensity neighbourhood.
#[derive(Clone, Debug)]
pub struct OracleEncoder {
    pub r: f64,
}

impl Default for OracleEncoder {
    fn default() -> Self {
        Self { r: 1e6 }
    }
}

impl PointEncoder for OracleEncoder {
    fn encode(&self, volume: &Volume3, c: Voxel) -> Result<PointFeatures> {
        let e = volume.spacing();
        let p = std::array::from_fn(|a| c[a] as f64 * e[a] / self.r);
        let shape = volume.shape();
        let mut f4 = Vec::with_capacity(27);
        for dz in -1i64..=1 {
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    let n = clamp_to(shape, [c[0] as i64 + dz, c[1] as i64 + dx, c[2] as i64 + dy]);
                    f4.push(1.0 + volume.get(n) as f64);
                }
            }
        }
        Ok(PointFeatures {
            p,
            f2: vec![1.0, volume.get(c) as f64 + 1.0],
            f4,
        })
    }

    fn offset_bound(&self) -> f64 {
        self.r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    /// Keep a relocated point iff its similarity is strictly above `tau`.
    pub tau: f64,
    /// Random starts per (support point, query); the most similar landing wins.
    pub restarts: usize,
    /// Extra offset predictions taken from each landing; the walk stops
    /// early at a fixed point. 0 gives the single jump.
    pub refine_steps: usize,
    /// Uniform integer jitter in `[-n, n]` voxels added to a landing
    /// before feature comparison; 0 disables it.
    pub loc_noise_voxels: usize,
    /// Fraction of landings that receive the jitter.
    pub loc_noise_rate: f64,
    pub seed: u64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            restarts: 1,
            refine_steps: 2,
            loc_noise_voxels: 0,
            loc_noise_rate: 1.0,
            seed: 23,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocatedPoint {
    pub source: Voxel,
    pub label: u8,
    pub query: usize,
    pub start: Voxel,
    pub located: Voxel,
    pub sim: Option<f64>,
    pub kept: bool,
}

/// Start voxel drawn uniformly from the central half of each axis.
fn interior_start<R: Rng>(shape: [usize; 3], rng: &mut R) -> Voxel {
    std::array::from_fn(|a| {
        let m = shape[a] / 4;
        rng.gen_range(m..shape[a] - m)
    })
}

/// Moves `c1` by the predicted offset between the support point and the
/// patch at `c1`, rounded to the query grid and clamped to it.
fn step_from<E: PointEncoder>(enc: &E, support: &PointFeatures, query: &Volume3, c1: Voxel) -> Result<Voxel> {
    let q = enc.encode(query, c1)?;
    let d = pred_offset(support.p, q.p, enc.offset_bound());
    let e = query.spacing();
    Ok(clamp_to(
        query.shape(),
        std::array::from_fn(|a| c1[a] as i64 + (d[a] / e[a]).round() as i64),
    ))
}

/// One jump from `start`, then up to `refine_steps` further jumps.
fn walk_from<E: PointEncoder>(
    enc: &E,
    support: &PointFeatures,
    query: &Volume3,
    start: Voxel,
    refine_steps: usize,
) -> Result<Voxel> {
    let mut cur = step_from(enc, support, query, start)?;
    for _ in 0..refine_steps {
        let next = step_from(enc, support, query, cur)?;
        if next == cur {
            break;
        }
        cur = next;
    }
    Ok(cur)
}

/// Relocates support point `c0` onto `query` from one random start.
pub fn locate_point<E: PointEncoder, R: Rng>(
    enc: &E,
    support: &Volume3,
    c0: Voxel,
    query: &Volume3,
    refine_steps: usize,
    rng: &mut R,
) -> Result<LocatedPoint> {
    if !support.contains(c0) {
        return Err(Error::Scribble(format!("support point {c0:?} outside volume")));
    }
    let s = enc.encode(support, c0)?;
    let start = interior_start(query.shape(), rng);
    let located = walk_from(enc, &s, query, start, refine_steps)?;
    Ok(LocatedPoint {
        source: c0,
        label: 0,
        query: 0,
        start,
        located,
        sim: None,
        kept: false,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 || !(na * nb).is_finite() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Product of the two cosine similarities; a zero vector scores −1.
pub fn dfd_sim(f2_s: &[f64], f4_s: &[f64], f2_q: &[f64], f4_q: &[f64]) -> Result<f64> {
    if f2_s.len() != f2_q.len() || f4_s.len() != f4_q.len() {
        return Err(Error::Shape(format!(
            "feature lengths differ: f2 {} vs {}, f4 {} vs {}",
            f2_s.len(),
            f2_q.len(),
            f4_s.len(),
            f4_q.len()
        )));
    }
    Ok(match (cosine(f2_s, f2_q), cosine(f4_s, f4_q)) {
        (Some(a), Some(b)) => a * b,
        _ => -1.0,
    })
}

/// Marks points with `sim > tau` as kept; returns their indices.
pub fn filter_points(points: &mut [LocatedPoint], tau: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    for (i, p) in points.iter_mut().enumerate() {
        p.kept = p.sim.is_some_and(|s| s > tau);
        if p.kept {
            kept.push(i);
        }
    }
    kept
}

/// Propagation outcome on one query volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPropagation {
    pub query: usize,
    pub shape: [usize; 3],
    pub points: Vec<LocatedPoint>,
    pub warnings: Vec<String>,
}

impl QueryPropagation {
    /// The kept points as a pseudo scribble.
    pub fn scribbles(&self, class_count: u8) -> ScribbleSet {
        let mut s = ScribbleSet::new(class_count);
        for p in self.points.iter().filter(|p| p.kept) {
            s.push(p.located, p.label);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationResult {
    pub tau: f64,
    pub class_count: u8,
    pub queries: Vec<QueryPropagation>,
}

impl PropagationResult {
    /// Same audit re-filtered at another threshold.
    pub fn with_tau(&self, tau: f64) -> Self {
        let mut out = self.clone();
        out.tau = tau;
        let classes: Vec<u8> = (0..self.class_count)
            .filter(|&c| self.queries.iter().flat_map(|q| &q.points).any(|p| p.label == c))
            .collect();
        for q in &mut out.queries {
            filter_points(&mut q.points, tau);
            q.warnings = classes
                .iter()
                .filter(|&&c| !q.points.iter().any(|p| p.kept && p.label == c))
                .map(|c| format!("query {}: every class {c} point discarded at tau {tau}", q.query))
                .collect();
        }
        out
    }

    pub fn warnings(&self) -> impl Iterator<Item = &String> {
        self.queries.iter().flat_map(|q| &q.warnings)
    }

    /// Writes `audit.json` with every located point and one
    /// `query_NNN.scribble.json` per query volume.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("audit.json"), serde_json::to_string_pretty(self)?)?;
        for q in &self.queries {
            save_scribbles(
                &dir.join(format!("query_{:03}.scribble.json", q.query)),
                &q.scribbles(self.class_count),
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("audit.json");
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::format(&path, e.to_string()))
    }
}

/// Propagates every support point onto every query volume, scores the
/// landing with [`dfd_sim`] and filters at `cfg.tau`.
pub fn propagate_scribbles<E: PointEncoder, R: Rng>(
    enc: &E,
    support: (&Volume3, &ScribbleSet),
    queries: &[&Volume3],
    cfg: &PropagationConfig,
    rng: &mut R,
) -> Result<PropagationResult> {
    let (sv, scribbles) = support;
    if scribbles.is_empty() {
        return Err(Error::Scribble("support scribble is empty".into()));
    }
    if cfg.restarts == 0 {
        return Err(Error::Config("restarts must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.loc_noise_rate) {
        return Err(Error::Config(format!("loc_noise_rate must lie in [0, 1], got {}", cfg.loc_noise_rate)));
    }
    scribbles.validate(sv.shape())?;
    let support_feats = scribbles
        .points
        .iter()
        .map(|p| enc.encode(sv, p.voxel))
        .collect::<Result<Vec<_>>>()?;

    let noise = cfg.loc_noise_voxels as i64;
    let mut out = Vec::with_capacity(queries.len());
    for (qi, query) in queries.iter().enumerate() {
        let mut points = Vec::with_capacity(scribbles.len());
        for (sp, sf) in scribbles.points.iter().zip(&support_feats) {
            let mut best: Option<LocatedPoint> = None;
            for _ in 0..cfg.restarts {
                let start = interior_start(query.shape(), rng);
                let mut located = walk_from(enc, sf, query, start, cfg.refine_steps)?;
                if noise > 0 && rng.gen_bool(cfg.loc_noise_rate) {
                    let jitter: [i64; 3] = std::array::from_fn(|_| rng.gen_range(-noise..=noise));
                    located = clamp_to(query.shape(), std::array::from_fn(|a| located[a] as i64 + jitter[a]));
                }
                let q = enc.encode(query, located)?;
                let sim = dfd_sim(&sf.f2, &sf.f4, &q.f2, &q.f4)?;
                if best.as_ref().is_none_or(|b| sim > b.sim.unwrap_or(f64::NEG_INFINITY)) {
                    best = Some(LocatedPoint {
                        source: sp.voxel,
                        label: sp.label,
                        query: qi,
                        start,
                        located,
                        sim: Some(sim),
                        kept: false,
                    });
                }
            }
            points.extend(best);
        }
        out.push(QueryPropagation {
            query: qi,
            shape: query.shape(),
            points,
            warnings: Vec::new(),
        });
    }
    let result = PropagationResult {
        tau: cfg.tau,
        class_count: scribbles.class_count,
        queries: out,
    }
    .with_tau(cfg.tau);
    for w in result.warnings() {
        log::warn!("{w}");
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrecision {
    pub class: u8,
    /// Fraction of kept points whose true label matches; 0 when none kept.
    pub precision: f64,
    pub kept: usize,
    pub kept_per_volume: f64,
    /// Set when no point of this class survived anywhere.
    pub empty: bool,
}

pub fn precision_report(result: &PropagationResult, gt: &[&LabelGrid]) -> Result<Vec<ClassPrecision>> {
    if gt.len() != result.queries.len() {
        return Err(Error::Config(format!(
            "{} ground-truth grids for {} query volumes",
            gt.len(),
            result.queries.len()
        )));
    }
    let nq = result.queries.len().max(1) as f64;
    Ok((0..result.class_count)
        .map(|class| {
            let (mut kept, mut correct) = (0usize, 0usize);
            for (q, g) in result.queries.iter().zip(gt) {
                for p in q.points.iter().filter(|p| p.kept && p.label == class) {
                    kept += 1;
                    correct += usize::from(g.get(p.located) == class);
                }
            }
            ClassPrecision {
                class,
                precision: if kept == 0 { 0.0 } else { correct as f64 / kept as f64 },
                kept,
                kept_per_volume: kept as f64 / nq,
                empty: kept == 0,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use crate::scribble::draw_support_scribble;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Encoder with a fixed coordinate for every patch: zero offsets.
    struct Still;
    impl PointEncoder for Still {
        fn encode(&self, _: &Volume3, _: Voxel) -> Result<PointFeatures> {
            Ok(PointFeatures {
                p: [0.0; 3],
                f2: vec![1.0],
                f4: vec![1.0],
            })
        }
        fn offset_bound(&self) -> f64 {
            10.0
        }
    }

    /// Encoder that always predicts a huge positive offset.
    struct Pusher;
    impl PointEncoder for Pusher {
        fn encode(&self, v: &Volume3, c: Voxel) -> Result<PointFeatures> {
            // support point sits at the origin corner; queries elsewhere
            let p = if c == [0, 0, 0] && v.shape()[0] == 3 { [50.0; 3] } else { [0.0; 3] };
            Ok(PointFeatures {
                p,
                f2: vec![1.0],
                f4: vec![1.0],
            })
        }
        fn offset_bound(&self) -> f64 {
            1000.0
        }
    }

    fn point(sim: f64) -> LocatedPoint {
        LocatedPoint {
            source: [0; 3],
            label: 1,
            query: 0,
            start: [0; 3],
            located: [0; 3],
            sim: Some(sim),
            kept: false,
        }
    }

    fn phantom_pair(cfg: &PhantomConfig) -> ((Volume3, LabelGrid), (Volume3, LabelGrid)) {
        (generate_phantom(cfg, 0).unwrap(), generate_phantom(cfg, 1).unwrap())
    }

    #[test]
    fn oracle_locates_exactly_without_deformation() {
        let v = generate_phantom(&PhantomConfig::default(), 0).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c0 in [[3, 7, 11], [20, 40, 5], [12, 24, 24]] {
            let lp = locate_point(&OracleEncoder::default(), &v, c0, &v, 0, &mut rng).unwrap();
            assert_eq!(lp.located, c0);
        }
    }

    #[test]
    fn zero_offset_stays_at_start() {
        let v = Volume3::filled([8, 8, 8], [1.0; 3], 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lp = locate_point(&Still, &v, [1, 1, 1], &v, 0, &mut rng).unwrap();
        assert_eq!(lp.located, lp.start);
        assert!((0..3).all(|a| (2..6).contains(&lp.start[a])));
    }

    #[test]
    fn landing_outside_is_clamped() {
        let support = Volume3::filled([3, 3, 3], [1.0; 3], 0.0).unwrap();
        let query = Volume3::filled([8, 9, 10], [1.0; 3], 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = locate_point(&Pusher, &support, [0, 0, 0], &query, 0, &mut rng).unwrap();
        assert_eq!(lp.located, [7, 8, 9]);
    }

    /// Coordinates at half scale: every jump covers half the remaining way.
    struct Halfway;
    impl PointEncoder for Halfway {
        fn encode(&self, v: &Volume3, c: Voxel) -> Result<PointFeatures> {
            let e = v.spacing();
            Ok(PointFeatures {
                p: std::array::from_fn(|a| 0.5 * c[a] as f64 * e[a] / 1e6),
                f2: vec![1.0],
                f4: vec![1.0],
            })
        }
        fn offset_bound(&self) -> f64 {
            1e6
        }
    }

    #[test]
    fn refinement_closes_remaining_gap() {
        let v = Volume3::filled([64, 64, 64], [1.0; 3], 0.0).unwrap();
        let c0 = [20, 40, 33];
        let err = |steps| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let lp = locate_point(&Halfway, &v, c0, &v, steps, &mut rng).unwrap();
            (0..3).map(|a| (lp.located[a] as i64 - c0[a] as i64).abs()).max().unwrap()
        };
        assert!(err(0) >= 4);
        assert!(err(6) <= 1, "{}", err(6));
    }

    #[test]
    fn dfd_sim_examples() {
        let a = [0.3, -1.2, 2.0];
        let b = [1.0, 0.5];
        assert_eq!(dfd_sim(&a, &b, &a, &b).unwrap(), 1.0);
        assert_eq!(dfd_sim(&[1.0, 0.0], &b, &[0.0, 2.0], &[4.0, -1.0]).unwrap(), 0.0);
        // cos 0.8 and cos 0.5
        let s = dfd_sim(&[1.0, 0.0], &[1.0, 0.0], &[0.8, 0.6], &[0.5, 0.75f64.sqrt()]).unwrap();
        assert!((s - 0.4).abs() < 1e-12);
        assert_eq!(dfd_sim(&[0.0, 0.0], &b, &[1.0, 1.0], &b).unwrap(), -1.0);
        assert!(dfd_sim(&[1.0], &b, &[1.0, 2.0], &b).is_err());
    }

    #[test]
    fn filter_examples() {
        let mut pts = vec![point(0.6), point(0.4), point(0.9)];
        assert_eq!(filter_points(&mut pts, 0.5), vec![0, 2]);
        assert!(filter_points(&mut pts, 1.0).is_empty());
        assert_eq!(filter_points(&mut pts, -1.1).len(), 3);
        let mut unset = vec![LocatedPoint { sim: None, ..point(0.0) }];
        assert!(filter_points(&mut unset, -2.0).is_empty());
    }

    #[test]
    fn oracle_propagation_hits_the_right_class() {
        let cfg = PhantomConfig {
            deform_amplitude: 0.0,
            ..PhantomConfig::default()
        };
        let ((sv, sl), (qv, ql)) = phantom_pair(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = draw_support_scribble(&sl, 1, 6, &mut rng).unwrap();
        s.extend(&draw_support_scribble(&sl, 2, 6, &mut rng).unwrap());
        let pc = PropagationConfig {
            tau: -1.1,
            ..PropagationConfig::default()
        };
        let res = propagate_scribbles(&OracleEncoder::default(), (&sv, &s), &[&qv, &sv], &pc, &mut rng).unwrap();
        for q in &res.queries {
            assert_eq!(q.points.len(), s.len());
            assert!(q.points.iter().all(|p| p.kept));
        }
        let prec = precision_report(&res, &[&ql, &sl]).unwrap();
        assert!(prec.iter().all(|c| c.precision == 1.0 && !c.empty), "{prec:?}");
        assert!(res.warnings().next().is_none());
    }

    #[test]
    fn precision_ratio_and_empty_flag() {
        let gt = LabelGrid::new([1, 1, 3], [1.0; 3], vec![1, 1, 0]).unwrap();
        let mk = |y: usize| LocatedPoint {
            located: [0, 0, y],
            kept: true,
            ..point(1.0)
        };
        let res = PropagationResult {
            tau: 0.5,
            class_count: 3,
            queries: vec![QueryPropagation {
                query: 0,
                shape: [1, 1, 3],
                points: vec![mk(0), mk(1), mk(2)],
                warnings: vec![],
            }],
        };
        let p = precision_report(&res, &[&gt]).unwrap();
        assert!((p[1].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p[1].kept, 3);
        assert!(p[2].empty && p[2].precision == 0.0);
    }

    #[test]
    fn warning_when_class_fully_discarded() {
        let cfg = PhantomConfig::default();
        let ((sv, sl), (qv, _)) = phantom_pair(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = draw_support_scribble(&sl, 1, 4, &mut rng).unwrap();
        let pc = PropagationConfig {
            tau: 1.0,
            ..PropagationConfig::default()
        };
        let res = propagate_scribbles(&OracleEncoder::default(), (&sv, &s), &[&qv], &pc, &mut rng).unwrap();
        assert_eq!(res.warnings().count(), 2);
        assert!(res.queries[0].scribbles(s.class_count).is_empty());
    }

    #[test]
    fn noise_rate_selects_jittered_landings() {
        let cfg = PhantomConfig::default();
        let ((sv, sl), (qv, _)) = phantom_pair(&cfg);
        let s = draw_support_scribble(&sl, 1, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let run = |voxels, rate| {
            let pc = PropagationConfig {
                loc_noise_voxels: voxels,
                loc_noise_rate: rate,
                ..PropagationConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            propagate_scribbles(&OracleEncoder::default(), (&sv, &s), &[&qv], &pc, &mut rng)
        };
        let landings = |r: PropagationResult| r.queries[0].points.iter().map(|p| p.located).collect::<Vec<_>>();
        let clean = landings(run(0, 1.0).unwrap());
        assert_eq!(landings(run(4, 0.0).unwrap()), clean);
        assert_ne!(landings(run(4, 1.0).unwrap()), clean);
        assert!(run(4, 1.5).is_err());
    }

    #[test]
    fn save_and_load_audit() {
        let cfg = PhantomConfig::default();
        let ((sv, sl), (qv, _)) = phantom_pair(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = draw_support_scribble(&sl, 2, 3, &mut rng).unwrap();
        let res = propagate_scribbles(
            &OracleEncoder::default(),
            (&sv, &s),
            &[&qv],
            &PropagationConfig::default(),
            &mut rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        res.save(dir.path()).unwrap();
        assert_eq!(PropagationResult::load(dir.path()).unwrap(), res);
        let back = crate::io::load_scribbles(&dir.path().join("query_000.scribble.json"), qv.shape()).unwrap();
        assert_eq!(back, res.queries[0].scribbles(s.class_count));
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn sim_bounded_symmetric_and_scale_invariant(
            a2 in vec_strategy(5), a4 in vec_strategy(7),
            b2 in vec_strategy(5), b4 in vec_strategy(7),
            lambda in 0.01f64..100.0,
        ) {
            let s = dfd_sim(&a2, &a4, &b2, &b4).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert_eq!(s, dfd_sim(&b2, &b4, &a2, &a4).unwrap());
            let scaled: Vec<f64> = a2.iter().map(|x| x * lambda).collect();
            let s2 = dfd_sim(&scaled, &a4, &b2, &b4).unwrap();
            prop_assert!((s - s2).abs() < 1e-12);
            if a2.iter().any(|&x| x != 0.0) && a4.iter().any(|&x| x != 0.0) {
                prop_assert_eq!(dfd_sim(&a2, &a4, &a2, &a4).unwrap(), 1.0);
            }
        }

        #[test]
        fn kept_sets_shrink_as_tau_grows(
            sims in prop::collection::vec(-1.0f64..=1.0, 0..40),
            t1 in -1.2f64..1.2, t2 in -1.2f64..1.2,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mut pts: Vec<LocatedPoint> = sims.iter().map(|&s| point(s)).collect();
            let k_lo = filter_points(&mut pts, lo);
            let k_hi = filter_points(&mut pts, hi);
            prop_assert!(k_hi.iter().all(|i| k_lo.contains(i)));
        }
    }
}
