//! Intensity-weighted geodesic distance on the voxel grid and the pseudo
//! masks derived from it.
//!
//! The step cost between adjacent voxels `a`, `b` is
//! `sqrt(|(a - b) * spacing|^2 + gamma^2 (I(a) - I(b))^2)`, so distances mix
//! physical length with accumulated intensity change. [`geodesic_raster`] is
//! the production kernel; [`geodesic_dijkstra`] computes the same quantity
//! exactly and serves as its oracle.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{linear_index, LabelGrid, ScribbleSet, Volume3, Voxel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeosConfig {
    pub gamma: f64,
    /// 6 or 26.
    pub neighborhood: u8,
    /// Forward + backward sweep pairs.
    pub max_passes: usize,
    /// Stop once a pass changes no distance by more than this.
    pub epsilon: f64,
}

impl Default for GeosConfig {
    fn default() -> Self {
        Self {
            gamma: 32.0,
            neighborhood: 26,
            max_passes: 8,
            epsilon: 1e-6,
        }
    }
}

impl GeosConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if self.neighborhood != 6 && self.neighborhood != 26 {
            return Err(Error::Config(format!(
                "neighborhood must be 6 or 26, got {}",
                self.neighborhood
            )));
        }
        if self.max_passes == 0 {
            return Err(Error::Config("max_passes must be >= 1".into()));
        }
        Ok(())
    }
}

fn offsets(neighborhood: u8) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                let nz = (dz != 0) as u8 + (dx != 0) as u8 + (dy != 0) as u8;
                if nz == 0 || (neighborhood == 6 && nz != 1) {
                    continue;
                }
                out.push([dz, dx, dy]);
            }
        }
    }
    out
}

/// Offsets that precede the centre voxel in raster order.
fn causal(o: &[i64; 3]) -> bool {
    (o[0], o[1], o[2]) < (0, 0, 0)
}

pub fn are_adjacent(a: Voxel, b: Voxel, neighborhood: u8) -> bool {
    let d: Vec<usize> = (0..3).map(|i| a[i].abs_diff(b[i])).collect();
    let moved = d.iter().filter(|&&x| x > 0).count();
    d.iter().all(|&x| x <= 1) && moved > 0 && (neighborhood == 26 || moved == 1)
}

pub fn edge_weight(v: &Volume3, a: Voxel, b: Voxel, gamma: f64, neighborhood: u8) -> Result<f64> {
    if !v.contains(a) || !v.contains(b) {
        return Err(Error::Geodesic("voxel outside volume".into()));
    }
    if !are_adjacent(a, b, neighborhood) {
        return Err(Error::Geodesic(format!(
            "{a:?} and {b:?} are not {neighborhood}-adjacent"
        )));
    }
    let e = v.spacing();
    let spatial: f64 = (0..3)
        .map(|i| ((a[i] as f64 - b[i] as f64) * e[i]).powi(2))
        .sum();
    let di = v.get(a) as f64 - v.get(b) as f64;
    Ok((spatial + gamma * gamma * di * di).sqrt())
}

/// Per-voxel geodesic distance to a seed set.
#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicMap {
    pub shape: [usize; 3],
    pub distances: Vec<f64>,
}

impl GeodesicMap {
    pub fn get(&self, c: Voxel) -> f64 {
        self.distances[linear_index(self.shape, c)]
    }

    pub fn max_abs_diff(&self, other: &GeodesicMap) -> f64 {
        self.distances
            .iter()
            .zip(&other.distances)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max)
    }

    /// As an f32 volume, for persistence.
    pub fn to_volume(&self, spacing: [f64; 3]) -> Result<Volume3> {
        Volume3::new(
            self.shape,
            spacing,
            self.distances.iter().map(|&d| d as f32).collect(),
        )
    }
}

fn check_seeds(v: &Volume3, seeds: &[Voxel]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Geodesic("empty seed set".into()));
    }
    if let Some(s) = seeds.iter().find(|s| !v.contains(**s)) {
        return Err(Error::Geodesic(format!("seed {s:?} outside volume")));
    }
    Ok(())
}

#[derive(PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact multi-source shortest paths on the weighted grid graph.
pub fn geodesic_dijkstra(v: &Volume3, seeds: &[Voxel], cfg: &GeosConfig) -> Result<GeodesicMap> {
    cfg.validate()?;
    check_seeds(v, seeds)?;
    let shape = v.shape();
    let mut dist = vec![f64::INFINITY; v.len()];
    let mut heap = BinaryHeap::new();
    for &s in seeds {
        let i = linear_index(shape, s);
        dist[i] = 0.0;
        heap.push(Frontier(0.0, i));
    }
    let nbrs = offsets(cfg.neighborhood);
    while let Some(Frontier(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        let c = crate::volume::voxel_of(shape, i);
        for o in &nbrs {
            let n = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
            if !crate::volume::in_bounds(shape, n) {
                continue;
            }
            let nv = [n[0] as usize, n[1] as usize, n[2] as usize];
            let w = edge_weight(v, c, nv, cfg.gamma, cfg.neighborhood)?;
            let j = linear_index(shape, nv);
            let cand = d + w;
            if cand < dist[j] {
                dist[j] = cand;
                heap.push(Frontier(cand, j));
            }
        }
    }
    Ok(GeodesicMap {
        shape,
        distances: dist,
    })
}

struct Stencil {
    offset: [i64; 3],
    linear: isize,
    spatial_sq: f64,
}

/// Raster-scan geodesic transform: alternating forward and backward sweeps,
/// each relaxing every voxel from its already-visited half-neighbourhood.
pub fn geodesic_raster(v: &Volume3, seeds: &[Voxel], cfg: &GeosConfig) -> Result<GeodesicMap> {
    geodesic_raster_traced(v, seeds, cfg, |_| {})
}

/// [`geodesic_raster`] that hands the distance field to `on_pass` after
/// every sweep pair.
pub fn geodesic_raster_traced(
    v: &Volume3,
    seeds: &[Voxel],
    cfg: &GeosConfig,
    mut on_pass: impl FnMut(&[f64]),
) -> Result<GeodesicMap> {
    cfg.validate()?;
    check_seeds(v, seeds)?;
    let shape = v.shape();
    let [d, h, w] = shape;
    let e = v.spacing();
    let img: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let g2 = cfg.gamma * cfg.gamma;

    let mut dist = vec![f64::INFINITY; v.len()];
    for &s in seeds {
        dist[linear_index(shape, s)] = 0.0;
    }

    let stencil = |fwd: bool| -> Vec<Stencil> {
        offsets(cfg.neighborhood)
            .into_iter()
            .filter(|o| causal(o) == fwd)
            .map(|o| Stencil {
                offset: o,
                linear: (o[0] * (h * w) as i64 + o[1] * w as i64 + o[2]) as isize,
                spatial_sq: (0..3).map(|a| (o[a] as f64 * e[a]).powi(2)).sum(),
            })
            .collect()
    };
    let (fwd, bwd) = (stencil(true), stencil(false));

    let relax = |z: usize, x: usize, y: usize, st: &[Stencil], dist: &mut [f64]| -> f64 {
        let i = (z * h + x) * w + y;
        let mut best = dist[i];
        let interior = z > 0 && z + 1 < d && x > 0 && x + 1 < h && y > 0 && y + 1 < w;
        for s in st {
            if !interior {
                let (nz, nx, ny) = (z as i64 + s.offset[0], x as i64 + s.offset[1], y as i64 + s.offset[2]);
                if nz < 0 || nx < 0 || ny < 0 || nz >= d as i64 || nx >= h as i64 || ny >= w as i64 {
                    continue;
                }
            }
            let j = (i as isize + s.linear) as usize;
            let dj = dist[j];
            if dj >= best {
                continue;
            }
            let di = img[i] - img[j];
            let cand = dj + (s.spatial_sq + g2 * di * di).sqrt();
            if cand < best {
                best = cand;
            }
        }
        let old = dist[i];
        if best < old {
            dist[i] = best;
            if old.is_finite() {
                old - best
            } else {
                f64::INFINITY
            }
        } else {
            0.0
        }
    };

    for _ in 0..cfg.max_passes {
        let mut change = 0.0f64;
        for z in 0..d {
            for x in 0..h {
                for y in 0..w {
                    change = change.max(relax(z, x, y, &fwd, &mut dist));
                }
            }
        }
        for z in (0..d).rev() {
            for x in (0..h).rev() {
                for y in (0..w).rev() {
                    change = change.max(relax(z, x, y, &bwd, &mut dist));
                }
            }
        }
        on_pass(&dist);
        if change <= cfg.epsilon {
            break;
        }
    }
    Ok(GeodesicMap {
        shape,
        distances: dist,
    })
}

/// Label each voxel with the class whose scribble is geodesically nearest.
/// Ties go to the lowest class index. Classes without points are absent
/// from the output and reported in the returned warnings.
pub fn pseudo_mask(v: &Volume3, scribbles: &ScribbleSet, cfg: &GeosConfig) -> Result<(LabelGrid, Vec<String>)> {
    scribbles.validate(v.shape())?;
    let present: Vec<u8> = (0..scribbles.class_count)
        .filter(|&c| scribbles.has_class(c))
        .collect();
    if !scribbles.has_class(0) || present.len() < 2 {
        return Err(Error::Geodesic(
            "pseudo masks need background and at least one foreground class".into(),
        ));
    }
    let warnings: Vec<String> = (0..scribbles.class_count)
        .filter(|c| !present.contains(c))
        .map(|c| format!("class {c} has no scribble points; absent from pseudo mask"))
        .collect();

    let mut best = vec![f64::INFINITY; v.len()];
    let mut labels = vec![0u8; v.len()];
    for &c in &present {
        let seeds: Vec<Voxel> = scribbles.of_class(c).collect();
        let map = geodesic_raster(v, &seeds, cfg)?;
        for (i, &dd) in map.distances.iter().enumerate() {
            if dd < best[i] {
                best[i] = dd;
                labels[i] = c;
            }
        }
    }
    Ok((LabelGrid::new(v.shape(), v.spacing(), labels)?, warnings))
}

/// Inclusive voxel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Voxel,
    pub hi: Voxel,
}

impl BoundingBox {
    pub fn size(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a] + 1)
    }

    pub fn contains(&self, c: Voxel) -> bool {
        (0..3).all(|a| c[a] >= self.lo[a] && c[a] <= self.hi[a])
    }
}

/// Tight box around `class`, dilated by `margin` voxels and clipped to the grid.
pub fn crop_roi(mask: &LabelGrid, class: u8, margin: usize) -> Result<BoundingBox> {
    let shape = mask.shape();
    let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
    let mut found = false;
    for (i, &l) in mask.labels().iter().enumerate() {
        if l == class {
            found = true;
            let c = crate::volume::voxel_of(shape, i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !found {
        return Err(Error::Geodesic(format!("class {class} absent from mask")));
    }
    Ok(BoundingBox {
        lo: std::array::from_fn(|a| lo[a].saturating_sub(margin)),
        hi: std::array::from_fn(|a| (hi[a] + margin).min(shape[a] - 1)),
    })
}
