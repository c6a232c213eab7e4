//! Simulated support annotation: a short polyline through an organ's
//! interior and a background cage around it.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_of, LabelGrid, ScribbleSet, Voxel};

/// Background cage distance from the organ's bounding box, in mm.
const BG_MARGIN_MM: f64 = 4.0;

fn neighbors26(shape: [usize; 3], c: Voxel) -> impl Iterator<Item = Voxel> {
    let mut out = Vec::with_capacity(26);
    for dz in -1i64..=1 {
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                if dz == 0 && dx == 0 && dy == 0 {
                    continue;
                }
                let n = [c[0] as i64 + dz, c[1] as i64 + dx, c[2] as i64 + dy];
                if (0..3).all(|a| n[a] >= 0 && (n[a] as usize) < shape[a]) {
                    out.push([n[0] as usize, n[1] as usize, n[2] as usize]);
                }
            }
        }
    }
    out.into_iter()
}

/// Voxels of `pred` whose full 26-neighbourhood lies inside the grid and
/// also satisfies `pred`.
fn interior_mask(gt: &LabelGrid, pred: impl Fn(u8) -> bool) -> Vec<bool> {
    let shape = gt.shape();
    (0..gt.labels().len())
        .map(|i| {
            let c = voxel_of(shape, i);
            pred(gt.labels()[i])
                && (0..3).all(|a| c[a] >= 1 && c[a] + 1 < shape[a])
                && neighbors26(shape, c).all(|n| pred(gt.get(n)))
        })
        .collect()
}

/// Voxel of `mask` farthest (in 26-connected hops) from `start`.
fn farthest_in_mask(shape: [usize; 3], mask: &[bool], start: Voxel) -> Voxel {
    let mut seen = vec![false; mask.len()];
    let s = linear_index(shape, start);
    seen[s] = true;
    let mut queue = VecDeque::from([s]);
    let mut last = s;
    while let Some(i) = queue.pop_front() {
        last = i;
        for nb in neighbors26(shape, voxel_of(shape, i)) {
            let j = linear_index(shape, nb);
            if mask[j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    voxel_of(shape, last)
}

/// Self-avoiding walk through `mask` starting at `start`, stepping to the
/// free neighbour with the fewest free neighbours (Warnsdorff's rule) so
/// the walk sweeps compact regions instead of cutting across them.
fn serpentine_walk(shape: [usize; 3], mask: &[bool], start: Voxel, max_len: usize) -> Vec<Voxel> {
    let mut used = vec![false; mask.len()];
    let free = |v: Voxel, used: &[bool]| {
        let i = linear_index(shape, v);
        mask[i] && !used[i]
    };
    let mut path = vec![start];
    used[linear_index(shape, start)] = true;
    let mut cur = start;
    while path.len() < max_len {
        let next = neighbors26(shape, cur)
            .filter(|&n| free(n, &used))
            .min_by_key(|&n| neighbors26(shape, n).filter(|&m| free(m, &used)).count());
        let Some(n) = next else { break };
        used[linear_index(shape, n)] = true;
        path.push(n);
        cur = n;
    }
    path
}

/// Support scribble for `class`: `points_per_class` distinct, consecutively
/// 26-adjacent interior voxels, plus `2 * points_per_class` background points spread over
/// a cage of three axial rectangles around the class.
pub fn draw_support_scribble<R: Rng>(
    gt: &LabelGrid,
    class: u8,
    points_per_class: usize,
    rng: &mut R,
) -> Result<ScribbleSet> {
    if class == 0 {
        return Err(Error::Scribble("foreground class must be nonzero".into()));
    }
    if points_per_class == 0 {
        return Err(Error::Scribble("points_per_class must be positive".into()));
    }
    let shape = gt.shape();
    let interior = interior_mask(gt, |l| l == class);
    let candidates: Vec<usize> = (0..interior.len()).filter(|&i| interior[i]).collect();
    if gt.count(class) == 0 {
        return Err(Error::Scribble(format!("class {class} absent from label grid")));
    }
    if candidates.len() < points_per_class {
        return Err(Error::Scribble(format!(
            "class {class} has {} interior voxels, {points_per_class} requested",
            candidates.len()
        )));
    }
    let start = voxel_of(shape, candidates[rng.gen_range(0..candidates.len())]);
    let end = farthest_in_mask(shape, &interior, start);
    let path = serpentine_walk(shape, &interior, end, points_per_class);
    if path.len() < points_per_class {
        return Err(Error::Scribble(format!(
            "class {class} interior too thin for a {points_per_class}-voxel scribble"
        )));
    }
    let mut set = ScribbleSet::new(gt.max_label() + 1);
    for &v in &path {
        set.push(v, class);
    }
    for v in background_cage(gt, class, 2 * points_per_class) {
        set.push(v, 0);
    }
    if !set.has_class(0) {
        return Err(Error::Scribble(format!("no background room around class {class}")));
    }
    Ok(set)
}

fn background_cage(gt: &LabelGrid, class: u8, count: usize) -> Vec<Voxel> {
    let shape = gt.shape();
    let sp = gt.spacing();
    let bg_interior = interior_mask(gt, |l| l == 0);
    let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
    for (i, &l) in gt.labels().iter().enumerate() {
        if l == class {
            let c = voxel_of(shape, i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    let m: [i64; 3] = std::array::from_fn(|a| (BG_MARGIN_MM / sp[a]).ceil() as i64);
    let clamp = |v: i64, a: usize| v.clamp(0, shape[a] as i64 - 1) as usize;
    let z_levels = [
        clamp(lo[0] as i64 - m[0], 0),
        (lo[0] + hi[0]) / 2,
        clamp(hi[0] as i64 + m[0], 0),
    ];
    let (x0, x1) = (clamp(lo[1] as i64 - m[1], 1), clamp(hi[1] as i64 + m[1], 1));
    let (y0, y1) = (clamp(lo[2] as i64 - m[2], 2), clamp(hi[2] as i64 + m[2], 2));

    let mut ring = Vec::new();
    for &z in &z_levels {
        // perimeter walked in order so consecutive entries are adjacent
        for y in y0..=y1 {
            ring.push([z, x0, y]);
        }
        for x in x0 + 1..=x1 {
            ring.push([z, x, y1]);
        }
        for y in (y0..y1).rev() {
            ring.push([z, x1, y]);
        }
        for x in (x0 + 1..x1).rev() {
            ring.push([z, x, y0]);
        }
    }
    ring.dedup();
    let usable: Vec<Voxel> = ring
        .into_iter()
        .filter(|&v| bg_interior[linear_index(shape, v)])
        .collect();
    if usable.len() <= count {
        return usable;
    }
    (0..count)
        .map(|k| usable[k * usable.len() / count])
        .collect()
}
