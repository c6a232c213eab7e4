//! Volumes, label grids and scribbles on a `(z, x, y)` voxel lattice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Voxel coordinate `(z, x, y)`.
pub type Voxel = [usize; 3];

/// Signed voxel offset, for coordinates that may fall outside a grid.
pub type Offset = [i64; 3];

#[inline]
pub fn linear_index(shape: [usize; 3], c: Voxel) -> usize {
    (c[0] * shape[1] + c[1]) * shape[2] + c[2]
}

#[inline]
pub fn voxel_of(shape: [usize; 3], idx: usize) -> Voxel {
    let y = idx % shape[2];
    let x = (idx / shape[2]) % shape[1];
    let z = idx / (shape[1] * shape[2]);
    [z, x, y]
}

pub fn in_bounds(shape: [usize; 3], c: Offset) -> bool {
    (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < shape[a])
}

/// Nearest in-bounds voxel.
pub fn clamp_to(shape: [usize; 3], c: Offset) -> Voxel {
    std::array::from_fn(|a| c[a].clamp(0, shape[a] as i64 - 1) as usize)
}

fn check_shape(shape: [usize; 3]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("empty volume shape {shape:?}")));
    }
    Ok(())
}

/// Scalar 3D image with physical spacing in mm, row-major `(z, x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3 {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(shape, spacing, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, c: Voxel) -> f32 {
        self.data[linear_index(self.shape, c)]
    }

    pub fn contains(&self, c: Voxel) -> bool {
        (0..3).all(|a| c[a] < self.shape[a])
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Physical extent corner to corner, in mm.
    pub fn diagonal_mm(&self) -> f64 {
        (0..3)
            .map(|a| ((self.shape[a] - 1) as f64 * self.spacing[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Min-max rescale to `[0, 1]`. A constant volume maps to all zeros.
pub fn normalize_intensity(v: &Volume3) -> Volume3 {
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data.iter().map(|&x| (x - lo) / range).collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Volume3 {
        shape: v.shape,
        spacing: v.spacing,
        data,
    }
}

/// Start offset of a patch of extent `size` whose center index
/// (`size / 2`) sits on `center`.
fn patch_origin(center: Voxel, size: [usize; 3]) -> Offset {
    std::array::from_fn(|a| center[a] as i64 - (size[a] / 2) as i64)
}

/// Crops a `(d, h, w)` patch centred on `center`; out-of-bounds voxels take
/// the volume minimum.
pub fn crop_patch(v: &Volume3, center: Voxel, size: [usize; 3]) -> Result<Tensor> {
    if !v.contains(center) {
        return Err(Error::Shape(format!(
            "patch center {center:?} outside volume {:?}",
            v.shape
        )));
    }
    if (0..3).any(|a| size[a] == 0 || size[a] > 2 * v.shape[a]) {
        return Err(Error::Shape(format!(
            "patch size {size:?} invalid for volume {:?}",
            v.shape
        )));
    }
    Ok(crop_window(v, patch_origin(center, size), size, v.min_max().0 as f64))
}

/// Copies the window `[origin, origin + size)`; voxels outside the volume
/// take `pad`.
pub fn crop_window(v: &Volume3, origin: Offset, size: [usize; 3], pad: f64) -> Tensor {
    let mut out = vec![pad; size.iter().product()];
    copy_window(v.shape, origin, size, |src, dst| out[dst] = v.data[src] as f64);
    Tensor::new(size.to_vec(), out).expect("buffer sized from shape")
}

/// Label counterpart of [`crop_window`]; outside voxels are background.
pub fn crop_label_window(grid: &LabelGrid, origin: Offset, size: [usize; 3]) -> Vec<u8> {
    let mut out = vec![0u8; size.iter().product()];
    copy_window(grid.shape, origin, size, |src, dst| out[dst] = grid.labels[src]);
    out
}

/// Writes the in-bounds part of `patch` back into `v` at `center`; the
/// inverse of [`crop_patch`] on in-bounds voxels.
pub fn embed_patch(v: &mut Volume3, center: Voxel, patch: &Tensor) -> Result<()> {
    let s = patch.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected a 3D patch, got {s:?}")));
    }
    let size = [s[0], s[1], s[2]];
    let origin = patch_origin(center, size);
    let shape = v.shape;
    let data = &mut v.data;
    copy_window(shape, origin, size, |dst, src| data[dst] = patch.data()[src] as f32);
    Ok(())
}

/// Calls `f(volume_index, patch_index)` for every in-bounds voxel of the
/// window `[origin, origin + size)`.
fn copy_window(shape: [usize; 3], origin: Offset, size: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let range = |a: usize| {
        let lo = (-origin[a]).max(0) as usize;
        let hi = ((shape[a] as i64 - origin[a]).min(size[a] as i64)).max(0) as usize;
        lo..hi.max(lo)
    };
    let (rz, rx, ry) = (range(0), range(1), range(2));
    for pz in rz {
        let vz = (origin[0] + pz as i64) as usize;
        for px in rx.clone() {
            let vx = (origin[1] + px as i64) as usize;
            for py in ry.clone() {
                let vy = (origin[2] + py as i64) as usize;
                f(
                    linear_index(shape, [vz, vx, vy]),
                    linear_index(size, [pz, px, py]),
                );
            }
        }
    }
}

/// Label patch with the same centring as [`crop_patch`]; outside voxels are background.
pub fn crop_label_patch(grid: &LabelGrid, center: Voxel, size: [usize; 3]) -> Vec<u8> {
    crop_label_window(grid, patch_origin(center, size), size)
}

/// Dense per-voxel class labels; class 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    shape: [usize; 3],
    spacing: [f64; 3],
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product::<usize>();
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} labels, got {}",
                labels.len()
            )));
        }
        Ok(Self { shape, spacing, labels })
    }

    pub fn background(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Self {
            shape,
            spacing,
            labels: vec![0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, c: Voxel) -> u8 {
        self.labels[linear_index(self.shape, c)]
    }

    #[inline]
    pub fn set(&mut self, c: Voxel, label: u8) {
        let i = linear_index(self.shape, c);
        self.labels[i] = label;
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// One-vs-rest mask for `class`.
    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScribblePoint {
    pub voxel: Voxel,
    pub label: u8,
}

/// Sparse labelled voxels: a support annotation or propagated pseudo scribble.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScribbleSet {
    pub points: Vec<ScribblePoint>,
    pub class_count: u8,
}

impl ScribbleSet {
    pub fn new(class_count: u8) -> Self {
        Self {
            points: Vec::new(),
            class_count,
        }
    }

    pub fn push(&mut self, voxel: Voxel, label: u8) {
        self.points.push(ScribblePoint { voxel, label });
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn of_class(&self, class: u8) -> impl Iterator<Item = Voxel> + '_ {
        self.points.iter().filter(move |p| p.label == class).map(|p| p.voxel)
    }

    pub fn has_class(&self, class: u8) -> bool {
        self.points.iter().any(|p| p.label == class)
    }

    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        for p in &self.points {
            if (0..3).any(|a| p.voxel[a] >= shape[a]) {
                return Err(Error::Scribble(format!(
                    "point {:?} outside volume {shape:?}",
                    p.voxel
                )));
            }
            if p.label >= self.class_count {
                return Err(Error::Scribble(format!(
                    "label {} not below class count {}",
                    p.label, self.class_count
                )));
            }
        }
        Ok(())
    }

    pub fn extend(&mut self, other: &ScribbleSet) {
        self.points.extend_from_slice(&other.points);
        self.class_count = self.class_count.max(other.class_count);
    }
}
