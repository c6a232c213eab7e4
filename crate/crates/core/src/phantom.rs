//! Procedural torso-like phantoms.
//!
//! Every subject is the same template anatomy (a body ellipsoid, a spine
//! column, two bony landmarks and up to four organ ellipsoids) sampled
//! through a smooth per-subject displacement field, plus Gaussian noise.
//! Labels come from the same warp, so ground truth is exact.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelGrid, Volume3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub organ_count: usize,
    /// Intensity of each organ relative to surrounding soft tissue.
    pub organ_offsets: Vec<f32>,
    pub tissue_intensity: f32,
    pub noise_sigma: f32,
    /// Peak displacement per axis, mm.
    pub deform_amplitude: f64,
    /// Displacement wavelength as a multiple of the volume diagonal.
    pub deform_smoothness: f64,
    /// Accepted per-organ foreground fraction `[min, max]`.
    pub organ_fraction_range: [f64; 2],
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [24, 48, 48],
            spacing: [2.0, 1.0, 1.0],
            organ_count: 2,
            organ_offsets: vec![0.25, 0.12, -0.15, 0.2],
            tissue_intensity: 0.4,
            noise_sigma: 0.03,
            deform_amplitude: 2.5,
            deform_smoothness: 1.0,
            organ_fraction_range: [0.002, 0.15],
            seed: 7,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.organ_count == 0 {
            return Err(Error::Config("organ_count must be at least 1".into()));
        }
        if self.organ_count > ORGANS.len() {
            return Err(Error::Phantom(format!(
                "template holds {} organs, {} requested",
                ORGANS.len(),
                self.organ_count
            )));
        }
        if self.organ_offsets.len() < self.organ_count {
            return Err(Error::Config("one intensity offset per organ required".into()));
        }
        if !(self.deform_amplitude >= 0.0) || !(self.deform_smoothness > 0.0) {
            return Err(Error::Config("deformation amplitude must be >= 0 and smoothness > 0".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) || self.shape.iter().any(|&d| d == 0) {
            return Err(Error::Config("shape and spacing must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.shape[a] as f64 * self.spacing[a])
    }
}

/// Ellipsoid in normalized template coordinates (fractions of the extent).
#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, q: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((q[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

const BODY: Ellipsoid = Ellipsoid {
    center: [0.5, 0.5, 0.5],
    radii: [0.62, 0.45, 0.47],
};

const ORGANS: [Ellipsoid; 4] = [
    Ellipsoid {
        center: [0.46, 0.42, 0.34],
        radii: [0.24, 0.17, 0.15],
    },
    Ellipsoid {
        center: [0.56, 0.50, 0.70],
        radii: [0.20, 0.11, 0.10],
    },
    Ellipsoid {
        center: [0.24, 0.66, 0.56],
        radii: [0.12, 0.09, 0.09],
    },
    Ellipsoid {
        center: [0.78, 0.30, 0.60],
        radii: [0.11, 0.08, 0.09],
    },
];

const LANDMARKS: [Ellipsoid; 2] = [
    Ellipsoid {
        center: [0.18, 0.28, 0.72],
        radii: [0.07, 0.06, 0.06],
    },
    Ellipsoid {
        center: [0.82, 0.62, 0.22],
        radii: [0.07, 0.06, 0.06],
    },
];

/// Spine: a column along z at this (x, y) with this radius.
const SPINE: ([f64; 2], f64) = ([0.82, 0.5], 0.07);

const AIR: f32 = 0.0;
const BONE: f32 = 1.0;

/// Region of a template point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Air,
    Tissue,
    Bone,
    Organ(u8),
}

fn classify(q: [f64; 3], organ_count: usize) -> Region {
    if !BODY.contains(q) {
        return Region::Air;
    }
    for (i, o) in ORGANS.iter().take(organ_count).enumerate() {
        if o.contains(q) {
            return Region::Organ(i as u8 + 1);
        }
    }
    let (axis, r) = SPINE;
    if ((q[1] - axis[0]).powi(2) + (q[2] - axis[1]).powi(2)).sqrt() <= r
        || LANDMARKS.iter().any(|l| l.contains(q))
    {
        return Region::Bone;
    }
    Region::Tissue
}

/// Smooth displacement field (mm): a few random plane waves per axis plus a
/// constant shift, bounded by the configured amplitude.
struct Deformation {
    shift: [f64; 3],
    // (wave vector in 1/mm, phase, weight) per axis
    modes: [Vec<([f64; 3], f64, f64)>; 3],
    amplitude: f64,
}

impl Deformation {
    const MODES: usize = 3;

    fn sample(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let ext = cfg.extent_mm();
        let diag = ext.iter().map(|e| e * e).sum::<f64>().sqrt();
        let wavelength = cfg.deform_smoothness * diag;
        let amp = cfg.deform_amplitude;
        let shift = std::array::from_fn(|_| rng.gen_range(-0.5..=0.5) * amp);
        let modes = std::array::from_fn(|_| {
            let mut m = Vec::with_capacity(Self::MODES);
            let mut total = 0.0;
            for _ in 0..Self::MODES {
                let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-9);
                let k = dir.map(|d| d / norm * 2.0 * PI / wavelength);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let w: f64 = rng.gen_range(0.2..1.0);
                total += w;
                m.push((k, phase, w));
            }
            m.iter_mut().for_each(|e| e.2 /= total);
            m
        });
        Self {
            shift,
            modes,
            amplitude: amp,
        }
    }

    fn at(&self, x: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| {
            let wave: f64 = self.modes[a]
                .iter()
                .map(|(k, ph, w)| w * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).sin())
                .sum();
            self.shift[a] + self.amplitude * wave
        })
    }
}

fn subject_rng(seed: u64, subject_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ subject_id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Checks that the template organs fit the grid: each organ spans at least
/// two voxels per radius, organs stay inside the volume after the largest
/// displacement, and no two organs overlap.
fn check_feasible(cfg: &PhantomConfig) -> Result<()> {
    let ext = cfg.extent_mm();
    let max_disp = 1.5 * cfg.deform_amplitude;
    for (i, o) in ORGANS.iter().take(cfg.organ_count).enumerate() {
        for a in 0..3 {
            let r_vox = o.radii[a] * cfg.shape[a] as f64;
            if r_vox < 2.0 {
                return Err(Error::Phantom(format!(
                    "organ {} radius {:.1} voxels along axis {a}; shape {:?} too small",
                    i + 1,
                    r_vox,
                    cfg.shape
                )));
            }
            let lo = (o.center[a] - o.radii[a]) * ext[a] - max_disp;
            let hi = (o.center[a] + o.radii[a]) * ext[a] + max_disp;
            if lo < 0.0 || hi > ext[a] {
                return Err(Error::Phantom(format!(
                    "organ {} leaves the volume under {max_disp:.1} mm displacement",
                    i + 1
                )));
            }
        }
        for (j, other) in ORGANS.iter().take(i).enumerate() {
            // separation along the line of centres, in mm
            let d: Vec<f64> = (0..3).map(|a| (o.center[a] - other.center[a]) * ext[a]).collect();
            let dist = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let reach = |e: &Ellipsoid| {
                let dir: Vec<f64> = d.iter().map(|v| v / dist).collect();
                1.0 / (0..3)
                    .map(|a| (dir[a] / (e.radii[a] * ext[a])).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            if dist <= reach(o) + reach(other) {
                return Err(Error::Phantom(format!("organs {} and {} overlap", j + 1, i + 1)));
            }
        }
    }
    Ok(())
}

/// Phantom plus the per-voxel template region, for intensity bookkeeping.
#[derive(Clone, Debug)]
pub struct PhantomSubject {
    pub volume: Volume3,
    pub labels: LabelGrid,
    pub regions: Vec<Region>,
}

pub fn generate_phantom(cfg: &PhantomConfig, subject_id: u64) -> Result<(Volume3, LabelGrid)> {
    let s = generate_phantom_subject(cfg, subject_id)?;
    Ok((s.volume, s.labels))
}

pub fn generate_phantom_subject(cfg: &PhantomConfig, subject_id: u64) -> Result<PhantomSubject> {
    cfg.validate()?;
    check_feasible(cfg)?;
    let mut rng = subject_rng(cfg.seed, subject_id);
    let deform = Deformation::sample(cfg, &mut rng);
    let noise = Normal::new(0.0f64, cfg.noise_sigma as f64)
        .map_err(|e| Error::Config(e.to_string()))?;
    let ext = cfg.extent_mm();
    let [d, h, w] = cfg.shape;
    let n = d * h * w;
    let mut data = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    for z in 0..d {
        for x in 0..h {
            for y in 0..w {
                // voxel centre in mm
                let p = [
                    (z as f64 + 0.5) * cfg.spacing[0],
                    (x as f64 + 0.5) * cfg.spacing[1],
                    (y as f64 + 0.5) * cfg.spacing[2],
                ];
                let u = deform.at(p);
                let q: [f64; 3] = std::array::from_fn(|a| (p[a] + u[a]) / ext[a]);
                let region = classify(q, cfg.organ_count);
                let (base, label) = match region {
                    Region::Air => (AIR, 0),
                    Region::Tissue => (cfg.tissue_intensity, 0),
                    Region::Bone => (BONE, 0),
                    Region::Organ(k) => (cfg.tissue_intensity + cfg.organ_offsets[k as usize - 1], k),
                };
                let eps = if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng) as f32
                } else {
                    0.0
                };
                data.push(base + eps);
                labels.push(label);
                regions.push(region);
            }
        }
    }
    Ok(PhantomSubject {
        volume: Volume3::new(cfg.shape, cfg.spacing, data)?,
        labels: LabelGrid::new(cfg.shape, cfg.spacing, labels)?,
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_subject_is_bit_identical() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(&cfg, 3).unwrap();
        let b = generate_phantom(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&cfg, 4).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn no_deformation_no_noise_gives_identical_subjects() {
        let cfg = PhantomConfig {
            deform_amplitude: 0.0,
            noise_sigma: 0.0,
            ..PhantomConfig::default()
        };
        assert_eq!(generate_phantom(&cfg, 0).unwrap(), generate_phantom(&cfg, 9).unwrap());
    }

    #[test]
    fn organ_fractions_within_declared_bounds() {
        let cfg = PhantomConfig {
            organ_count: 4,
            ..PhantomConfig::default()
        };
        for subject in 0..3 {
            let (_, labels) = generate_phantom(&cfg, subject).unwrap();
            let n = labels.labels().len() as f64;
            for k in 1..=cfg.organ_count as u8 {
                let frac = labels.count(k) as f64 / n;
                assert!(
                    frac >= cfg.organ_fraction_range[0] && frac <= cfg.organ_fraction_range[1],
                    "subject {subject} organ {k} fraction {frac}"
                );
            }
        }
    }

    #[test]
    fn organ_means_follow_configured_offsets() {
        let cfg = PhantomConfig {
            organ_count: 4,
            ..PhantomConfig::default()
        };
        let s = generate_phantom_subject(&cfg, 1).unwrap();
        let mean_of = |pred: &dyn Fn(Region) -> bool| {
            let (sum, cnt) = s
                .regions
                .iter()
                .zip(s.volume.data())
                .filter(|(r, _)| pred(**r))
                .fold((0.0f64, 0usize), |(a, c), (_, &v)| (a + v as f64, c + 1));
            (sum / cnt as f64, cnt)
        };
        let (bg, nbg) = mean_of(&|r| r == Region::Tissue);
        for k in 1..=4u8 {
            let (m, cnt) = mean_of(&|r| r == Region::Organ(k));
            // mean of cnt Gaussian samples: 6 standard errors of both means
            let tol = 6.0 * cfg.noise_sigma as f64 * (1.0 / cnt as f64 + 1.0 / nbg as f64).sqrt();
            let diff = m - bg;
            assert!(
                (diff - cfg.organ_offsets[k as usize - 1] as f64).abs() < tol + 1e-6,
                "organ {k}: diff {diff}"
            );
        }
    }

    #[test]
    fn infeasible_shapes_are_rejected() {
        let tiny = PhantomConfig {
            shape: [6, 8, 8],
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_phantom(&tiny, 0), Err(Error::Phantom(_))));
        let wild = PhantomConfig {
            deform_amplitude: 40.0,
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_phantom(&wild, 0), Err(Error::Phantom(_))));
        let too_many = PhantomConfig {
            organ_count: 5,
            organ_offsets: vec![0.1; 5],
            ..PhantomConfig::default()
        };
        assert!(generate_phantom(&too_many, 0).is_err());
    }
}
