//! `.vol3` volumes (raw little-endian samples plus a JSON sidecar) and JSON
//! scribble files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelGrid, ScribbleSet, Volume3};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_with_sidecar(path: &Path, bytes: &[u8], sidecar: &Sidecar) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string(sidecar)?)?;
    Ok(())
}

fn read_sidecar(path: &Path, dtype: &str) -> Result<Sidecar> {
    let sc_path = sidecar_path(path);
    let text = fs::read_to_string(&sc_path)?;
    let sc: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::format(&sc_path, e.to_string()))?;
    if sc.dtype != dtype {
        return Err(Error::format(
            &sc_path,
            format!("dtype `{}`, expected `{dtype}`", sc.dtype),
        ));
    }
    Ok(sc)
}

pub fn save_volume(path: &Path, v: &Volume3) -> Result<()> {
    let bytes: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_with_sidecar(
        path,
        &bytes,
        &Sidecar {
            shape: v.shape(),
            spacing: v.spacing(),
            dtype: "f32".into(),
        },
    )
}

pub fn load_volume(path: &Path) -> Result<Volume3> {
    let sc = read_sidecar(path, "f32")?;
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "byte length not a multiple of 4"));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume3::new(sc.shape, sc.spacing, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_labels(path: &Path, g: &LabelGrid) -> Result<()> {
    write_with_sidecar(
        path,
        g.labels(),
        &Sidecar {
            shape: g.shape(),
            spacing: g.spacing(),
            dtype: "u8".into(),
        },
    )
}

pub fn load_labels(path: &Path) -> Result<LabelGrid> {
    let sc = read_sidecar(path, "u8")?;
    let bytes = fs::read(path)?;
    LabelGrid::new(sc.shape, sc.spacing, bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct ScribbleFile {
    class_count: u8,
    points: Vec<[usize; 4]>,
}

pub fn save_scribbles(path: &Path, s: &ScribbleSet) -> Result<()> {
    let file = ScribbleFile {
        class_count: s.class_count,
        points: s
            .points
            .iter()
            .map(|p| [p.voxel[0], p.voxel[1], p.voxel[2], p.label as usize])
            .collect(),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Loads a scribble file, validating every point against `shape`.
pub fn load_scribbles(path: &Path, shape: [usize; 3]) -> Result<ScribbleSet> {
    let text = fs::read_to_string(path)?;
    let file: ScribbleFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let mut s = ScribbleSet::new(file.class_count);
    for p in file.points {
        if p[3] > u8::MAX as usize {
            return Err(Error::format(path, format!("label {} out of range", p[3])));
        }
        s.push([p[0], p[1], p[2]], p[3] as u8);
    }
    s.validate(shape).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(s)
}
