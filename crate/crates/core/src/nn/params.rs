use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights and biases of every parametric layer, in layer order
/// (weight then bias).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
    pub seed: u64,
}

impl ModelParams {
    /// He-uniform weights, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for node in &spec.nodes {
            if let Some((ws, bs)) = node.layer.param_shapes() {
                let bound = (6.0 / node.layer.fan_in() as f64).sqrt();
                let n: usize = ws.iter().product();
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                tensors.push(Tensor::new(ws, w).expect("shape from spec"));
                tensors.push(Tensor::zeros(&bs));
            }
        }
        Self { tensors, seed }
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let mut expected = Vec::new();
        for node in &spec.nodes {
            if let Some((w, b)) = node.layer.param_shapes() {
                expected.push(w);
                expected.push(b);
            }
        }
        if expected.len() != self.tensors.len()
            || expected
                .iter()
                .zip(&self.tensors)
                .any(|(e, t)| e.as_slice() != t.shape())
        {
            return Err(Error::Shape("parameter shapes do not match network".into()));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flat parameter addressing used by the gradient checker.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in &self.tensors {
            if idx < t.len() {
                return t.data()[idx];
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn set_flat(&mut self, mut idx: usize, v: f64) {
        for t in &mut self.tensors {
            if idx < t.len() {
                t.data_mut()[idx] = v;
                return;
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range")
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            params: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            input: Tensor::zeros(&[1]),
        }
    }

    /// Adds parameter gradients of `other` (input gradients are not summed).
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.params.iter_mut().for_each(|t| t.scale(k));
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in &self.params {
            if idx < t.len() {
                return t.data()[idx];
            }
            idx -= t.len();
        }
        panic!("flat gradient index out of range")
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: NetworkSpec,
    seed: u64,
    shapes: Vec<Vec<usize>>,
    files: Vec<String>,
}

/// Writes `manifest.json` plus one raw little-endian f64 blob per tensor.
pub fn save_params(dir: &Path, spec: &NetworkSpec, params: &ModelParams) -> Result<()> {
    params.check_against(spec)?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (i, t) in params.tensors.iter().enumerate() {
        let name = format!("param_{i:03}.f64");
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&name), bytes)?;
        files.push(name);
    }
    let manifest = Manifest {
        spec: spec.clone(),
        seed: params.seed,
        shapes: params.tensors.iter().map(|t| t.shape().to_vec()).collect(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_params(dir: &Path) -> Result<(NetworkSpec, ModelParams)> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.shapes.len() != manifest.files.len() {
        return Err(Error::format(&mpath, "shapes and files differ in length"));
    }
    let mut tensors = Vec::new();
    for (shape, file) in manifest.shapes.iter().zip(&manifest.files) {
        let path = dir.join(file);
        let bytes = fs::read(&path)?;
        let n: usize = shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(Error::format(&path, format!("expected {} bytes, got {}", n * 8, bytes.len())));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data).map_err(|e| Error::format(&path, e.to_string()))?);
    }
    let params = ModelParams {
        tensors,
        seed: manifest.seed,
    };
    params
        .check_against(&manifest.spec)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    Ok((manifest.spec, params))
}
