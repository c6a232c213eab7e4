//! A small static-graph network engine: a topologically ordered list of
//! layers, forward evaluation that keeps every intermediate value, and a
//! reverse pass over the same list.
//!
//! Every tensor flowing through the graph is a single sample. Batches are
//! handled by the callers, which sum per-sample gradients in index order.

mod adam;
mod gradcheck;
pub mod kernels;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_terms, FdReport, DEFAULT_STEPS};
pub use params::{load_params, save_params, Gradients, ModelParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Layer {
    Conv3d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    /// 2×2×2 average pooling.
    Downsample2,
    /// 2×2×2 nearest-neighbour upsampling.
    Upsample2,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// `r * tanh(x)`
    TanhScale {
        r: f64,
    },
    GlobalAvgPool,
    /// Channel concatenation of two `(C, D, H, W)` inputs.
    Concat,
    Sigmoid,
}

impl Layer {
    /// Shapes of the weight and bias tensors, if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Layer::Conv3d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some((vec![out_ch, in_ch, kernel, kernel, kernel], vec![out_ch])),
            Layer::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv3d { in_ch, kernel, .. } => in_ch * kernel.pow(3),
            Layer::Dense { in_features, .. } => in_features,
            _ => 0,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Layer::Concat => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
    /// Value slots: `0` is the network input, `i + 1` the output of node `i`.
    pub inputs: Vec<usize>,
}

/// Layer graph plus the names of exposed intermediate maps (`taps`) and
/// outputs. `input_shape` entries equal to 0 accept any extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub nodes: Vec<Node>,
    pub taps: Vec<String>,
    pub outputs: Vec<String>,
}

impl NetworkSpec {
    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name).map(|i| i + 1)
    }

    /// Checks graph wiring and, when the input shape is fully specified,
    /// propagates shapes through every layer.
    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !names.insert(node.name.as_str()) {
                return Err(Error::layer(&node.name, "duplicate layer name"));
            }
            if node.inputs.len() != node.layer.arity() {
                return Err(Error::layer(&node.name, "wrong number of inputs"));
            }
            if node.inputs.iter().any(|&s| s > i) {
                return Err(Error::layer(&node.name, "input refers to a later layer"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for t in self.taps.iter().chain(&self.outputs) {
            if self.slot_of(t).is_none() {
                return Err(Error::Config(format!("unknown tap/output `{t}`")));
            }
        }
        for t in &self.taps {
            if !seen.insert(t) {
                return Err(Error::Config(format!("duplicate tap `{t}`")));
            }
        }
        if self.input_shape.iter().all(|&d| d > 0) {
            self.infer_shapes(&self.input_shape)?;
        }
        Ok(())
    }

    /// Shapes of every value slot for a concrete input shape.
    pub fn infer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.check_input(input)?;
        let mut shapes = vec![input.to_vec()];
        for node in &self.nodes {
            let ins: Vec<&[usize]> = node.inputs.iter().map(|&s| shapes[s].as_slice()).collect();
            let out = output_shape(node, &ins)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == self.input_shape.len()
            && shape
                .iter()
                .zip(&self.input_shape)
                .all(|(&a, &b)| b == 0 || a == b);
        if ok {
            Ok(())
        } else {
            Err(Error::layer(
                "input",
                format!("expected {:?}, got {shape:?}", self.input_shape),
            ))
        }
    }

    /// Index into [`ModelParams::tensors`] of each node's weight (bias follows).
    pub fn param_layout(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.nodes
            .iter()
            .map(|n| {
                n.layer.param_shapes().map(|_| {
                    let at = next;
                    next += 2;
                    at
                })
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.layer.param_shapes())
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }
}

fn spatial(node: &Node, shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 4 {
        return Err(Error::layer(
            &node.name,
            format!("expected (C, D, H, W) input, got {shape:?}"),
        ));
    }
    Ok([shape[1], shape[2], shape[3]])
}

fn output_shape(node: &Node, ins: &[&[usize]]) -> Result<Vec<usize>> {
    let x = ins[0];
    match node.layer {
        Layer::Conv3d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => {
            let dims = spatial(node, x)?;
            if x[0] != in_ch {
                return Err(Error::layer(
                    &node.name,
                    format!("expected {in_ch} input channels, got {}", x[0]),
                ));
            }
            if stride == 0 || kernel == 0 {
                return Err(Error::layer(&node.name, "kernel and stride must be positive"));
            }
            let mut out = vec![out_ch];
            for d in dims {
                out.push(
                    ConvGeom::out_len(d, kernel, stride, pad)
                        .ok_or_else(|| Error::layer(&node.name, "input smaller than kernel"))?,
                );
            }
            Ok(out)
        }
        Layer::LeakyRelu { .. } | Layer::TanhScale { .. } | Layer::Sigmoid => Ok(x.to_vec()),
        Layer::Downsample2 => {
            let dims = spatial(node, x)?;
            if dims.iter().any(|d| d % 2 != 0) {
                return Err(Error::layer(
                    &node.name,
                    format!("downsample needs even spatial dims, got {dims:?}"),
                ));
            }
            Ok(vec![x[0], dims[0] / 2, dims[1] / 2, dims[2] / 2])
        }
        Layer::Upsample2 => {
            let dims = spatial(node, x)?;
            Ok(vec![x[0], dims[0] * 2, dims[1] * 2, dims[2] * 2])
        }
        Layer::Dense {
            in_features,
            out_features,
        } => {
            let n: usize = x.iter().product();
            if n != in_features {
                return Err(Error::layer(
                    &node.name,
                    format!("expected {in_features} features, got {n}"),
                ));
            }
            Ok(vec![out_features])
        }
        Layer::GlobalAvgPool => {
            spatial(node, x)?;
            Ok(vec![x[0]])
        }
        Layer::Concat => {
            let a = spatial(node, x)?;
            let b = spatial(node, ins[1])?;
            if a != b {
                return Err(Error::layer(
                    &node.name,
                    format!("cannot concat spatial {a:?} with {b:?}"),
                ));
            }
            Ok(vec![x[0] + ins[1][0], a[0], a[1], a[2]])
        }
    }
}

/// Every intermediate value of one forward evaluation; slot layout as in [`Node::inputs`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    values: Vec<Tensor>,
}

impl ForwardPass {
    pub fn input(&self) -> &Tensor {
        &self.values[0]
    }

    pub fn get(&self, spec: &NetworkSpec, name: &str) -> Option<&Tensor> {
        spec.slot_of(name).map(|s| &self.values[s])
    }

    pub fn output<'a>(&'a self, spec: &NetworkSpec, name: &str) -> Result<&'a Tensor> {
        self.get(spec, name)
            .ok_or_else(|| Error::Config(format!("no layer named `{name}`")))
    }

    /// Named outputs in `spec.outputs` order.
    pub fn outputs<'a>(&'a self, spec: &'a NetworkSpec) -> Vec<(&'a str, &'a Tensor)> {
        spec.outputs
            .iter()
            .filter_map(|n| self.get(spec, n).map(|t| (n.as_str(), t)))
            .collect()
    }

    pub fn taps<'a>(&'a self, spec: &'a NetworkSpec) -> Vec<(&'a str, &'a Tensor)> {
        spec.taps
            .iter()
            .filter_map(|n| self.get(spec, n).map(|t| (n.as_str(), t)))
            .collect()
    }
}

fn param_pair<'a>(params: &'a ModelParams, at: Option<usize>, node: &Node) -> Result<(&'a Tensor, &'a Tensor)> {
    let at = at.ok_or_else(|| Error::layer(&node.name, "missing parameters"))?;
    match (params.tensors.get(at), params.tensors.get(at + 1)) {
        (Some(w), Some(b)) => Ok((w, b)),
        _ => Err(Error::layer(&node.name, "parameter set too short")),
    }
}

pub fn forward(spec: &NetworkSpec, params: &ModelParams, input: &Tensor) -> Result<ForwardPass> {
    let shapes = spec.infer_shapes(input.shape())?;
    let layout = spec.param_layout();
    let mut values: Vec<Tensor> = Vec::with_capacity(spec.nodes.len() + 1);
    values.push(input.clone());

    for (i, node) in spec.nodes.iter().enumerate() {
        let x = &values[node.inputs[0]];
        let out_shape = shapes[i + 1].clone();
        let data = match node.layer {
            Layer::Conv3d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let (w, b) = param_pair(params, layout[i], node)?;
                if w.shape() != [out_ch, in_ch, kernel, kernel, kernel] {
                    return Err(Error::layer(&node.name, "weight shape does not match spec"));
                }
                let g = ConvGeom {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                    in_dims: [x.shape()[1], x.shape()[2], x.shape()[3]],
                    out_dims: [out_shape[1], out_shape[2], out_shape[3]],
                };
                kernels::conv3d_forward(&g, x.data(), w.data(), b.data())
            }
            Layer::LeakyRelu { slope } => x
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect(),
            Layer::Downsample2 => {
                let s = x.shape();
                kernels::downsample2(x.data(), s[0], [s[1], s[2], s[3]])
            }
            Layer::Upsample2 => {
                let s = x.shape();
                kernels::upsample2(x.data(), s[0], [s[1], s[2], s[3]])
            }
            Layer::Dense {
                in_features,
                out_features,
            } => {
                let (w, b) = param_pair(params, layout[i], node)?;
                if w.shape() != [out_features, in_features] {
                    return Err(Error::layer(&node.name, "weight shape does not match spec"));
                }
                let xs = x.data();
                (0..out_features)
                    .map(|o| {
                        let row = &w.data()[o * in_features..(o + 1) * in_features];
                        b.data()[o] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect()
            }
            Layer::TanhScale { r } => x.data().iter().map(|&v| r * v.tanh()).collect(),
            Layer::GlobalAvgPool => {
                let c = x.shape()[0];
                let n = x.len() / c;
                x.data().chunks(n).map(|ch| ch.iter().sum::<f64>() / n as f64).collect()
            }
            Layer::Concat => {
                let y = &values[node.inputs[1]];
                let mut v = x.data().to_vec();
                v.extend_from_slice(y.data());
                v
            }
            Layer::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        values.push(Tensor::new(out_shape, data)?);
    }
    Ok(ForwardPass { values })
}

/// Neumaier-compensated sum: error independent of the number of terms.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Reverse pass. `output_grads` seeds dL/d(value) for any named layer
/// (outputs or taps); unnamed branches receive zero gradient.
pub fn backward(
    spec: &NetworkSpec,
    params: &ModelParams,
    pass: &ForwardPass,
    output_grads: &[(&str, &Tensor)],
) -> Result<Gradients> {
    let layout = spec.param_layout();
    let mut slot_grads: Vec<Option<Tensor>> = vec![None; pass.values.len()];
    for (name, g) in output_grads {
        let slot = spec
            .slot_of(name)
            .ok_or_else(|| Error::Config(format!("no layer named `{name}`")))?;
        if g.shape() != pass.values[slot].shape() {
            return Err(Error::layer(
                name,
                format!(
                    "gradient shape {:?} does not match value {:?}",
                    g.shape(),
                    pass.values[slot].shape()
                ),
            ));
        }
        accumulate(&mut slot_grads[slot], (*g).clone())?;
    }

    let mut grads = Gradients::zeros_like(params);

    for (i, node) in spec.nodes.iter().enumerate().rev() {
        let Some(go) = slot_grads[i + 1].take() else {
            continue;
        };
        let x = &pass.values[node.inputs[0]];
        let y = &pass.values[i + 1];
        match node.layer {
            Layer::Conv3d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let at = layout[i].expect("conv has params");
                let (w, _) = param_pair(params, Some(at), node)?;
                let g = ConvGeom {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                    in_dims: [x.shape()[1], x.shape()[2], x.shape()[3]],
                    out_dims: [y.shape()[1], y.shape()[2], y.shape()[3]],
                };
                let (gin, gw, gb) = kernels::conv3d_backward(&g, x.data(), w.data(), go.data());
                add_into(&mut grads.params[at], &gw);
                add_into(&mut grads.params[at + 1], &gb);
                let gin = Tensor::new(x.shape().to_vec(), gin)?;
                accumulate(&mut slot_grads[node.inputs[0]], gin)?;
            }
            Layer::LeakyRelu { slope } => {
                let gin: Vec<f64> = go
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { slope * g })
                    .collect();
                accumulate(&mut slot_grads[node.inputs[0]], Tensor::new(x.shape().to_vec(), gin)?)?;
            }
            Layer::Downsample2 => {
                let s = x.shape();
                let gin = kernels::downsample2_backward(go.data(), s[0], [s[1], s[2], s[3]]);
                accumulate(&mut slot_grads[node.inputs[0]], Tensor::new(s.to_vec(), gin)?)?;
            }
            Layer::Upsample2 => {
                let s = x.shape();
                let gin = kernels::upsample2_backward(go.data(), s[0], [s[1], s[2], s[3]]);
                accumulate(&mut slot_grads[node.inputs[0]], Tensor::new(s.to_vec(), gin)?)?;
            }
            Layer::Dense {
                in_features,
                out_features,
            } => {
                let at = layout[i].expect("dense has params");
                let (w, _) = param_pair(params, Some(at), node)?;
                let xs = x.data();
                let mut gin = vec![0.0; in_features];
                {
                    let gw = grads.params[at].data_mut();
                    for o in 0..out_features {
                        let g = go.data()[o];
                        let row = &w.data()[o * in_features..(o + 1) * in_features];
                        for j in 0..in_features {
                            gw[o * in_features + j] += g * xs[j];
                            gin[j] += g * row[j];
                        }
                    }
                }
                add_into(&mut grads.params[at + 1], go.data());
                accumulate(&mut slot_grads[node.inputs[0]], Tensor::new(x.shape().to_vec(), gin)?)?;
            }
            Layer::TanhScale { r } => {
                let gin: Vec<f64> = go
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| {
                        let t = v.tanh();
                        g * r * (1.0 - t * t)
                    })
                    .collect();
                accumulate(&mut slot_grads[node.inputs[0]], Tensor::new(x.shape().to_vec(), gin)?)?;
            }
            Layer::GlobalAvgPool => {
                let c = x.shape()[0];
                let n = x.len() / c;
                let mut gin = Vec::with_capacity(x.len());
                for &g in go.data() {
                    gin.extend(std::iter::repeat(g / n as f64).take(n));
                }
                accumulate(&mut slot_grads[node.inputs[0]], Tensor::new(x.shape().to_vec(), gin)?)?;
            }
            Layer::Concat => {
                let split = x.len();
                let other = &pass.values[node.inputs[1]];
                let (ga, gb) = go.data().split_at(split);
                accumulate(&mut slot_grads[node.inputs[0]], Tensor::new(x.shape().to_vec(), ga.to_vec())?)?;
                accumulate(
                    &mut slot_grads[node.inputs[1]],
                    Tensor::new(other.shape().to_vec(), gb.to_vec())?,
                )?;
            }
            Layer::Sigmoid => {
                let gin: Vec<f64> = go
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &p)| g * p * (1.0 - p))
                    .collect();
                accumulate(&mut slot_grads[node.inputs[0]], Tensor::new(x.shape().to_vec(), gin)?)?;
            }
        }
    }

    grads.input = slot_grads[0]
        .take()
        .unwrap_or_else(|| Tensor::zeros(pass.values[0].shape()));
    Ok(grads)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn add_into(t: &mut Tensor, g: &[f64]) {
    for (a, b) in t.data_mut().iter_mut().zip(g) {
        *a += b;
    }
}

/// Incremental construction of a [`NetworkSpec`]; each method returns the
/// value slot of the layer it adds.
#[derive(Debug)]
pub struct NetworkBuilder {
    spec: NetworkSpec,
}

impl NetworkBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self {
            spec: NetworkSpec {
                input_shape,
                nodes: Vec::new(),
                taps: Vec::new(),
                outputs: Vec::new(),
            },
        }
    }

    pub const INPUT: usize = 0;

    pub fn add(&mut self, name: impl Into<String>, layer: Layer, inputs: &[usize]) -> usize {
        self.spec.nodes.push(Node {
            name: name.into(),
            layer,
            inputs: inputs.to_vec(),
        });
        self.spec.nodes.len()
    }

    /// `kernel³` convolution with "same" padding and stride 1.
    pub fn conv(&mut self, name: impl Into<String>, from: usize, in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        self.add(
            name,
            Layer::Conv3d {
                in_ch,
                out_ch,
                kernel,
                stride: 1,
                pad: kernel / 2,
            },
            &[from],
        )
    }

    pub fn tap(&mut self, name: &str) -> &mut Self {
        self.spec.taps.push(name.to_string());
        self
    }

    pub fn output(&mut self, name: &str) -> &mut Self {
        self.spec.outputs.push(name.to_string());
        self
    }

    pub fn build(self) -> Result<NetworkSpec> {
        self.spec.validate()?;
        Ok(self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_net(n: usize) -> NetworkSpec {
        let mut b = NetworkBuilder::new(vec![n]);
        b.add(
            "fc",
            Layer::Dense {
                in_features: n,
                out_features: n,
            },
            &[NetworkBuilder::INPUT],
        );
        b.output("fc");
        b.build().unwrap()
    }

    #[test]
    fn compensated_sum_keeps_small_terms() {
        assert_eq!(compensated_sum([1e16, 1.0, -1e16]), 1.0);
        assert_eq!(compensated_sum(std::iter::repeat(0.1).take(10)), 1.0);
        assert_eq!(compensated_sum([]), 0.0);
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let spec = dense_net(4);
        let mut params = ModelParams::init(&spec, 1);
        let w = params.tensors[0].data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        params.tensors[1].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::from_vec(vec![1.5, -2.0, 0.25, 9.0]);
        let pass = forward(&spec, &params, &x).unwrap();
        assert_eq!(pass.output(&spec, "fc").unwrap().data(), x.data());
    }

    #[test]
    fn dense_weight_grad_of_sum_is_broadcast_input() {
        let spec = dense_net(3);
        let params = ModelParams::init(&spec, 7);
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let pass = forward(&spec, &params, &x).unwrap();
        let ones = Tensor::full(&[3], 1.0);
        let g = backward(&spec, &params, &pass, &[("fc", &ones)]).unwrap();
        for o in 0..3 {
            assert_eq!(&g.params[0].data()[o * 3..o * 3 + 3], x.data());
        }
        assert_eq!(g.params[1].data(), ones.data());
    }

    #[test]
    fn zero_kernel_conv_gives_zero_map() {
        let mut b = NetworkBuilder::new(vec![2, 4, 4, 4]);
        b.conv("c", NetworkBuilder::INPUT, 2, 3, 3);
        b.output("c");
        let spec = b.build().unwrap();
        let mut params = ModelParams::init(&spec, 3);
        for t in &mut params.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::full(&[2, 4, 4, 4], 1.7);
        let pass = forward(&spec, &params, &x).unwrap();
        let y = pass.output(&spec, "c").unwrap();
        assert_eq!(y.shape(), &[3, 4, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_output_grads_give_zero_gradients() {
        let mut b = NetworkBuilder::new(vec![1, 4, 4, 4]);
        let c = b.conv("c", NetworkBuilder::INPUT, 1, 2, 3);
        b.add("act", Layer::LeakyRelu { slope: 0.1 }, &[c]);
        b.output("act");
        let spec = b.build().unwrap();
        let params = ModelParams::init(&spec, 3);
        let x = Tensor::full(&[1, 4, 4, 4], 0.3);
        let pass = forward(&spec, &params, &x).unwrap();
        let zero = Tensor::zeros(&[2, 4, 4, 4]);
        let g = backward(&spec, &params, &pass, &[("act", &zero)]).unwrap();
        assert!(g.params.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let mut b = NetworkBuilder::new(vec![1, 0, 0, 0]);
        let d = b.add("down", Layer::Downsample2, &[NetworkBuilder::INPUT]);
        b.conv("conv", d, 1, 1, 3);
        b.output("conv");
        let spec = b.build().unwrap();
        let params = ModelParams::init(&spec, 0);
        let err = forward(&spec, &params, &Tensor::zeros(&[1, 3, 4, 4])).unwrap_err();
        assert!(err.to_string().contains("down"), "{err}");
        let err = forward(&spec, &params, &Tensor::zeros(&[2, 4, 4, 4])).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");
    }

    #[test]
    fn backward_rejects_wrong_gradient_shape() {
        let spec = dense_net(3);
        let params = ModelParams::init(&spec, 7);
        let pass = forward(&spec, &params, &Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let bad = Tensor::zeros(&[4]);
        assert!(backward(&spec, &params, &pass, &[("fc", &bad)]).is_err());
    }

    #[test]
    fn duplicate_tap_rejected() {
        let mut b = NetworkBuilder::new(vec![3]);
        b.add("t", Layer::TanhScale { r: 1.0 }, &[0]);
        b.tap("t").tap("t");
        assert!(b.build().is_err());
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut b = NetworkBuilder::new(vec![2, 4, 6, 6]);
        b.add(
            "c",
            Layer::Conv3d {
                in_ch: 2,
                out_ch: 3,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            &[0],
        );
        b.output("c");
        let spec = b.build().unwrap();
        let mut params = ModelParams::init(&spec, 11);
        params.tensors[1].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let n = 2 * 4 * 6 * 6;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.31).sin()).collect();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.17).cos()).collect();
        let (a, bb) = (1.7, -0.6);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + bb * q).collect();
        let run = |v: Vec<f64>| {
            let t = Tensor::new(vec![2, 4, 6, 6], v).unwrap();
            forward(&spec, &params, &t).unwrap().output(&spec, "c").unwrap().clone()
        };
        let (fx, fy, fm) = (run(x), run(y), run(mix));
        for i in 0..fm.len() {
            let expect = a * fx.data()[i] + bb * fy.data()[i];
            assert!((fm.data()[i] - expect).abs() < 1e-9);
        }
    }
}
