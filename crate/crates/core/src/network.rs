//! Dense feedforward networks: topology, flat parameter layout, forward
//! evaluation and the empirical risk.
//!
//! Layers are numbered `1..=L` as in the usual notation, layer `0` being the
//! input. Neurons inside a layer are zero-based. The flat parameter vector
//! stores, for each layer in ascending order and each neuron in order, the
//! bias followed by the incoming weight row.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    sizes: Vec<usize>,
}

impl Topology {
    /// Builds a topology from `[H_0 = n, H_1, ..., H_L = m]`.
    pub fn new(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidTopology(format!(
                "need at least an input and an output layer, got {} sizes",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&h| h == 0) {
            return Err(Error::InvalidTopology(format!("layer {pos} has zero neurons")));
        }
        Ok(Self { sizes: layer_sizes.to_vec() })
    }

    /// Number of non-input layers.
    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Neuron count of layer `layer` (0 is the input).
    pub fn width(&self, layer: usize) -> usize {
        self.sizes[layer]
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.depth()]
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Offset of the first parameter of `layer` in the flat vector.
    pub fn layer_offset(&self, layer: usize) -> usize {
        debug_assert!(layer >= 1 && layer <= self.depth());
        self.sizes[..layer].windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Flat index of the bias of neuron `j` in `layer`.
    pub fn bias_index(&self, layer: usize, j: usize) -> usize {
        debug_assert!(j < self.sizes[layer]);
        self.layer_offset(layer) + j * (self.sizes[layer - 1] + 1)
    }

    /// Flat index of the weight from neuron `i` of `layer - 1` into neuron
    /// `j` of `layer`.
    pub fn weight_index(&self, layer: usize, j: usize, i: usize) -> usize {
        debug_assert!(i < self.sizes[layer - 1]);
        self.bias_index(layer, j) + 1 + i
    }

    /// Returns a copy with `extra` neurons appended to `layer`.
    pub fn grown(&self, layer: usize, extra: usize) -> Self {
        let mut sizes = self.sizes.clone();
        sizes[layer] += extra;
        Self { sizes }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.sizes.iter().map(|h| h.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// The flattened parameter vector of a network together with its topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    topology: Topology,
    flat: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(topology: &Topology) -> Self {
        Self { flat: vec![0.0; topology.param_count()], topology: topology.clone() }
    }

    pub fn from_flat(topology: &Topology, flat: Vec<f64>) -> Result<Self> {
        let expected = topology.param_count();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected,
                got: flat.len(),
            });
        }
        Ok(Self { topology: topology.clone(), flat })
    }

    /// Every entry drawn independently from `U(0,1)`.
    pub fn uniform<R: rand::Rng + ?Sized>(topology: &Topology, rng: &mut R) -> Self {
        let flat = (0..topology.param_count()).map(|_| rng.random::<f64>()).collect();
        Self { topology: topology.clone(), flat }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn bias(&self, layer: usize, j: usize) -> f64 {
        self.flat[self.topology.bias_index(layer, j)]
    }

    pub fn weight(&self, layer: usize, j: usize, i: usize) -> f64 {
        self.flat[self.topology.weight_index(layer, j, i)]
    }

    pub fn set_bias(&mut self, layer: usize, j: usize, value: f64) {
        let k = self.topology.bias_index(layer, j);
        self.flat[k] = value;
    }

    pub fn set_weight(&mut self, layer: usize, j: usize, i: usize, value: f64) {
        let k = self.topology.weight_index(layer, j, i);
        self.flat[k] = value;
    }

    /// Incoming weight row of neuron `j` in `layer`.
    pub fn weight_row(&self, layer: usize, j: usize) -> &[f64] {
        let start = self.topology.weight_index(layer, j, 0);
        &self.flat[start..start + self.topology.width(layer - 1)]
    }

    /// Structured view: per layer, per neuron, `(bias, weights)`.
    pub fn to_structured(&self) -> Vec<Vec<(f64, Vec<f64>)>> {
        (1..=self.topology.depth())
            .map(|l| {
                (0..self.topology.width(l))
                    .map(|j| (self.bias(l, j), self.weight_row(l, j).to_vec()))
                    .collect()
            })
            .collect()
    }

    /// Inverse of [`ParamVector::to_structured`].
    pub fn from_structured(topology: &Topology, layers: &[Vec<(f64, Vec<f64>)>]) -> Result<Self> {
        if layers.len() != topology.depth() {
            return Err(Error::DimensionMismatch {
                what: "layer count",
                expected: topology.depth(),
                got: layers.len(),
            });
        }
        let mut flat = Vec::with_capacity(topology.param_count());
        for (l, neurons) in layers.iter().enumerate() {
            if neurons.len() != topology.width(l + 1) {
                return Err(Error::DimensionMismatch {
                    what: "neurons in layer",
                    expected: topology.width(l + 1),
                    got: neurons.len(),
                });
            }
            for (bias, row) in neurons {
                if row.len() != topology.width(l) {
                    return Err(Error::DimensionMismatch {
                        what: "weight row",
                        expected: topology.width(l),
                        got: row.len(),
                    });
                }
                flat.push(*bias);
                flat.extend_from_slice(row);
            }
        }
        Ok(Self { topology: topology.clone(), flat })
    }
}

/// A scalar activation shared by every hidden neuron.
pub trait Activation: Send + Sync {
    fn name(&self) -> &'static str;
    fn value(&self, t: f64) -> f64;
    fn derivative(&self, t: f64) -> f64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Tanh;

impl Activation for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn value(&self, t: f64) -> f64 {
        t.tanh()
    }
    fn derivative(&self, t: f64) -> f64 {
        let y = t.tanh();
        1.0 - y * y
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Sigmoid;

impl Activation for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn value(&self, t: f64) -> f64 {
        1.0 / (1.0 + (-t).exp())
    }
    fn derivative(&self, t: f64) -> f64 {
        let s = self.value(t);
        s * (1.0 - s)
    }
}

/// Identity activation; turns the network into an affine map.
#[derive(Clone, Copy, Debug, Default)]
pub struct Linear;

impl Activation for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn value(&self, t: f64) -> f64 {
        t
    }
    fn derivative(&self, _t: f64) -> f64 {
        1.0
    }
}

/// Per-sample loss `L(y, f) >= 0` with its partials in each model output.
pub trait Loss: Send + Sync {
    fn name(&self) -> &'static str;
    fn value(&self, target: &[f64], output: &[f64]) -> f64;
    /// Writes `dL/df_r` into `out[r]`.
    fn derivative(&self, target: &[f64], output: &[f64], out: &mut [f64]);
}

/// Squared error averaged over the output coordinates.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanSquaredError;

impl Loss for MeanSquaredError {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn value(&self, target: &[f64], output: &[f64]) -> f64 {
        let m = target.len() as f64;
        target.iter().zip(output).map(|(y, f)| (f - y) * (f - y)).sum::<f64>() / m
    }
    fn derivative(&self, target: &[f64], output: &[f64], out: &mut [f64]) {
        let scale = 2.0 / target.len() as f64;
        for ((o, y), f) in out.iter_mut().zip(target).zip(output) {
            *o = scale * (f - y);
        }
    }
}

/// Pre-activations of every non-input layer; `pre_activations[l - 1]` holds
/// layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub pre_activations: Vec<Vec<f64>>,
}

impl ActivationRecord {
    /// Network output; output units are linear.
    pub fn output(&self) -> &[f64] {
        self.pre_activations.last().expect("at least one layer")
    }

    /// Pre-activations of layer `layer` (1-based).
    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.pre_activations[layer - 1]
    }
}

pub fn forward(params: &ParamVector, x: &[f64], act: &dyn Activation) -> Result<ActivationRecord> {
    let t = params.topology();
    if x.len() != t.input_dim() {
        return Err(Error::DimensionMismatch { what: "input", expected: t.input_dim(), got: x.len() });
    }
    Ok(forward_unchecked(params, x, act))
}

pub(crate) fn forward_unchecked(params: &ParamVector, x: &[f64], act: &dyn Activation) -> ActivationRecord {
    let t = params.topology();
    let theta = params.as_slice();
    let mut pre_activations = Vec::with_capacity(t.depth());
    let mut input: Vec<f64> = x.to_vec();
    for l in 1..=t.depth() {
        let fan_in = t.width(l - 1);
        let mut k = t.layer_offset(l);
        let mut a = Vec::with_capacity(t.width(l));
        for _ in 0..t.width(l) {
            let bias = theta[k];
            let row = &theta[k + 1..k + 1 + fan_in];
            a.push(row.iter().zip(&input).map(|(w, z)| w * z).sum::<f64>() + bias);
            k += fan_in + 1;
        }
        if l < t.depth() {
            input = a.iter().map(|&v| act.value(v)).collect();
        }
        pre_activations.push(a);
    }
    ActivationRecord { pre_activations }
}

pub(crate) fn check_dataset(topology: &Topology, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.input_dim() != topology.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "dataset inputs",
            expected: topology.input_dim(),
            got: data.input_dim(),
        });
    }
    if data.output_dim() != topology.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "dataset targets",
            expected: topology.output_dim(),
            got: data.output_dim(),
        });
    }
    Ok(())
}

/// `(1/P) sum_p L(y^p, f(x^p))`, summed in sample order.
pub fn empirical_risk(params: &ParamVector, data: &Dataset, loss: &dyn Loss, act: &dyn Activation) -> Result<f64> {
    check_dataset(params.topology(), data)?;
    let total: f64 = (0..data.len())
        .map(|p| {
            let rec = forward_unchecked(params, data.input(p), act);
            loss.value(data.target(p), rec.output())
        })
        .sum();
    Ok(total / data.len() as f64)
}
