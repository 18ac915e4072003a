//! Function-preserving embeddings that add `K` neurons to a hidden layer.
//!
//! * alpha: new neurons get arbitrary biases and incoming weights, and zero
//!   outgoing weights.
//! * beta: new neurons get arbitrary biases, zero incoming weights and
//!   arbitrary outgoing weights; the next layer's biases absorb the constant
//!   contribution `s * g(zeta)`.
//! * gamma: new neurons copy neuron `h`, whose outgoing weights are split
//!   among the copies by coefficients `lambda` summing to one.
//!
//! New neurons are appended after the existing ones, so every original
//! `(layer, neuron, input)` coordinate keeps its meaning in the grown network.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Activation, ParamVector, Topology};

/// Tolerance on `sum(lambda) = 1`.
pub const LAMBDA_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Alpha,
    Beta,
    Gamma,
}

impl std::str::FromStr for MapKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "alpha" => Ok(MapKind::Alpha),
            "beta" => Ok(MapKind::Beta),
            "gamma" => Ok(MapKind::Gamma),
            other => Err(format!("unknown map `{other}` (expected alpha, beta or gamma)")),
        }
    }
}

impl std::fmt::Display for MapKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MapKind::Alpha => "alpha",
            MapKind::Beta => "beta",
            MapKind::Gamma => "gamma",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingParams {
    /// `zeta[k]` and `incoming[k]` (length `H_{l-1}`) for each new neuron.
    Alpha { zeta: Vec<f64>, incoming: Vec<Vec<f64>> },
    /// `outgoing[j][k]`: weight from new neuron `k` into neuron `j` of the
    /// next layer (`H_{l+1}` rows of length `K`).
    Beta { zeta: Vec<f64>, outgoing: Vec<Vec<f64>> },
    /// Zero-based source neuron and `K + 1` split coefficients;
    /// `lambda[0]` stays on the source.
    Gamma { source: usize, lambda: Vec<f64> },
}

impl EmbeddingParams {
    pub fn kind(&self) -> MapKind {
        match self {
            EmbeddingParams::Alpha { .. } => MapKind::Alpha,
            EmbeddingParams::Beta { .. } => MapKind::Beta,
            EmbeddingParams::Gamma { .. } => MapKind::Gamma,
        }
    }

    /// Number of neurons added.
    pub fn count(&self) -> usize {
        match self {
            EmbeddingParams::Alpha { zeta, .. } | EmbeddingParams::Beta { zeta, .. } => zeta.len(),
            EmbeddingParams::Gamma { lambda, .. } => lambda.len().saturating_sub(1),
        }
    }
}

/// A single embedding: target hidden layer (1-based) and map parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub layer: usize,
    #[serde(flatten)]
    pub params: EmbeddingParams,
}

impl EmbeddingSpec {
    pub fn kind(&self) -> MapKind {
        self.params.kind()
    }

    pub fn count(&self) -> usize {
        self.params.count()
    }

    /// True for beta with all outgoing weights zero, or any gamma.
    pub fn preserves_stationarity(&self) -> bool {
        match &self.params {
            EmbeddingParams::Alpha { incoming, .. } => incoming.iter().flatten().all(|&v| v == 0.0),
            EmbeddingParams::Beta { outgoing, .. } => outgoing.iter().flatten().all(|&v| v == 0.0),
            EmbeddingParams::Gamma { .. } => true,
        }
    }
}

fn check_layer(t: &Topology, layer: usize) -> Result<()> {
    let max = t.depth().saturating_sub(1);
    if layer == 0 || layer > max {
        return Err(Error::LayerOutOfRange { layer, max });
    }
    Ok(())
}

/// Parameters added by growing `layer` by `count` neurons.
pub fn count_embedding_growth(t: &Topology, layer: usize, count: usize) -> Result<usize> {
    check_layer(t, layer)?;
    Ok(count * (t.width(layer - 1) + 1) + count * t.width(layer + 1))
}

/// Copies `params` into the topology with `count` zero-initialized neurons
/// appended to `layer`.
fn grow_zeroed(params: &ParamVector, layer: usize, count: usize) -> ParamVector {
    let old = params.topology();
    let grown = old.grown(layer, count);
    let mut out = ParamVector::zeros(&grown);
    for l in 1..=old.depth() {
        for j in 0..old.width(l) {
            out.set_bias(l, j, params.bias(l, j));
            for i in 0..old.width(l - 1) {
                out.set_weight(l, j, i, params.weight(l, j, i));
            }
        }
    }
    out
}

pub fn embed(params: &ParamVector, spec: &EmbeddingSpec, act: &dyn Activation) -> Result<ParamVector> {
    match &spec.params {
        EmbeddingParams::Alpha { zeta, incoming } => embed_alpha(params, spec.layer, zeta, incoming),
        EmbeddingParams::Beta { zeta, outgoing } => embed_beta(params, spec.layer, zeta, outgoing, act),
        EmbeddingParams::Gamma { source, lambda } => embed_gamma(params, spec.layer, *source, lambda),
    }
}

pub fn embed_alpha(params: &ParamVector, layer: usize, zeta: &[f64], incoming: &[Vec<f64>]) -> Result<ParamVector> {
    let t = params.topology();
    check_layer(t, layer)?;
    let k = zeta.len();
    if incoming.len() != k {
        return Err(Error::DimensionMismatch { what: "alpha incoming rows", expected: k, got: incoming.len() });
    }
    let fan_in = t.width(layer - 1);
    if let Some(row) = incoming.iter().find(|r| r.len() != fan_in) {
        return Err(Error::DimensionMismatch { what: "alpha incoming row", expected: fan_in, got: row.len() });
    }
    let h = t.width(layer);
    let mut out = grow_zeroed(params, layer, k);
    for (n, (&z, row)) in zeta.iter().zip(incoming).enumerate() {
        out.set_bias(layer, h + n, z);
        for (i, &w) in row.iter().enumerate() {
            out.set_weight(layer, h + n, i, w);
        }
    }
    Ok(out)
}

pub fn embed_beta(
    params: &ParamVector,
    layer: usize,
    zeta: &[f64],
    outgoing: &[Vec<f64>],
    act: &dyn Activation,
) -> Result<ParamVector> {
    let t = params.topology();
    check_layer(t, layer)?;
    let k = zeta.len();
    let fan_out = t.width(layer + 1);
    if outgoing.len() != fan_out {
        return Err(Error::DimensionMismatch { what: "beta outgoing rows", expected: fan_out, got: outgoing.len() });
    }
    if let Some(row) = outgoing.iter().find(|r| r.len() != k) {
        return Err(Error::DimensionMismatch { what: "beta outgoing row", expected: k, got: row.len() });
    }
    let h = t.width(layer);
    let mut out = grow_zeroed(params, layer, k);
    for (n, &z) in zeta.iter().enumerate() {
        out.set_bias(layer, h + n, z);
    }
    let activated: Vec<f64> = zeta.iter().map(|&z| act.value(z)).collect();
    for (j, row) in outgoing.iter().enumerate() {
        let mut shift = 0.0;
        for (n, (&s, &gz)) in row.iter().zip(&activated).enumerate() {
            out.set_weight(layer + 1, j, h + n, s);
            shift += s * gz;
        }
        out.set_bias(layer + 1, j, params.bias(layer + 1, j) - shift);
    }
    Ok(out)
}

pub fn embed_gamma(params: &ParamVector, layer: usize, source: usize, lambda: &[f64]) -> Result<ParamVector> {
    let t = params.topology();
    check_layer(t, layer)?;
    let h = t.width(layer);
    if source >= h {
        return Err(Error::SourceNeuronOutOfRange { neuron: source, width: h });
    }
    if lambda.is_empty() {
        return Err(Error::InvalidArgument("gamma needs at least lambda_0".into()));
    }
    let sum: f64 = lambda.iter().sum();
    if !((sum - 1.0).abs() <= LAMBDA_SUM_TOL) {
        return Err(Error::LambdaSum { sum });
    }
    let k = lambda.len() - 1;
    let mut out = grow_zeroed(params, layer, k);
    let bias = params.bias(layer, source);
    let row = params.weight_row(layer, source).to_vec();
    for n in 0..k {
        out.set_bias(layer, h + n, bias);
        for (i, &w) in row.iter().enumerate() {
            out.set_weight(layer, h + n, i, w);
        }
    }
    for j in 0..t.width(layer + 1) {
        let w = params.weight(layer + 1, j, source);
        out.set_weight(layer + 1, j, source, lambda[0] * w);
        for (n, &l) in lambda[1..].iter().enumerate() {
            out.set_weight(layer + 1, j, h + n, l * w);
        }
    }
    Ok(out)
}

/// How gamma's split coefficients are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaChoice {
    /// `lambda_i = 1 / (K + 1)` for every `i`.
    Symmetric,
    /// Normalized independent `U(0,1)` draws.
    RandomSimplex,
}

/// Options for drawing embedding parameters at random.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomOptions {
    /// Draw beta's outgoing weights as zero (the stationarity-preserving case).
    pub beta_zero_outgoing: bool,
    pub lambda: LambdaChoice,
}

impl Default for RandomOptions {
    fn default() -> Self {
        Self { beta_zero_outgoing: true, lambda: LambdaChoice::Symmetric }
    }
}

/// Draws parameters for a `kind` embedding adding `count` neurons to
/// `layer`. Free reals are `U(0,1)`; gamma's source neuron is uniform.
pub fn random_params<R: Rng + ?Sized>(
    kind: MapKind,
    t: &Topology,
    layer: usize,
    count: usize,
    opts: RandomOptions,
    rng: &mut R,
) -> Result<EmbeddingParams> {
    check_layer(t, layer)?;
    let mut uniform = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random::<f64>()).collect() };
    Ok(match kind {
        MapKind::Alpha => {
            let zeta = uniform(count);
            let incoming = (0..count).map(|_| uniform(t.width(layer - 1))).collect();
            EmbeddingParams::Alpha { zeta, incoming }
        }
        MapKind::Beta => {
            let zeta = uniform(count);
            let outgoing = (0..t.width(layer + 1))
                .map(|_| if opts.beta_zero_outgoing { vec![0.0; count] } else { uniform(count) })
                .collect();
            EmbeddingParams::Beta { zeta, outgoing }
        }
        MapKind::Gamma => {
            let source = rng.random_range(0..t.width(layer));
            let lambda = match opts.lambda {
                LambdaChoice::Symmetric => vec![1.0 / (count + 1) as f64; count + 1],
                LambdaChoice::RandomSimplex => random_simplex(count + 1, rng),
            };
            EmbeddingParams::Gamma { source, lambda }
        }
    })
}

/// `len` nonnegative reals summing to one; the last entry absorbs rounding.
pub fn random_simplex<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mut out: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let head: f64 = out[..len - 1].iter().sum();
    out[len - 1] = 1.0 - head;
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub layer: usize,
    pub count: usize,
    pub kind: MapKind,
}

/// An ordered sequence of embeddings on distinct hidden layers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositePlan {
    pub steps: Vec<PlanStep>,
}

impl CompositePlan {
    pub fn new(steps: Vec<PlanStep>) -> Self {
        Self { steps }
    }

    /// All steps use the same map, e.g. the all-alpha composition.
    pub fn uniform(kind: MapKind, layers_and_counts: &[(usize, usize)]) -> Self {
        Self { steps: layers_and_counts.iter().map(|&(layer, count)| PlanStep { layer, count, kind }).collect() }
    }

    pub fn validate(&self, t: &Topology) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (index, step) in self.steps.iter().enumerate() {
            let wrap = |e: Error| Error::PlanStep { index, source: Box::new(e) };
            check_layer(t, step.layer).map_err(wrap)?;
            if !seen.insert(step.layer) {
                return Err(wrap(Error::InvalidArgument(format!("layer {} appears twice in the plan", step.layer))));
            }
        }
        Ok(())
    }
}

/// Supplies map parameters for each plan step.
pub trait ParamSource {
    fn params_for(&mut self, index: usize, current: &Topology, step: &PlanStep) -> Result<EmbeddingParams>;
}

/// Parameters given up front, one per step.
#[derive(Clone, Debug)]
pub struct ExplicitParams(pub Vec<EmbeddingParams>);

impl ParamSource for ExplicitParams {
    fn params_for(&mut self, index: usize, _current: &Topology, step: &PlanStep) -> Result<EmbeddingParams> {
        let p = self
            .0
            .get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameters supplied for step {index}")))?;
        if p.kind() != step.kind || p.count() != step.count {
            return Err(Error::InvalidArgument(format!(
                "step {index} expects {} x{}, parameters are {} x{}",
                step.kind,
                step.count,
                p.kind(),
                p.count()
            )));
        }
        Ok(p)
    }
}

/// Parameters drawn from an RNG as in [`random_params`].
pub struct RandomParams<'a, R: Rng + ?Sized> {
    pub rng: &'a mut R,
    pub options: RandomOptions,
}

impl<R: Rng + ?Sized> ParamSource for RandomParams<'_, R> {
    fn params_for(&mut self, _index: usize, current: &Topology, step: &PlanStep) -> Result<EmbeddingParams> {
        random_params(step.kind, current, step.layer, step.count, self.options, self.rng)
    }
}

#[derive(Clone, Debug)]
pub struct CompositeOutcome {
    pub params: ParamVector,
    /// The concrete embedding applied at each step.
    pub applied: Vec<EmbeddingSpec>,
    /// Parameter vector after each step; the last equals `params`.
    pub intermediates: Vec<ParamVector>,
}

/// Applies the plan's steps in order. An empty plan is the identity.
pub fn embed_composite(
    params: &ParamVector,
    plan: &CompositePlan,
    source: &mut dyn ParamSource,
    act: &dyn Activation,
) -> Result<CompositeOutcome> {
    plan.validate(params.topology())?;
    let mut current = params.clone();
    let mut applied = Vec::with_capacity(plan.steps.len());
    let mut intermediates = Vec::with_capacity(plan.steps.len());
    for (index, step) in plan.steps.iter().enumerate() {
        let wrap = |e: Error| Error::PlanStep { index, source: Box::new(e) };
        let p = source.params_for(index, current.topology(), step).map_err(wrap)?;
        let spec = EmbeddingSpec { layer: step.layer, params: p };
        current = embed(&current, &spec, act).map_err(wrap)?;
        applied.push(spec);
        intermediates.push(current.clone());
    }
    Ok(CompositeOutcome { params: current, applied, intermediates })
}

/// Applies already-resolved embeddings in order.
pub fn embed_sequence(params: &ParamVector, specs: &[EmbeddingSpec], act: &dyn Activation) -> Result<ParamVector> {
    let mut current = params.clone();
    for (index, spec) in specs.iter().enumerate() {
        current = embed(&current, spec, act).map_err(|e| Error::PlanStep { index, source: Box::new(e) })?;
    }
    Ok(current)
}
