//! Forward-mode gradient of the empirical risk, plus a central-difference
//! oracle.
//!
//! For every layer `l` the sweep carries the sensitivities of the
//! pre-activations of each later layer `q` with respect to all biases of
//! `l` at once (an `H_q x H_l` matrix), seeded with the identity at `q = l`
//! and pushed forward with `W^q diag(g'(a^{q-1}))`. The weight sensitivity
//! `da^q/dw^l_{ji}` is the bias sensitivity `da^q/dsigma^l_j` scaled by the
//! `i`-th input to layer `l`, so it never needs its own sweep.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{check_dataset, empirical_risk, forward_unchecked, Activation, Loss, ParamVector, Topology};

/// Samples per reduction chunk. Chunk sums are added in chunk order, so the
/// result does not depend on how many threads ran.
const CHUNK: usize = 32;

/// Partial derivatives of the risk in the [`ParamVector`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    topology: Topology,
    flat: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(topology: &Topology) -> Self {
        Self { flat: vec![0.0; topology.param_count()], topology: topology.clone() }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn bias(&self, layer: usize, j: usize) -> f64 {
        self.flat[self.topology.bias_index(layer, j)]
    }

    pub fn weight(&self, layer: usize, j: usize, i: usize) -> f64 {
        self.flat[self.topology.weight_index(layer, j, i)]
    }

    pub fn norm_l2(&self) -> f64 {
        self.flat.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        grad_norm_inf(&self.flat)
    }
}

/// Largest absolute component; 0 for an empty slice.
pub fn grad_norm_inf(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

pub fn gradient_forward(params: &ParamVector, data: &Dataset, loss: &dyn Loss, act: &dyn Activation) -> Result<GradientVector> {
    risk_and_gradient(params, data, loss, act).map(|(_, g)| g)
}

/// Risk and its forward-mode gradient from one pass over the data.
pub fn risk_and_gradient(
    params: &ParamVector,
    data: &Dataset,
    loss: &dyn Loss,
    act: &dyn Activation,
) -> Result<(f64, GradientVector)> {
    let t = params.topology();
    check_dataset(t, data)?;
    let q = t.param_count();
    let chunks: Vec<(f64, Vec<f64>)> = (0..data.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut risk = 0.0;
            let mut grad = vec![0.0; q];
            let mut work = Workspace::new(t);
            for p in c * CHUNK..((c + 1) * CHUNK).min(data.len()) {
                risk += accumulate_sample(params, data.input(p), data.target(p), loss, act, &mut work, &mut grad);
            }
            (risk, grad)
        })
        .collect();
    let mut risk = 0.0;
    let mut flat = vec![0.0; q];
    for (r, g) in chunks {
        risk += r;
        for (acc, v) in flat.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let inv_p = 1.0 / data.len() as f64;
    flat.iter_mut().for_each(|v| *v *= inv_p);
    Ok((risk * inv_p, GradientVector { topology: t.clone(), flat }))
}

struct Workspace {
    loss_grad: Vec<f64>,
    sens: Vec<f64>,
    next: Vec<f64>,
}

impl Workspace {
    fn new(t: &Topology) -> Self {
        let widest = t.sizes().iter().copied().max().unwrap_or(1);
        Self { loss_grad: vec![0.0; t.output_dim()], sens: vec![0.0; widest * widest], next: vec![0.0; widest * widest] }
    }
}

/// Adds one sample's loss gradient (unscaled by `1/P`) into `grad` and
/// returns the sample loss.
fn accumulate_sample(
    params: &ParamVector,
    x: &[f64],
    y: &[f64],
    loss: &dyn Loss,
    act: &dyn Activation,
    work: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    let t = params.topology();
    let depth = t.depth();
    let rec = forward_unchecked(params, x, act);
    let output = rec.output();
    let sample_loss = loss.value(y, output);
    loss.derivative(y, output, &mut work.loss_grad);

    // Inputs to each layer: x for layer 1, g(a^{l-1}) afterwards.
    let layer_inputs: Vec<Vec<f64>> = std::iter::once(x.to_vec())
        .chain((1..depth).map(|l| rec.layer(l).iter().map(|&a| act.value(a)).collect()))
        .collect();
    let slopes: Vec<Vec<f64>> = (1..depth).map(|l| rec.layer(l).iter().map(|&a| act.derivative(a)).collect()).collect();

    for l in 1..=depth {
        let hl = t.width(l);
        // sens: H_q x H_l matrix of da^q_c / dsigma^l_j, starting at q = l.
        let mut rows = hl;
        work.sens[..hl * hl].iter_mut().for_each(|v| *v = 0.0);
        for j in 0..hl {
            work.sens[j * hl + j] = 1.0;
        }
        for qlayer in l + 1..=depth {
            let hq = t.width(qlayer);
            let prev_slope = &slopes[qlayer - 2];
            for c in 0..hq {
                let wrow = params.weight_row(qlayer, c);
                let out = &mut work.next[c * hl..(c + 1) * hl];
                out.iter_mut().for_each(|v| *v = 0.0);
                for (h, (&w, &gp)) in wrow.iter().zip(prev_slope).enumerate() {
                    let coeff = w * gp;
                    if coeff == 0.0 {
                        continue;
                    }
                    let src = &work.sens[h * hl..(h + 1) * hl];
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += coeff * s;
                    }
                }
            }
            std::mem::swap(&mut work.sens, &mut work.next);
            rows = hq;
        }
        debug_assert_eq!(rows, t.output_dim());
        let inputs = &layer_inputs[l - 1];
        for j in 0..hl {
            let d_bias: f64 = (0..rows).map(|r| work.loss_grad[r] * work.sens[r * hl + j]).sum();
            let b = t.bias_index(l, j);
            grad[b] += d_bias;
            for (i, z) in inputs.iter().enumerate() {
                grad[b + 1 + i] += d_bias * z;
            }
        }
    }
    sample_loss
}

/// Central differences `(R(theta + h e_k) - R(theta - h e_k)) / 2h`.
pub fn gradient_finite_diff(
    params: &ParamVector,
    data: &Dataset,
    loss: &dyn Loss,
    act: &dyn Activation,
    step: f64,
) -> Result<GradientVector> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {step}")));
    }
    check_dataset(params.topology(), data)?;
    let mut probe = params.clone();
    let mut flat = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let up = empirical_risk(&probe, data, loss, act)?;
        probe.as_mut_slice()[k] = orig - step;
        let down = empirical_risk(&probe, data, loss, act)?;
        probe.as_mut_slice()[k] = orig;
        flat.push((up - down) / (2.0 * step));
    }
    Ok(GradientVector { topology: params.topology().clone(), flat })
}
