//! Numerical certificates for embedded networks: the risk is unchanged by
//! every map, and stationary points stay stationary under beta with zero
//! outgoing weights, gamma, and compositions of the two.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::risk_and_gradient;
use crate::data::Dataset;
use crate::embeddings::{embed_sequence, random_params, EmbeddingSpec, MapKind, RandomOptions};
use crate::network::{Activation, Loss, ParamVector, Topology};
use crate::optimizer::{lbfgs_minimize, LbfgsConfig, Termination};
use crate::{Error, Result};

/// Relative tolerance on `|R(embedded) - R(source)|`.
pub const RISK_GAP_REL_TOL: f64 = 1e-10;
/// Allowed growth factor of the gradient norm across a preserving embedding.
pub const TRANSFER_SLACK: f64 = 100.0;
/// Floor for the source gradient norm in the transfer test.
pub const GRAD_NORM_FLOOR: f64 = 64.0 * f64::EPSILON;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    LossInvariance,
    StationarityTransfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

/// The embedding a report certifies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliedMap {
    Single(EmbeddingSpec),
    Composite(Vec<EmbeddingSpec>),
}

impl AppliedMap {
    pub fn specs(&self) -> &[EmbeddingSpec] {
        match self {
            AppliedMap::Single(spec) => std::slice::from_ref(spec),
            AppliedMap::Composite(specs) => specs,
        }
    }

    pub fn preserves_stationarity(&self) -> bool {
        self.specs().iter().all(EmbeddingSpec::preserves_stationarity)
    }
}

/// Outcome of one check. The verdict is computed from the numeric fields
/// when the report is built and cannot be set directly.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationarityReport {
    check: CheckKind,
    source_grad_norm: f64,
    embedded_grad_norm: f64,
    source_risk: f64,
    embedded_risk: f64,
    risk_gap: f64,
    verdict: Verdict,
    map_used: AppliedMap,
}

impl StationarityReport {
    pub fn new(
        check: CheckKind,
        source: (f64, f64),
        embedded: (f64, f64),
        map_used: AppliedMap,
    ) -> Self {
        let (source_risk, source_grad_norm) = source;
        let (embedded_risk, embedded_grad_norm) = embedded;
        let risk_gap = (embedded_risk - source_risk).abs();
        let pass = match check {
            CheckKind::LossInvariance => invariance_holds(source_risk, risk_gap),
            CheckKind::StationarityTransfer => transfer_holds(source_grad_norm, embedded_grad_norm),
        };
        let verdict = if pass { Verdict::Pass } else { Verdict::Fail };
        Self { check, source_grad_norm, embedded_grad_norm, source_risk, embedded_risk, risk_gap, verdict, map_used }
    }

    pub fn check(&self) -> CheckKind {
        self.check
    }
    pub fn source_grad_norm(&self) -> f64 {
        self.source_grad_norm
    }
    pub fn embedded_grad_norm(&self) -> f64 {
        self.embedded_grad_norm
    }
    pub fn source_risk(&self) -> f64 {
        self.source_risk
    }
    pub fn embedded_risk(&self) -> f64 {
        self.embedded_risk
    }
    pub fn risk_gap(&self) -> f64 {
        self.risk_gap
    }
    pub fn verdict(&self) -> Verdict {
        self.verdict
    }
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
    pub fn map_used(&self) -> &AppliedMap {
        &self.map_used
    }

    /// One JSON object without trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report fields serialize")
    }
}

pub fn invariance_holds(source_risk: f64, risk_gap: f64) -> bool {
    risk_gap <= RISK_GAP_REL_TOL * (1.0 + source_risk.abs())
}

pub fn transfer_holds(source_grad_norm: f64, embedded_grad_norm: f64) -> bool {
    embedded_grad_norm <= TRANSFER_SLACK * source_grad_norm.max(GRAD_NORM_FLOOR)
}

/// A parameter vector certified as approximately stationary.
#[derive(Clone, Debug, PartialEq)]
pub struct StationaryPoint {
    pub params: ParamVector,
    pub risk: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Runs L-BFGS from a seeded `U(0,1)` start until `||grad||_inf <= tol`.
pub fn find_stationary_point(
    t: &Topology,
    data: &Dataset,
    loss: &dyn Loss,
    act: &dyn Activation,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<StationaryPoint> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidArgument(format!("stationarity tolerance must be positive, got {tol}")));
    }
    crate::network::check_dataset(t, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = ParamVector::uniform(t, &mut rng);
    let objective = |x: &[f64]| {
        let p = ParamVector::from_flat(t, x.to_vec()).expect("optimizer preserves length");
        let (r, g) = risk_and_gradient(&p, data, loss, act).expect("dataset checked");
        (r, g.into_flat())
    };
    let cfg = LbfgsConfig { grad_tol_inf: tol, max_iter, ..LbfgsConfig::default() };
    let res = lbfgs_minimize(objective, start.into_flat(), &cfg, None)?;
    if res.termination != Termination::GradTol {
        let best_norm = res.grad_history.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::NonConvergence { best_norm });
    }
    Ok(StationaryPoint {
        params: ParamVector::from_flat(t, res.x)?,
        risk: res.f_final,
        grad_norm: res.grad_norm_final,
        iterations: res.iterations,
    })
}

fn risk_and_norm(params: &ParamVector, data: &Dataset, loss: &dyn Loss, act: &dyn Activation) -> Result<(f64, f64)> {
    let (r, g) = risk_and_gradient(params, data, loss, act)?;
    Ok((r, g.norm_inf()))
}

/// Applies `map` to `theta` and compares the risks.
pub fn verify_loss_invariance(
    theta: &ParamVector,
    data: &Dataset,
    map: &AppliedMap,
    loss: &dyn Loss,
    act: &dyn Activation,
) -> Result<StationarityReport> {
    let grown = embed_sequence(theta, map.specs(), act)?;
    verify_loss_invariance_of(theta, &grown, data, map.clone(), loss, act)
}

/// Invariance check against an already grown vector, e.g. a mutated one.
pub fn verify_loss_invariance_of(
    theta: &ParamVector,
    grown: &ParamVector,
    data: &Dataset,
    map: AppliedMap,
    loss: &dyn Loss,
    act: &dyn Activation,
) -> Result<StationarityReport> {
    let source = risk_and_norm(theta, data, loss, act)?;
    let embedded = risk_and_norm(grown, data, loss, act)?;
    Ok(StationarityReport::new(CheckKind::LossInvariance, source, embedded, map))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransferOptions {
    /// Accept maps that are not expected to preserve stationarity, for
    /// negative controls.
    pub negative_control: bool,
}

/// Applies `map` to the stationary `theta_star` and compares the gradient
/// norms.
pub fn verify_stationarity_transfer(
    theta_star: &ParamVector,
    data: &Dataset,
    map: &AppliedMap,
    loss: &dyn Loss,
    act: &dyn Activation,
    opts: TransferOptions,
) -> Result<StationarityReport> {
    if !opts.negative_control && !map.preserves_stationarity() {
        return Err(Error::InvalidArgument(
            "map does not preserve stationarity (alpha with nonzero incoming weights or beta with nonzero outgoing \
             weights)"
                .into(),
        ));
    }
    let grown = embed_sequence(theta_star, map.specs(), act)?;
    let source = risk_and_norm(theta_star, data, loss, act)?;
    let embedded = risk_and_norm(&grown, data, loss, act)?;
    Ok(StationarityReport::new(CheckKind::StationarityTransfer, source, embedded, map.clone()))
}

/// Grown gradient norms of repeated random alpha embeddings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EscapeSummary {
    pub threshold: f64,
    pub norms: Vec<f64>,
    pub escaped: usize,
}

impl EscapeSummary {
    pub fn fraction(&self) -> f64 {
        if self.norms.is_empty() {
            0.0
        } else {
            self.escaped as f64 / self.norms.len() as f64
        }
    }
}

/// Embeds `count` alpha neurons with `U(0,1)` parameters into `layer` of
/// `theta`, `draws` times, and counts grown gradient norms above
/// `threshold`.
#[allow(clippy::too_many_arguments)]
pub fn alpha_escape_trials(
    theta: &ParamVector,
    data: &Dataset,
    layer: usize,
    count: usize,
    draws: usize,
    threshold: f64,
    loss: &dyn Loss,
    act: &dyn Activation,
    seed: u64,
) -> Result<EscapeSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut norms = Vec::with_capacity(draws);
    for _ in 0..draws {
        let params = random_params(MapKind::Alpha, theta.topology(), layer, count, RandomOptions::default(), &mut rng)?;
        let grown = embed_sequence(theta, &[EmbeddingSpec { layer, params }], act)?;
        norms.push(risk_and_norm(&grown, data, loss, act)?.1);
    }
    let escaped = norms.iter().filter(|&&n| n > threshold).count();
    Ok(EscapeSummary { threshold, norms, escaped })
}

/// Number of (layer subset, per-layer counts, beta/gamma choice) families of
/// stationarity-preserving embeddings adding at most `k_budget` neurons.
///
/// A subset of size `r` admits `C(k_budget, r)` positive count vectors with
/// sum at most `k_budget` and `2^r` map choices.
pub fn count_manifold_families(t: &Topology, k_budget: usize) -> Result<u128> {
    if k_budget == 0 {
        return Err(Error::InvalidArgument("neuron budget must be at least 1".into()));
    }
    let hidden = t.depth() - 1;
    let overflow = || Error::InvalidArgument("family count overflows u128".into());
    let mut total: u128 = 0;
    for r in 1..=hidden.min(k_budget) {
        let term = binomial(hidden, r)
            .checked_mul(binomial(k_budget, r))
            .and_then(|v| v.checked_mul(1u128.checked_shl(r as u32)?))
            .ok_or_else(overflow)?;
        total = total.checked_add(term).ok_or_else(overflow)?;
    }
    Ok(total)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::embeddings::{embed_composite, CompositePlan, EmbeddingParams, LambdaChoice, PlanStep, RandomParams};
    use crate::network::{MeanSquaredError, Tanh};

    fn stationary_231() -> (Dataset, StationaryPoint) {
        let t = Topology::new(&[2, 3, 1]).unwrap();
        let d = make_synthetic(SyntheticKind::Polynomial, 2, 1, 24, 0.1, 1).unwrap();
        let sp = (0..20)
            .find_map(|seed| find_stationary_point(&t, &d, &MeanSquaredError, &Tanh, 1e-8, 3000, seed).ok())
            .expect("some seed converges");
        (d, sp)
    }

    fn brute_force_families(hidden: usize, budget: usize) -> u128 {
        // Enumerate every assignment of a count in 0..=budget to each hidden
        // layer, then every beta/gamma choice on the nonzero entries.
        let mut total = 0u128;
        let mut counts = vec![0usize; hidden];
        loop {
            let used: usize = counts.iter().sum();
            let active = counts.iter().filter(|&&c| c > 0).count();
            if active > 0 && used <= budget {
                total += 1u128 << active;
            }
            let mut i = 0;
            loop {
                if i == hidden {
                    return total;
                }
                counts[i] += 1;
                if counts[i] <= budget {
                    break;
                }
                counts[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn single_sample_linear_net_is_interpolated() {
        let t = Topology::new(&[1, 1]).unwrap();
        let d = Dataset::new("one", 1, 1, vec![0.7], vec![2.0]).unwrap();
        let sp = find_stationary_point(&t, &d, &MeanSquaredError, &crate::network::Linear, 1e-12, 100, 0).unwrap();
        assert!(sp.risk < 1e-20);
        assert!(sp.grad_norm <= 1e-12);
    }

    #[test]
    fn two_two_one_converges_on_small_regression() {
        let t = Topology::new(&[2, 2, 1]).unwrap();
        let d = make_synthetic(SyntheticKind::Polynomial, 2, 1, 24, 0.1, 0).unwrap();
        let sp = find_stationary_point(&t, &d, &MeanSquaredError, &Tanh, 1e-8, 1000, 0).unwrap();
        assert!(sp.grad_norm <= 1e-8);
        assert!(sp.iterations < 1000);
    }

    #[test]
    fn nonpositive_tolerance_is_rejected() {
        let t = Topology::new(&[2, 2, 1]).unwrap();
        let d = make_synthetic(SyntheticKind::Sinusoid, 2, 1, 8, 0.1, 3).unwrap();
        for tol in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                find_stationary_point(&t, &d, &MeanSquaredError, &Tanh, tol, 10, 0),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn iteration_cap_reports_best_norm() {
        let t = Topology::new(&[2, 3, 1]).unwrap();
        let d = make_synthetic(SyntheticKind::Sinusoid, 2, 1, 8, 0.1, 3).unwrap();
        match find_stationary_point(&t, &d, &MeanSquaredError, &Tanh, 1e-12, 2, 0) {
            Err(Error::NonConvergence { best_norm }) => assert!(best_norm > 1e-12 && best_norm.is_finite()),
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn every_map_preserves_risk_on_random_parameters() {
        let t = Topology::new(&[3, 4, 3, 2]).unwrap();
        let d = make_synthetic(SyntheticKind::Sinusoid, 3, 2, 12, 0.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = ParamVector::uniform(&t, &mut rng);
        let opts = RandomOptions { beta_zero_outgoing: false, lambda: LambdaChoice::RandomSimplex };
        for kind in [MapKind::Alpha, MapKind::Beta, MapKind::Gamma] {
            for layer in [1, 2] {
                let params = random_params(kind, &t, layer, 2, opts, &mut rng).unwrap();
                let map = AppliedMap::Single(EmbeddingSpec { layer, params });
                let report = verify_loss_invariance(&theta, &d, &map, &MeanSquaredError, &Tanh).unwrap();
                assert!(report.passed(), "{kind} at layer {layer}: gap {}", report.risk_gap());
            }
        }
    }

    #[test]
    fn corrupted_alpha_breaks_invariance() {
        let t = Topology::new(&[2, 3, 1]).unwrap();
        let d = make_synthetic(SyntheticKind::Sinusoid, 2, 1, 10, 0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = ParamVector::uniform(&t, &mut rng);
        let params = random_params(MapKind::Alpha, &t, 1, 1, RandomOptions::default(), &mut rng).unwrap();
        let spec = EmbeddingSpec { layer: 1, params };
        let mut grown = embed_sequence(&theta, std::slice::from_ref(&spec), &Tanh).unwrap();
        grown.set_weight(2, 0, 3, 0.5);
        let report =
            verify_loss_invariance_of(&theta, &grown, &d, AppliedMap::Single(spec), &MeanSquaredError, &Tanh).unwrap();
        assert_eq!(report.verdict(), Verdict::Fail);
        assert!(report.risk_gap() > 1e-6);
    }

    #[test]
    fn preserving_maps_transfer_stationarity() {
        let (d, sp) = stationary_231();
        let t = sp.params.topology().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let beta = random_params(MapKind::Beta, &t, 1, 2, RandomOptions::default(), &mut rng).unwrap();
        let gamma = random_params(
            MapKind::Gamma,
            &t,
            1,
            2,
            RandomOptions { lambda: LambdaChoice::RandomSimplex, ..RandomOptions::default() },
            &mut rng,
        )
        .unwrap();
        for params in [beta, gamma] {
            let map = AppliedMap::Single(EmbeddingSpec { layer: 1, params });
            let r = verify_stationarity_transfer(&sp.params, &d, &map, &MeanSquaredError, &Tanh, Default::default())
                .unwrap();
            assert!(r.passed(), "{:?}", r);
            assert!(r.embedded_grad_norm() <= 1e-6);
        }
    }

    #[test]
    fn mixed_plan_transfers_stationarity_on_two_hidden_layers() {
        let t = Topology::new(&[2, 2, 2, 1]).unwrap();
        let d = make_synthetic(SyntheticKind::Sinusoid, 2, 1, 8, 0.1, 3).unwrap();
        let sp = (0..20)
            .find_map(|seed| find_stationary_point(&t, &d, &MeanSquaredError, &Tanh, 1e-8, 3000, seed).ok())
            .expect("some seed converges");
        let plan = CompositePlan::new(vec![
            PlanStep { layer: 1, count: 1, kind: MapKind::Beta },
            PlanStep { layer: 2, count: 2, kind: MapKind::Gamma },
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut src = RandomParams { rng: &mut rng, options: RandomOptions::default() };
        let out = embed_composite(&sp.params, &plan, &mut src, &Tanh).unwrap();
        let map = AppliedMap::Composite(out.applied);
        let r =
            verify_stationarity_transfer(&sp.params, &d, &map, &MeanSquaredError, &Tanh, Default::default()).unwrap();
        assert!(r.passed(), "{:?}", r);
    }

    #[test]
    fn alpha_is_rejected_unless_negative_control() {
        let (d, sp) = stationary_231();
        let spec = EmbeddingSpec { layer: 1, params: EmbeddingParams::Alpha { zeta: vec![0.3], incoming: vec![vec![0.2, 0.4]] } };
        let map = AppliedMap::Single(spec);
        assert!(matches!(
            verify_stationarity_transfer(&sp.params, &d, &map, &MeanSquaredError, &Tanh, Default::default()),
            Err(Error::InvalidArgument(_))
        ));
        let r = verify_stationarity_transfer(
            &sp.params,
            &d,
            &map,
            &MeanSquaredError,
            &Tanh,
            TransferOptions { negative_control: true },
        )
        .unwrap();
        assert_eq!(r.verdict(), Verdict::Fail);
    }

    #[test]
    fn alpha_escapes_stationary_points() {
        let (d, sp) = stationary_231();
        let s = alpha_escape_trials(&sp.params, &d, 1, 1, 50, 1e-3, &MeanSquaredError, &Tanh, 11).unwrap();
        assert_eq!(s.norms.len(), 50);
        assert!(s.escaped >= 45, "{} of 50 escaped", s.escaped);
    }

    #[test]
    fn verdict_follows_thresholds() {
        let spec = EmbeddingSpec { layer: 1, params: EmbeddingParams::Gamma { source: 0, lambda: vec![0.5, 0.5] } };
        let map = AppliedMap::Single(spec);
        let at = |gap: f64| StationarityReport::new(CheckKind::LossInvariance, (1.0, 0.0), (1.0 + gap, 0.0), map.clone());
        assert!(at(2e-10 * 0.99).passed());
        assert!(!at(2e-10 * 1.01).passed());
        let tr = |g: f64| StationarityReport::new(CheckKind::StationarityTransfer, (0.0, 1e-9), (0.0, g), map.clone());
        assert!(tr(1e-7).passed());
        assert!(!tr(1.01e-7).passed());
    }

    #[test]
    fn report_serializes_as_one_line() {
        let spec = EmbeddingSpec { layer: 1, params: EmbeddingParams::Gamma { source: 0, lambda: vec![0.5, 0.5] } };
        let r = StationarityReport::new(CheckKind::StationarityTransfer, (0.1, 1e-9), (0.1, 2e-9), AppliedMap::Single(spec));
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["verdict"], "Pass");
        assert_eq!(v["check"], "stationarity_transfer");
        assert_eq!(v["map_used"]["single"]["kind"], "gamma");
    }

    #[test]
    fn family_counts_match_hand_and_brute_force() {
        let top = |sizes: &[usize]| Topology::new(sizes).unwrap();
        assert_eq!(count_manifold_families(&top(&[2, 3, 1]), 1).unwrap(), 2);
        assert_eq!(count_manifold_families(&top(&[2, 3, 3, 1]), 1).unwrap(), 4);
        assert_eq!(count_manifold_families(&top(&[2, 3, 3, 1]), 2).unwrap(), 12);
        for hidden in 1..=4 {
            let mut sizes = vec![2; hidden + 2];
            sizes[hidden + 1] = 1;
            for budget in 1..=5 {
                assert_eq!(
                    count_manifold_families(&top(&sizes), budget).unwrap(),
                    brute_force_families(hidden, budget),
                    "hidden {hidden} budget {budget}"
                );
            }
        }
        assert!(count_manifold_families(&top(&[2, 3, 1]), 0).is_err());
    }

    #[test]
    fn family_count_is_monotone() {
        for hidden in 1..=6usize {
            let mut sizes = vec![3; hidden + 2];
            sizes[0] = 2;
            let t = Topology::new(&sizes).unwrap();
            let mut deeper_sizes = sizes.clone();
            deeper_sizes.insert(1, 3);
            let deeper = Topology::new(&deeper_sizes).unwrap();
            for budget in 1..=8 {
                let c = count_manifold_families(&t, budget).unwrap();
                assert!(count_manifold_families(&t, budget + 1).unwrap() >= c);
                assert!(count_manifold_families(&deeper, budget).unwrap() >= c);
            }
        }
    }
}
