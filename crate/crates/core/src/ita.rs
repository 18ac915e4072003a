//! Incremental training: fit a narrow network, widen it with alpha
//! embeddings that keep the risk but leave the stationary point, retrain,
//! and repeat up to the target width. Also the fixed-width baseline.
//!
//! One L-BFGS iteration counts as one epoch. Every run records a loss trace
//! whose entry `e` is the risk after `e` epochs; entry 0 is the initial risk.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::risk_and_gradient;
use crate::data::Dataset;
use crate::embeddings::{embed_composite, CompositePlan, MapKind, RandomOptions, RandomParams};
use crate::network::{check_dataset, Activation, Loss, ParamVector, Topology};
use crate::optimizer::{lbfgs_minimize, IterationState, LbfgsConfig, Termination};
use crate::{Error, Result};

/// Largest risk change tolerated across a growth step.
pub const CONTINUITY_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthRule {
    /// `K_k = H_k`.
    DoubleEach,
    FixedK(usize),
    /// `K_k` for successive stages; the last entry repeats.
    Schedule(Vec<usize>),
}

impl GrowthRule {
    fn increment(&self, stage: usize, width: usize) -> usize {
        match self {
            GrowthRule::DoubleEach => width,
            GrowthRule::FixedK(k) => *k,
            GrowthRule::Schedule(ks) => *ks.get(stage).or(ks.last()).unwrap_or(&1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDeltaMode {
    /// `|R_h - R_{h-1}| <= delta`.
    Absolute,
    /// `|R_h - R_{h-1}| <= delta * |R_{h-1}|`.
    Relative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItaConfig {
    pub h0: usize,
    pub h_max: usize,
    pub growth: GrowthRule,
    /// Explicit `tau_k` per intermediate stage, used both as the stage's
    /// infinity-norm stopping tolerance and as the escape threshold. When
    /// unset, a stage stops at `intermediate_rel_grad_factor` times its
    /// starting infinity norm, and the grown network's Euclidean gradient
    /// norm must exceed the Euclidean norm the stage reached.
    pub stage_tolerances: Option<Vec<f64>>,
    pub intermediate_rel_grad_factor: f64,
    pub intermediate_loss_delta: f64,
    pub loss_delta_mode: LossDeltaMode,
    pub final_grad_tol: f64,
    pub maxit_per_stage: usize,
    pub final_maxit: usize,
    /// Total epochs over all stages; the run ends early when exhausted.
    pub epoch_budget: Option<usize>,
    pub seed: u64,
    /// Draws of alpha parameters per growth step before giving up.
    pub embed_retry_limit: usize,
    /// Number of equally wide hidden layers.
    pub hidden_layers: usize,
    /// Required for `hidden_layers > 1`.
    pub experimental_multilayer: bool,
    pub lbfgs: LbfgsConfig,
}

impl Default for ItaConfig {
    fn default() -> Self {
        Self {
            h0: 10,
            h_max: 100,
            growth: GrowthRule::DoubleEach,
            stage_tolerances: None,
            intermediate_rel_grad_factor: 1e-1,
            intermediate_loss_delta: 1e-2,
            loss_delta_mode: LossDeltaMode::Absolute,
            final_grad_tol: 1e-6,
            maxit_per_stage: 1000,
            final_maxit: 1000,
            epoch_budget: None,
            seed: 0,
            embed_retry_limit: 10,
            hidden_layers: 1,
            experimental_multilayer: false,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

impl ItaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.h0 == 0 || self.h0 > self.h_max {
            return bad(format!("need 1 <= h0 <= h_max, got h0={} h_max={}", self.h0, self.h_max));
        }
        match &self.growth {
            GrowthRule::FixedK(0) => return bad("fixed growth increment must be >= 1".into()),
            GrowthRule::Schedule(ks) if ks.is_empty() || ks.contains(&0) => {
                return bad("growth schedule must be nonempty with entries >= 1".into())
            }
            _ => {}
        }
        let f = self.intermediate_rel_grad_factor;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("intermediate_rel_grad_factor must lie in (0, 1], got {f}"));
        }
        if !(self.intermediate_loss_delta >= 0.0) {
            return bad("intermediate_loss_delta must be >= 0".into());
        }
        if !(self.final_grad_tol >= 0.0) {
            return bad("final_grad_tol must be >= 0".into());
        }
        if let Some(taus) = &self.stage_tolerances {
            if taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                return bad("stage tolerances must be positive".into());
            }
        }
        if self.embed_retry_limit == 0 {
            return bad("embed_retry_limit must be >= 1".into());
        }
        if self.hidden_layers == 0 {
            return bad("hidden_layers must be >= 1".into());
        }
        if self.hidden_layers > 1 && !self.experimental_multilayer {
            return bad("growing several hidden layers requires experimental_multilayer".into());
        }
        self.lbfgs.validate()?;
        Ok(())
    }

    /// Hidden widths of successive stages, ending at `h_max`.
    pub fn stage_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.h0];
        let mut h = self.h0;
        while h < self.h_max {
            let k = self.growth.increment(widths.len() - 1, h).max(1);
            h = (h + k).min(self.h_max);
            widths.push(h);
        }
        widths
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ita,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub width: usize,
    pub start_risk: f64,
    pub end_risk: f64,
    pub start_grad_norm: f64,
    pub end_grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Alpha draws used to enter this stage; 0 for the first stage.
    pub embed_attempts: usize,
    /// `|start_risk - previous end_risk|`; absent for the first stage.
    pub boundary_gap: Option<f64>,
}

/// One metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Epoch { stage: usize, width: usize, epoch: usize, risk: f64, grad_norm: f64 },
    Growth {
        stage: usize,
        from_width: usize,
        to_width: usize,
        risk_before: f64,
        risk_after: f64,
        grad_norm_after: f64,
        /// Norm compared against `tau`.
        escape_norm: f64,
        tau: f64,
        attempts: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub method: Method,
    pub stages: Vec<StageRecord>,
    pub params: ParamVector,
    pub cumulative_epochs: usize,
    /// Risk after each epoch, preceded by the initial risk.
    pub loss_trace: Vec<f64>,
    pub events: Vec<TrainEvent>,
    /// False when the epoch budget ran out before the final stage finished.
    pub completed: bool,
}

impl TrainRun {
    pub fn final_risk(&self) -> f64 {
        *self.loss_trace.last().expect("trace holds the initial risk")
    }

    /// Risk after `epochs` epochs, or the final risk if the run was shorter.
    pub fn risk_at(&self, epochs: usize) -> f64 {
        self.loss_trace[epochs.min(self.loss_trace.len() - 1)]
    }

    /// Largest `boundary_gap` over all growth steps; 0 without growth.
    pub fn max_boundary_gap(&self) -> f64 {
        self.stages.iter().filter_map(|s| s.boundary_gap).fold(0.0, f64::max)
    }
}

fn hidden_topology(data: &Dataset, width: usize, hidden_layers: usize) -> Result<Topology> {
    let mut sizes = vec![data.input_dim()];
    sizes.extend(std::iter::repeat_n(width, hidden_layers));
    sizes.push(data.output_dim());
    Topology::new(&sizes)
}

struct StageLimits {
    max_iter: usize,
    grad_tol: f64,
    loss_delta: Option<(f64, LossDeltaMode)>,
}

struct Recorder {
    loss_trace: Vec<f64>,
    events: Vec<TrainEvent>,
    epochs: usize,
}

impl Recorder {
    fn new(initial_risk: f64, initial_grad: f64, width: usize) -> Self {
        Self {
            loss_trace: vec![initial_risk],
            events: vec![TrainEvent::Epoch { stage: 0, width, epoch: 0, risk: initial_risk, grad_norm: initial_grad }],
            epochs: 0,
        }
    }
}

/// Minimizes from `start` and appends every epoch to `rec`.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    start: ParamVector,
    start_state: (f64, f64),
    data: &Dataset,
    loss: &dyn Loss,
    act: &dyn Activation,
    base: &LbfgsConfig,
    limits: StageLimits,
    stage: usize,
    embed_attempts: usize,
    boundary_gap: Option<f64>,
    rec: &mut Recorder,
) -> Result<(ParamVector, StageRecord)> {
    let t = start.topology().clone();
    let width = t.width(1);
    let objective = |x: &[f64]| {
        let p = ParamVector::from_flat(&t, x.to_vec()).expect("optimizer preserves length");
        let (r, g) = risk_and_gradient(&p, data, loss, act).expect("dataset checked");
        (r, g.into_flat())
    };
    let cfg = LbfgsConfig { grad_tol_inf: limits.grad_tol, max_iter: limits.max_iter, ..base.clone() };
    let mut hook = |s: &IterationState<'_>| match limits.loss_delta {
        Some((delta, LossDeltaMode::Absolute)) => (s.value - s.previous_value).abs() <= delta,
        Some((delta, LossDeltaMode::Relative)) => (s.value - s.previous_value).abs() <= delta * s.previous_value.abs(),
        None => false,
    };
    let res = lbfgs_minimize(objective, start.into_flat(), &cfg, Some(&mut hook))?;
    for (i, (&risk, &grad_norm)) in res.f_history.iter().zip(&res.grad_history).enumerate().skip(1) {
        rec.loss_trace.push(risk);
        rec.events.push(TrainEvent::Epoch { stage, width, epoch: rec.epochs + i, risk, grad_norm });
    }
    rec.epochs += res.iterations;
    let record = StageRecord {
        stage,
        width,
        start_risk: start_state.0,
        end_risk: res.f_final,
        start_grad_norm: start_state.1,
        end_grad_norm: res.grad_norm_final,
        iterations: res.iterations,
        termination: res.termination,
        embed_attempts,
        boundary_gap,
    };
    Ok((ParamVector::from_flat(&t, res.x)?, record))
}

fn risk_and_norm(p: &ParamVector, data: &Dataset, loss: &dyn Loss, act: &dyn Activation) -> Result<(f64, f64)> {
    let (r, g) = risk_and_gradient(p, data, loss, act)?;
    Ok((r, g.norm_inf()))
}

/// Runs the incremental training algorithm on a network with
/// `cfg.hidden_layers` hidden layers of growing width.
pub fn ita_train(data: &Dataset, cfg: &ItaConfig, loss: &dyn Loss, act: &dyn Activation) -> Result<TrainRun> {
    cfg.validate()?;
    let widths = cfg.stage_widths();
    let t0 = hidden_topology(data, widths[0], cfg.hidden_layers)?;
    check_dataset(&t0, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamVector::uniform(&t0, &mut rng);
    let mut state = risk_and_norm(&params, data, loss, act)?;
    let mut rec = Recorder::new(state.0, state.1, widths[0]);
    let mut stages = Vec::with_capacity(widths.len());
    let mut embed_attempts = 0;
    let mut boundary_gap = None;
    let mut completed = false;

    for (k, &width) in widths.iter().enumerate() {
        let remaining = cfg.epoch_budget.map_or(usize::MAX, |b| b.saturating_sub(rec.epochs));
        let is_final = k + 1 == widths.len();
        let scheduled_tau = cfg.stage_tolerances.as_ref().map(|taus| *taus.get(k).or(taus.last()).expect("validated nonempty"));
        let limits = if is_final {
            StageLimits { max_iter: cfg.final_maxit.min(remaining), grad_tol: cfg.final_grad_tol, loss_delta: None }
        } else {
            StageLimits {
                max_iter: cfg.maxit_per_stage.min(remaining),
                grad_tol: scheduled_tau.unwrap_or(cfg.intermediate_rel_grad_factor * state.1),
                loss_delta: Some((cfg.intermediate_loss_delta, cfg.loss_delta_mode)),
            }
        };
        let (trained, record) = run_stage(
            params,
            state,
            data,
            loss,
            act,
            &cfg.lbfgs,
            limits,
            k,
            embed_attempts,
            boundary_gap,
            &mut rec,
        )?;
        params = trained;
        state = (record.end_risk, record.end_grad_norm);
        stages.push(record);
        if is_final {
            completed = cfg.epoch_budget.is_none_or(|b| rec.epochs < b) || state.1 <= cfg.final_grad_tol;
            break;
        }
        if cfg.epoch_budget.is_some_and(|b| rec.epochs >= b) {
            break;
        }

        let tau = match scheduled_tau {
            Some(tau) => tau,
            None => risk_and_gradient(&params, data, loss, act)?.1.norm_l2(),
        };
        let next = widths[k + 1];
        let plan = CompositePlan::uniform(
            MapKind::Alpha,
            &(1..=cfg.hidden_layers).map(|l| (l, next - width)).collect::<Vec<_>>(),
        );
        let mut grown = None;
        for attempt in 1..=cfg.embed_retry_limit {
            let mut source = RandomParams { rng: &mut rng, options: RandomOptions::default() };
            let candidate = embed_composite(&params, &plan, &mut source, act)?.params;
            let (risk, grad) = risk_and_gradient(&candidate, data, loss, act)?;
            let gap = (risk - state.0).abs();
            if gap > CONTINUITY_TOL {
                return Err(Error::ContinuityViolation { width: next, gap });
            }
            let escape_norm = if scheduled_tau.is_some() { grad.norm_inf() } else { grad.norm_l2() };
            if escape_norm > tau {
                grown = Some((candidate, (risk, grad.norm_inf()), escape_norm, attempt, gap));
                break;
            }
        }
        let Some((candidate, grown_state, escape_norm, attempts, gap)) = grown else {
            return Err(Error::EmbedEscapeFailure { width: next, attempts: cfg.embed_retry_limit, tau });
        };
        rec.events.push(TrainEvent::Growth {
            stage: k + 1,
            from_width: width,
            to_width: next,
            risk_before: state.0,
            risk_after: grown_state.0,
            grad_norm_after: grown_state.1,
            escape_norm,
            tau,
            attempts,
        });
        params = candidate;
        state = grown_state;
        embed_attempts = attempts;
        boundary_gap = Some(gap);
    }

    Ok(TrainRun {
        method: Method::Ita,
        stages,
        params,
        cumulative_epochs: rec.epochs,
        loss_trace: rec.loss_trace,
        events: rec.events,
        completed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandardConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub grad_tol: f64,
    pub maxit: usize,
    pub seed: u64,
    pub lbfgs: LbfgsConfig,
}

impl Default for StandardConfig {
    fn default() -> Self {
        Self { hidden: 100, hidden_layers: 1, grad_tol: 1e-6, maxit: 1000, seed: 0, lbfgs: LbfgsConfig::default() }
    }
}

impl StandardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden_layers == 0 {
            return Err(Error::InvalidArgument("hidden width and layer count must be >= 1".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::InvalidArgument("grad_tol must be >= 0".into()));
        }
        self.lbfgs.validate()?;
        Ok(())
    }
}

/// One L-BFGS run at fixed width from a seeded `U(0,1)` start.
pub fn standard_train(data: &Dataset, cfg: &StandardConfig, loss: &dyn Loss, act: &dyn Activation) -> Result<TrainRun> {
    cfg.validate()?;
    let t = hidden_topology(data, cfg.hidden, cfg.hidden_layers)?;
    check_dataset(&t, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ParamVector::uniform(&t, &mut rng);
    let state = risk_and_norm(&params, data, loss, act)?;
    let mut rec = Recorder::new(state.0, state.1, cfg.hidden);
    let limits = StageLimits { max_iter: cfg.maxit, grad_tol: cfg.grad_tol, loss_delta: None };
    let (params, record) = run_stage(params, state, data, loss, act, &cfg.lbfgs, limits, 0, 0, None, &mut rec)?;
    Ok(TrainRun {
        method: Method::Standard,
        stages: vec![record],
        params,
        cumulative_epochs: rec.epochs,
        loss_trace: rec.loss_trace,
        events: rec.events,
        completed: true,
    })
}
