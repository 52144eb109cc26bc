//! Windowed N-step loss, AdamW, the training loop and the restart sweep.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::autodiff::{five_point, RowMap, Tape, Var};
use crate::constraints::{BoundSeq, BoundSpec, ResolvedBounds};
use crate::error::{Error, Result};
use crate::models::{
    init_params, register, rollout_on_tape, stack_initial_states, AlgebraicVariant, EncodedSignals,
    Model, ModelParams, ModelSpec, ParamVars, RolloutResult, WindowPlan,
};
use crate::numerics::{DenseMatrix, SeededRng};
use crate::plant::{Dataset, Partition, PlantSystem, SignalSet, OBSERVED_STATE, STATE_DIM};

/// Horizons of the full protocol.
pub const HORIZONS: [usize; 5] = [8, 16, 32, 64, 128];

/// One N-step training window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Step of the partition the window starts at.
    pub start: usize,
    pub x0: Vec<f64>,
    /// `N` steps of signals.
    pub signals: SignalSet,
    /// Observed state at steps `start + 1 ..= start + N`.
    pub target: Vec<f64>,
}

/// Overlapping stride-1 windows: `T - N + 1` of them.
pub fn make_windows(part: &Partition, horizon: usize, observed: usize) -> Result<Vec<Window>> {
    let plan = WindowPlan::strided(part.len(), horizon, 1)?;
    Ok(plan
        .starts
        .iter()
        .map(|&s| Window {
            start: s,
            x0: part.states.row_slice(s).to_vec(),
            signals: part.signals.window(s, s + horizon),
            target: (s + 1..=s + horizon).map(|k| part.states[(k, observed)]).collect(),
        })
        .collect())
}

/// Loss of a batch of plain rollouts against their targets.
///
/// Per window this is `(1/N) sum_k (fit_k^2 + lambda |s_x,k|^2 + mu s_u,k^2)`
/// with the fit on the observed state only; the result is the mean over
/// windows.
pub fn nstep_loss(
    rollouts: &[RolloutResult],
    targets: &[Vec<f64>],
    observed: usize,
    lambda: f64,
    mu: f64,
) -> Result<f64> {
    if rollouts.len() != targets.len() || rollouts.is_empty() {
        return Err(Error::dim(
            "nstep_loss",
            format!("{} rollouts vs {} targets", rollouts.len(), targets.len()),
        ));
    }
    let mut total = 0.0;
    for (r, t) in rollouts.iter().zip(targets) {
        let n = t.len();
        if r.states.rows() != n + 1 || r.slack_u.len() != n || r.slack_x.rows() != n {
            return Err(Error::dim(
                "nstep_loss",
                format!("rollout of {} states vs target of {n}", r.states.rows()),
            ));
        }
        let mut acc = 0.0;
        for k in 0..n {
            let e = r.states[(k + 1, observed)] - t[k];
            let sx: f64 = r.slack_x.row_slice(k).iter().map(|s| s * s).sum();
            acc += e * e + lambda * sx + mu * r.slack_u[k] * r.slack_u[k];
        }
        total += acc / n as f64;
    }
    Ok(total / rollouts.len() as f64)
}

/// All windows of one partition prepared for batched rollouts.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub plan: WindowPlan,
    /// `W x 4` initial states.
    pub x0: DenseMatrix,
    /// `(T+1) x 1` observed state of the partition.
    pub observed: DenseMatrix,
    pub signals: SignalSet,
}

impl WindowBatch {
    pub fn new(part: &Partition, horizon: usize, stride: usize, observed: usize) -> Result<Self> {
        if observed >= STATE_DIM {
            return Err(Error::Argument(format!("observed index {observed} out of range")));
        }
        let plan = WindowPlan::strided(part.len(), horizon, stride)?;
        let x0 = stack_initial_states(&part.states, &plan);
        let observed = DenseMatrix::column(&part.states.column_values(observed));
        Ok(WindowBatch {
            plan,
            x0,
            observed,
            signals: part.signals.clone(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.plan.horizon
    }
}

/// Terms of the batched loss recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    /// Mean squared observed-state error, without penalties.
    pub fit: Var,
}

/// Records the batched N-step loss of `model` on `batch`.
pub fn nstep_loss_on_tape(
    tape: &mut Tape,
    model: &Model,
    params_trainable: impl Fn(&str) -> bool,
    batch: &WindowBatch,
    bounds: Option<&ResolvedBounds>,
    observed: usize,
) -> Result<(LossVars, ParamVars)> {
    let vars = register(&model.params, tape, params_trainable);
    let sig = EncodedSignals::new(tape, &batch.signals);
    let roll = rollout_on_tape(tape, model, &vars, &sig, &batch.x0, &batch.plan)?;
    let target = tape.constant(batch.observed.clone());
    let n = batch.horizon();
    let w = batch.plan.len();
    let norm = 1.0 / (n * w) as f64;
    let rows = batch.plan.rows();
    let shifted = |offset: usize| RowMap::Shifted {
        rows: rows.clone(),
        offset,
    };

    let mut fit: Option<Var> = None;
    let mut penalty: Option<Var> = None;
    let push = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    for j in 1..=n {
        let sq = tape.column_error(roll.states[j], target, observed, shifted(j))?;
        push(tape, &mut fit, sq)?;
    }
    if let Some(b) = bounds {
        let t = batch.signals.len();
        let keep = |m: &DenseMatrix, rows: usize| {
            if b.time_invariant {
                m.rows_range(0, 1)
            } else {
                m.rows_range(0, rows)
            }
        };
        let xl = tape.constant(keep(&b.x_lower, t + 1));
        let xu = tape.constant(keep(&b.x_upper, t + 1));
        let mut state_pen: Option<Var> = None;
        for j in 1..=n {
            let map = if b.time_invariant { RowMap::Broadcast } else { shifted(j) };
            let sq = tape.bound_penalty(roll.states[j], xl, xu, map, None)?;
            push(tape, &mut state_pen, sq)?;
        }
        let state_pen = tape.scale(state_pen.expect("horizon is positive"), b.lambda)?;
        push(tape, &mut penalty, state_pen)?;

        // Each input step enters once per window that covers it.
        let mut cover = vec![0.0; t + 1];
        for &s in batch.plan.starts.iter() {
            cover[s] += 1.0;
            cover[s + n] -= 1.0;
        }
        let mut running = 0.0;
        let weights: Arc<[f64]> = cover[..t]
            .iter()
            .map(|c| {
                running += c;
                running
            })
            .collect();
        let ul = tape.constant(keep(&b.u_lower, t));
        let uu = tape.constant(keep(&b.u_upper, t));
        let map = if b.time_invariant { RowMap::Broadcast } else { RowMap::identity(t) };
        let sq = tape.bound_penalty(roll.u, ul, uu, map, Some(weights))?;
        let input_pen = tape.scale(sq, b.mu)?;
        push(tape, &mut penalty, input_pen)?;
    }
    let fit = tape.scale(fit.expect("horizon is positive"), norm)?;
    let total = match penalty {
        Some(p) => {
            let p = tape.scale(p, norm)?;
            tape.add(fit, p)?
        }
        None => fit,
    };
    Ok((LossVars { total, fit }, vars))
}

/// Mean observed-state MSE over the windows of `batch`; no penalties.
pub fn batch_fit_mse(model: &Model, batch: &WindowBatch, observed: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = nstep_loss_on_tape(&mut tape, model, |_| false, batch, None, observed)?;
    tape.value(loss.fit).to_scalar()
}

/// Worst relative disagreement between tape gradients of the batched
/// loss and central differences over every parameter entry.
pub fn loss_gradient_error(
    model: &Model,
    batch: &WindowBatch,
    bounds: Option<&ResolvedBounds>,
    observed: usize,
    eps: f64,
) -> Result<f64> {
    let loss_at = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = nstep_loss_on_tape(&mut tape, m, |_| false, batch, bounds, observed)?;
        tape.value(loss.total).to_scalar()
    };
    let mut tape = Tape::new();
    let (loss, vars) = nstep_loss_on_tape(&mut tape, model, |_| true, batch, bounds, observed)?;
    let grads = tape.backward(loss.total)?;
    let analytic: Vec<DenseMatrix> = vars
        .iter()
        .map(|(_, v)| grads.get(v).cloned().unwrap_or_else(|| DenseMatrix::zeros(v.rows(), v.cols())))
        .collect();

    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let x = work.params.entries_mut()[i].1.as_slice()[k];
            let mut at = |h: f64| -> Result<f64> {
                work.params.entries_mut()[i].1.as_mut_slice()[k] = x + h;
                loss_at(&work)
            };
            let fd = five_point(&mut at, eps)?;
            work.params.entries_mut()[i].1.as_mut_slice()[k] = x;
            let ad = g.as_slice()[k];
            worst = worst.max((ad - fd).abs() / (1e-8 + ad.abs() + fd.abs()));
        }
    }
    Ok(worst)
}

/// Gradient check of the full `horizon`-step loss for every variant on a
/// short simulated stretch of the default plant, without bounds, with
/// tight constant bounds and with tight per-step bounds. Returns
/// `(case label, worst relative error)`.
pub fn rollout_gradient_errors(horizon: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let plant = PlantSystem::default_building();
    let mut rng = SeededRng::new(seed);
    let steps = horizon + 12;
    let signals = plant.generate_signals(steps, &mut rng)?;
    let states = plant.simulate(&[20.0; STATE_DIM], &signals)?;
    let part = Partition::new(0, states, signals)?;
    let batch = WindowBatch::new(&part, horizon, 1, OBSERVED_STATE)?;

    let u_max = 0.05 * plant.heat_input_bound();
    let tight = BoundSpec {
        x_lower: BoundSeq::Constant(vec![19.5; STATE_DIM]),
        x_upper: BoundSeq::Constant(vec![20.5; STATE_DIM]),
        u_lower: BoundSeq::Constant(vec![-u_max]),
        u_upper: BoundSeq::Constant(vec![u_max]),
        lambda: 0.7,
        mu: 1e-6,
    };
    let wavy = |lo: f64, width: usize, rows: usize, rng: &mut SeededRng| -> Result<BoundSeq> {
        Ok(BoundSeq::PerStep(rng.uniform(lo, lo + 1.0, rows, width)?))
    };
    let per_step = BoundSpec {
        x_lower: wavy(19.0, STATE_DIM, steps + 1, &mut rng)?,
        x_upper: wavy(20.5, STATE_DIM, steps + 1, &mut rng)?,
        u_lower: BoundSeq::PerStep(rng.uniform(-u_max, 0.0, steps, 1)?),
        u_upper: BoundSeq::PerStep(rng.uniform(0.0, u_max, steps, 1)?),
        lambda: 1.3,
        mu: 1e-6,
    };
    let cases = [("free", None), ("constant", Some(tight)), ("per_step", Some(per_step))];

    let mut out = Vec::new();
    for variant in AlgebraicVariant::ALL {
        for (name, bounds) in &cases {
            let spec = ModelSpec::new(variant, bounds.is_some());
            let params = init_params(&spec, &mut rng)?;
            let model = Model { spec, params };
            let resolved = bounds.as_ref().map(|b| b.resolve(steps)).transpose()?;
            let err = loss_gradient_error(&model, &batch, resolved.as_ref(), OBSERVED_STATE, 1e-4)?;
            out.push((format!("{}_{name}", variant.name()), err));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWSettings {
    fn default() -> Self {
        AdamWSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter AdamW moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub m: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let entries = params.entries();
        OptimizerState {
            m: entries.iter().map(|(_, p)| DenseMatrix::zeros(p.rows(), p.cols())).collect(),
            v: entries.iter().map(|(_, p)| DenseMatrix::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }
    }
}

/// AdamW update of a flat slice with bias-corrected moments and decoupled
/// weight decay. `t` is the 1-based step number.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamWSettings,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
}

/// One AdamW step over every parameter that received a gradient.
/// `grads` is aligned with [`ModelParams::entries`]; frozen entries are
/// `None` and stay untouched.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Option<DenseMatrix>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWSettings,
) -> Result<()> {
    let mut entries = params.entries_mut();
    if grads.len() != entries.len() || state.m.len() != entries.len() {
        return Err(Error::dim(
            "adamw_step",
            format!("{} parameters, {} gradients", entries.len(), grads.len()),
        ));
    }
    for (g, (name, p)) in grads.iter().zip(&entries) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adamw_step",
                    format!("gradient of {name} is {:?}, parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numeric {
                    context: format!("gradient of {name}"),
                    step: Some(state.t as usize),
                });
            }
        }
    }
    state.t += 1;
    for (i, (_, p)) in entries.iter_mut().enumerate() {
        if let Some(g) = &grads[i] {
            adamw_update(
                p.as_mut_slice(),
                g.as_slice(),
                state.m[i].as_mut_slice(),
                state.v[i].as_mut_slice(),
                state.t,
                lr,
                cfg,
            );
        }
    }
    Ok(())
}

/// Settings for a single training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub horizon: usize,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub adamw: AdamWSettings,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Parameter names excluded from optimisation.
    #[serde(default)]
    pub freeze: Vec<String>,
}

fn default_stride() -> usize {
    1
}

fn default_eval_every() -> usize {
    100
}

impl TrainConfig {
    pub fn new(horizon: usize, epochs: usize, lr: f64) -> Self {
        TrainConfig {
            horizon,
            epochs,
            lr,
            adamw: AdamWSettings::default(),
            stride: 1,
            eval_every: 100,
            freeze: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr < 1.0) {
            return Err(Error::Config(format!("learning rate {} outside [0, 1)", self.lr)));
        }
        if self.stride == 0 || self.eval_every == 0 {
            return Err(Error::Config("stride and eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    /// Training loss before each update.
    pub loss_trace: Vec<f64>,
    /// `(epoch, validation N-step MSE)` at every evaluation.
    pub val_trace: Vec<(usize, f64)>,
    pub best_val: f64,
    pub best_epoch: usize,
    /// Parameters at the best validation evaluation.
    pub model: Model,
    /// Epoch at which the loss or a gradient became non-finite.
    pub diverged_at: Option<usize>,
    pub wall_seconds: f64,
}

/// Trains a freshly initialised model.
pub fn train(
    spec: &ModelSpec,
    config: &TrainConfig,
    dataset: &Dataset,
    bounds: &BoundSpec,
    rng: &mut SeededRng,
) -> Result<TrainRecord> {
    let params = init_params(spec, rng)?;
    train_from(
        Model {
            spec: spec.clone(),
            params,
        },
        config,
        dataset,
        bounds,
    )
}

/// Trains from the given parameters with full-batch AdamW, keeping the
/// parameters with the best validation N-step MSE.
pub fn train_from(
    model: Model,
    config: &TrainConfig,
    dataset: &Dataset,
    bounds: &BoundSpec,
) -> Result<TrainRecord> {
    config.validate()?;
    model.validate()?;
    let clock = Instant::now();
    let observed = dataset.observed_index;
    let train_batch = WindowBatch::new(&dataset.train, config.horizon, config.stride, observed)?;
    let val_batch = WindowBatch::new(&dataset.val, config.horizon, 1, observed)?;
    let resolved = if model.spec.constrained {
        Some(bounds.resolve(dataset.train.len())?)
    } else {
        None
    };
    let frozen = |name: &str| config.freeze.iter().any(|f| f == name);
    if let Some(bad) = config
        .freeze
        .iter()
        .find(|f| !model.params.entries().iter().any(|(n, _)| n == f))
    {
        return Err(Error::Config(format!("cannot freeze unknown parameter {bad}")));
    }

    let mut current = model;
    let mut state = OptimizerState::new(&current.params);
    let mut record = TrainRecord {
        loss_trace: Vec::with_capacity(config.epochs),
        val_trace: Vec::new(),
        best_val: f64::INFINITY,
        best_epoch: 0,
        model: current.clone(),
        diverged_at: None,
        wall_seconds: 0.0,
    };
    let consider = |record: &mut TrainRecord, epoch: usize, m: &Model| {
        let val = batch_fit_mse(m, &val_batch, observed).unwrap_or(f64::INFINITY);
        let val = if val.is_finite() { val } else { f64::INFINITY };
        record.val_trace.push((epoch, val));
        if val < record.best_val || record.val_trace.len() == 1 {
            record.best_val = val;
            record.best_epoch = epoch;
            record.model = m.clone();
        }
    };

    for epoch in 0..config.epochs {
        if epoch % config.eval_every == 0 {
            consider(&mut record, epoch, &current);
        }
        let mut tape = Tape::new();
        let step = nstep_loss_on_tape(
            &mut tape,
            &current,
            |n| !frozen(n),
            &train_batch,
            resolved.as_ref(),
            observed,
        );
        let (loss, vars) = match step {
            Ok(v) => v,
            Err(Error::Numeric { .. }) => {
                record.diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        let value = tape.value(loss.total).to_scalar()?;
        if !value.is_finite() {
            record.diverged_at = Some(epoch);
            break;
        }
        record.loss_trace.push(value);
        let grads = tape.backward(loss.total)?;
        let aligned: Vec<Option<DenseMatrix>> =
            vars.iter().map(|(_, v)| grads.get(v).cloned()).collect();
        match adamw_step(&mut current.params, &aligned, &mut state, config.lr, &config.adamw) {
            Ok(()) => {}
            Err(Error::Numeric { .. }) => {
                record.diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        }
        if !current.params.is_finite() {
            record.diverged_at = Some(epoch);
            break;
        }
    }
    if record.diverged_at.is_none() {
        consider(&mut record, config.epochs, &current);
    }
    record.wall_seconds = clock.elapsed().as_secs_f64();
    Ok(record)
}

/// Epoch and restart counts of a run scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

impl Scale {
    pub fn epochs(self) -> usize {
        match self {
            Scale::Desk => 2000,
            Scale::Paper => 15000,
        }
    }

    pub fn restarts(self) -> usize {
        match self {
            Scale::Desk => 3,
            Scale::Paper => 30,
        }
    }

    pub fn learning_rates(self) -> Vec<f64> {
        match self {
            Scale::Desk => vec![0.003, 0.01, 0.03],
            Scale::Paper => vec![0.001, 0.003, 0.01, 0.03],
        }
    }
}

/// Grid of a training sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub specs: Vec<ModelSpec>,
    pub horizons: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub restarts: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adamw: AdamWSettings,
    pub stride: usize,
    pub bounds: BoundSpec,
}

/// Identity of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: AlgebraicVariant,
    pub constrained: bool,
    pub horizon: usize,
    pub lr: f64,
    pub restart: usize,
}

impl CellKey {
    pub fn spec_label(&self) -> String {
        ModelSpec::new(self.variant, self.constrained).label()
    }

    /// File-system safe identifier, stable across runs.
    pub fn slug(&self) -> String {
        format!(
            "{}_{}_N{}_lr{}_r{}",
            self.variant.name(),
            if self.constrained { "c" } else { "u" },
            self.horizon,
            self.lr,
            self.restart
        )
    }
}

/// Metrics of a finished cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub nstep_mse_val: f64,
    pub nstep_mse_test: f64,
    pub openloop_mse_test: f64,
    /// `None` on success, else why the cell failed.
    pub failure: Option<String>,
}

impl SweepConfig {
    pub fn cells(&self) -> Vec<(ModelSpec, CellKey)> {
        let mut out = Vec::new();
        for spec in &self.specs {
            for &horizon in &self.horizons {
                for &lr in &self.learning_rates {
                    for restart in 0..self.restarts {
                        out.push((
                            spec.clone(),
                            CellKey {
                                variant: spec.variant,
                                constrained: spec.constrained,
                                horizon,
                                lr,
                                restart,
                            },
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Trains and evaluates one cell. Initial parameters depend only on the
/// sweep seed, the variant and the restart index, so constrained and
/// unconstrained twins and different horizons start from the same draw.
pub fn run_cell(
    cfg: &SweepConfig,
    spec: &ModelSpec,
    key: &CellKey,
    dataset: &Dataset,
) -> (CellResult, Option<Model>) {
    let attempt = || -> Result<(CellResult, Model)> {
        let mut rng = SeededRng::new(cfg.seed).split(key.restart as u64);
        let mut tc = TrainConfig::new(key.horizon, cfg.epochs, key.lr);
        tc.adamw = cfg.adamw;
        tc.stride = cfg.stride;
        let rec = train(spec, &tc, dataset, &cfg.bounds, &mut rng)?;
        let observed = dataset.observed_index;
        let test_batch = WindowBatch::new(&dataset.test, key.horizon, 1, observed)?;
        let nstep_test = batch_fit_mse(&rec.model, &test_batch, observed).unwrap_or(f64::INFINITY);
        let open = crate::analysis::open_loop_mse(&rec.model, &dataset.test, observed)?;
        let failure = rec
            .diverged_at
            .map(|e| format!("training diverged at epoch {e}"));
        Ok((
            CellResult {
                key: key.clone(),
                nstep_mse_val: rec.best_val,
                nstep_mse_test: sanitize(nstep_test),
                openloop_mse_test: open.mse,
                failure,
            },
            rec.model,
        ))
    };
    match attempt() {
        Ok((r, m)) => (r, Some(m)),
        Err(e) => (
            CellResult {
                key: key.clone(),
                nstep_mse_val: f64::INFINITY,
                nstep_mse_test: f64::INFINITY,
                openloop_mse_test: f64::INFINITY,
                failure: Some(e.to_string()),
            },
            None,
        ),
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Runs every cell on a pool of `jobs` workers. Results come back in cell
/// order regardless of scheduling. `skip` marks cells already completed;
/// `on_done` is called from the worker that finished a cell.
pub fn sweep<S, F>(
    cfg: &SweepConfig,
    dataset: &Dataset,
    jobs: usize,
    skip: S,
    on_done: F,
) -> Result<Vec<CellResult>>
where
    S: Fn(&CellKey) -> Option<CellResult> + Sync,
    F: Fn(&CellResult, Option<&Model>) + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let cells = cfg.cells();
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|(spec, key)| {
                if let Some(done) = skip(key) {
                    return done;
                }
                let (res, model) = run_cell(cfg, spec, key, dataset);
                on_done(&res, model.as_ref());
                res
            })
            .collect()
    }))
}

/// Best cell per `(variant, constrained, N)` by validation N-step MSE, in
/// first-appearance order. Ties keep the earlier cell.
pub fn best_cells(results: &[CellResult]) -> Vec<CellResult> {
    let mut best: Vec<CellResult> = Vec::new();
    for r in results {
        let same = |b: &CellResult| {
            b.key.variant == r.key.variant
                && b.key.constrained == r.key.constrained
                && b.key.horizon == r.key.horizon
        };
        match best.iter_mut().find(|b| same(b)) {
            Some(b) => {
                if r.nstep_mse_val < b.nstep_mse_val {
                    *b = r.clone();
                }
            }
            None => best.push(r.clone()),
        }
    }
    best
}

pub const RESULTS_HEADER: [&str; 8] = [
    "variant",
    "constrained",
    "N",
    "lr",
    "restart",
    "nstep_mse_val",
    "nstep_mse_test",
    "openloop_mse_test",
];

/// Writes the results table.
pub fn write_results_csv<W: std::io::Write>(results: &[CellResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let wrap = |e: csv::Error| Error::Validation(format!("results csv: {e}"));
    out.write_record(RESULTS_HEADER).map_err(wrap)?;
    for r in results {
        out.write_record([
            r.key.variant.name().to_string(),
            r.key.constrained.to_string(),
            r.key.horizon.to_string(),
            format!("{:?}", r.key.lr),
            r.key.restart.to_string(),
            format!("{:?}", r.nstep_mse_val),
            format!("{:?}", r.nstep_mse_test),
            format!("{:?}", r.openloop_mse_test),
        ])
        .map_err(wrap)?;
    }
    out.flush()
        .map_err(|e| Error::Validation(format!("results csv: {e}")))?;
    Ok(())
}

/// Reads a results table written by [`write_results_csv`].
pub fn read_results_csv<R: std::io::Read>(r: R) -> Result<Vec<CellResult>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != RESULTS_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", RESULTS_HEADER.len(), rec.len()),
            });
        }
        let num = |j: usize| -> Result<f64> {
            rec[j].parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("{}: {e}", RESULTS_HEADER[j]),
            })
        };
        let int = |j: usize| -> Result<usize> {
            rec[j].parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("{}: {e}", RESULTS_HEADER[j]),
            })
        };
        out.push(CellResult {
            key: CellKey {
                variant: AlgebraicVariant::parse(&rec[0]).map_err(|e| Error::Parse {
                    line,
                    message: e.to_string(),
                })?,
                constrained: rec[1].parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("constrained: {:?}", &rec[1]),
                })?,
                horizon: int(2)?,
                lr: num(3)?,
                restart: int(4)?,
            },
            nstep_mse_val: num(5)?,
            nstep_mse_test: num(6)?,
            openloop_mse_test: num(7)?,
            failure: None,
        });
    }
    Ok(out)
}

/// Convenience used by the loss checks: windows of a partition as plain
/// rollouts of `model`.
pub fn rollout_windows(
    model: &Model,
    windows: &[Window],
    bounds: Option<&ResolvedBounds>,
) -> Result<Vec<RolloutResult>> {
    windows
        .iter()
        .map(|w| {
            let local = bounds.map(|b| ResolvedBounds {
                x_lower: b.x_lower.rows_range(w.start, w.start + w.signals.len() + 1),
                x_upper: b.x_upper.rows_range(w.start, w.start + w.signals.len() + 1),
                u_lower: b.u_lower.rows_range(w.start, w.start + w.signals.len()),
                u_upper: b.u_upper.rows_range(w.start, w.start + w.signals.len()),
                lambda: b.lambda,
                mu: b.mu,
                time_invariant: b.time_invariant,
            });
            model.rollout(&w.x0, &w.signals, w.signals.len(), local.as_ref())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn four_step_loss_gradients_match_central_differences() {
        for (case, err) in super::rollout_gradient_errors(4, 11).unwrap() {
            assert!(err < 1e-4, "{case}: {err}");
        }
    }

    use super::*;

    fn result(states: Vec<Vec<f64>>, slack_x: Vec<Vec<f64>>, slack_u: Vec<f64>) -> RolloutResult {
        RolloutResult {
            u_seq: vec![0.0; slack_u.len()],
            states: DenseMatrix::from_rows(&states).unwrap(),
            slack_x: DenseMatrix::from_rows(&slack_x).unwrap(),
            slack_u,
        }
    }

    #[test]
    fn loss_examples() {
        let perfect = result(vec![vec![0.0; 4], vec![0.0, 0.0, 0.0, 1.0]], vec![vec![0.0; 4]], vec![0.0]);
        assert_eq!(nstep_loss(&[perfect], &[vec![1.0]], 3, 1.0, 1.0).unwrap(), 0.0);
        let off = result(vec![vec![0.0; 4], vec![0.0, 0.0, 0.0, 3.0]], vec![vec![0.0; 4]], vec![5.0]);
        assert_eq!(nstep_loss(&[off], &[vec![1.0]], 3, 0.0, 0.0).unwrap(), 4.0);
        let slack = result(vec![vec![0.0; 4], vec![0.0; 4]], vec![vec![0.0, 1.0, 0.0, 0.0]], vec![0.0]);
        assert_eq!(nstep_loss(&[slack], &[vec![0.0]], 3, 0.5, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn adamw_first_step() {
        let cfg = AdamWSettings {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut th, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_update(&mut th, &[1.0], &mut m, &mut v, 1, 0.01, &cfg);
        assert!((th[0] - (1.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adamw_pure_decay() {
        let cfg = AdamWSettings::default();
        let (mut th, mut m, mut v) = ([2.0, -3.0], [0.0; 2], [0.0; 2]);
        adamw_update(&mut th, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &cfg);
        assert_eq!(th, [2.0 * (1.0 - 0.001), -3.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn adamw_elementwise() {
        let cfg = AdamWSettings::default();
        let (mut th, mut m, mut v) = ([0.5, 0.5], [0.1, 0.1], [0.2, 0.2]);
        for t in 1..5 {
            adamw_update(&mut th, &[0.3, 0.3], &mut m, &mut v, t, 0.01, &cfg);
        }
        assert_eq!(th[0], th[1]);
    }

    #[test]
    fn window_alignment() {
        let plant = crate::plant::PlantSystem::default_building();
        let ds = plant.make_dataset(&mut SeededRng::new(0)).unwrap();
        let ws = make_windows(&ds.train, 128, 3).unwrap();
        assert_eq!(ws.len(), 1889);
        assert_eq!(ws[5].target[0], ds.train.states[(6, 3)]);
        assert_eq!(ws[5].x0, ds.train.states.row_slice(5));
        assert!(make_windows(&ds.train, 2017, 3).is_err());
    }

    #[test]
    fn result_csv_round_trip() {
        let rows = vec![CellResult {
            key: CellKey {
                variant: AlgebraicVariant::Gray,
                constrained: true,
                horizon: 8,
                lr: 0.01,
                restart: 2,
            },
            nstep_mse_val: 0.125,
            nstep_mse_test: 1.0 / 3.0,
            openloop_mse_test: f64::INFINITY,
            failure: None,
        }];
        let mut buf = Vec::new();
        write_results_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("variant,constrained,N,lr,restart,nstep_mse_val,nstep_mse_test,openloop_mse_test\n"));
        assert_eq!(read_results_csv(&buf[..]).unwrap(), rows);
    }
}
