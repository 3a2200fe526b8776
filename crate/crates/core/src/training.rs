//! Windowed datasets, losses, the Adam optimizer and the training loop.

use crate::burgers1d::BurgersTapeRhs;
use crate::forecast::spectral_mse;
use crate::ns2d::NsTapeRhs;
use crate::spectral::ModeGrid;
use crate::trajectory::{PdeKind, SolverError, Trajectory};
use crate::transformer::{
    forward, predict, push_step, retained_indices, state_features, symmetrize_prediction,
    ModelConfig, ModelError, ModelParams, ParamVars,
};
use fst_tensor::{compare_gradients, GradCheckReport, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("insufficient samples: {available} in range, need at least {needed}")]
    InsufficientSamples { available: usize, needed: usize },
    #[error("non-finite gradient for `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Box<ModelParams>,
    },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Sliding windows of `S` consecutive samples and their successor.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    traj: Arc<Trajectory>,
    model: ModelConfig,
    t_norm: f64,
    /// Trajectory index of the first state of window 0.
    start: usize,
    count: usize,
    /// Retained-mode features of every trajectory state used by the windows.
    features: Vec<Vec<f64>>,
}

/// Windows whose inputs and targets all lie in `t_range`.
pub fn build_windows(
    traj: Arc<Trajectory>,
    model: &ModelConfig,
    t_range: (f64, f64),
    t_norm: f64,
) -> Result<WindowedDataset, TrainError> {
    model.validate()?;
    if !(t_norm > 0.0) {
        return Err(TrainError::Invalid("t_norm must be positive".into()));
    }
    let s = model.seq_len;
    let range = traj.indices_in(t_range.0, t_range.1);
    if range.len() < s + 1 {
        return Err(TrainError::InsufficientSamples {
            available: range.len(),
            needed: s + 1,
        });
    }
    let grid = traj.states[0].grid();
    if traj.states[0].n_fields() != model.n_fields() {
        return Err(TrainError::Invalid(format!(
            "trajectory has {} components, model expects {}",
            traj.states[0].n_fields(),
            model.n_fields()
        )));
    }
    let retained = retained_indices(grid, &model.mode_dims)?;
    let features = traj.states[range.clone()]
        .iter()
        .map(|st| state_features(st, &retained))
        .collect();
    Ok(WindowedDataset {
        model: model.clone(),
        t_norm,
        start: range.start,
        count: range.len() - s,
        features,
        traj,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn trajectory(&self) -> &Arc<Trajectory> {
        &self.traj
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn t_norm(&self) -> f64 {
        self.t_norm
    }

    pub fn grid(&self) -> &ModeGrid {
        self.traj.states[0].grid()
    }

    /// Trajectory indices of the window's inputs.
    pub fn input_range(&self, w: usize) -> std::ops::Range<usize> {
        self.start + w..self.start + w + self.model.seq_len
    }

    /// Trajectory index of the window's target.
    pub fn target_index(&self, w: usize) -> usize {
        self.start + w + self.model.seq_len
    }

    pub fn target_time(&self, w: usize) -> f64 {
        self.traj.times[self.target_index(w)]
    }

    fn local(&self, traj_index: usize) -> &[f64] {
        &self.features[traj_index - self.start]
    }

    /// Model input `[len, S, step_features]` for the listed windows.
    pub fn inputs(&self, windows: &[usize]) -> Tensor {
        let m = &self.model;
        let mut data = Vec::with_capacity(windows.len() * m.seq_len * m.step_features());
        for &w in windows {
            for i in self.input_range(w) {
                push_step(&mut data, self.local(i), m.d_output, self.traj.times[i] / self.t_norm);
            }
        }
        Tensor::new(vec![windows.len(), m.seq_len, m.step_features()], data)
            .expect("window tensor shape")
    }

    /// Target features `[len, output_len]`.
    pub fn targets(&self, windows: &[usize]) -> Tensor {
        self.stack(windows.iter().map(|&w| self.target_index(w)))
    }

    /// Features of each window's most recent input `[len, output_len]`.
    pub fn last_inputs(&self, windows: &[usize]) -> Tensor {
        self.stack(windows.iter().map(|&w| self.target_index(w) - 1))
    }

    fn stack(&self, idx: impl Iterator<Item = usize>) -> Tensor {
        let data: Vec<f64> = idx.flat_map(|i| self.local(i).iter().copied()).collect();
        let n = data.len() / self.model.output_len();
        Tensor::new(vec![n, self.model.output_len()], data).expect("target shape")
    }
}

/// `(1/M) Σ |pred - target|²` over modes and components, averaged over the
/// batch. Inputs are `[batch, ...]` feature tensors with `M` modes per row.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var, n_modes: usize) -> Result<Var, TensorError> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    let batch = tape.shape(pred).first().copied().unwrap_or(1).max(1);
    Ok(tape.scale(total, 1.0 / (batch * n_modes) as f64))
}

/// Plain-value counterpart of [`mse_loss`].
pub fn mse_value(pred: &[f64], target: &[f64], batch: usize, n_modes: usize) -> f64 {
    let s: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    s / (batch * n_modes) as f64
}

/// A differentiable spectral tendency acting on `[batch, modes..., 2F]`.
pub trait SpectralRhs {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError>;
}

impl SpectralRhs for NsTapeRhs {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        NsTapeRhs::apply(self, tape, x)
    }
}

impl SpectralRhs for BurgersTapeRhs {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        BurgersTapeRhs::apply(self, tape, x)
    }
}

/// Tape tendency for the PDE of a trajectory.
pub fn tape_rhs_for(pde: PdeKind, grid: &ModeGrid, nu: f64) -> Result<Box<dyn SpectralRhs>, SolverError> {
    Ok(match pde {
        PdeKind::Ns2d => Box::new(NsTapeRhs::new(grid, nu)?),
        PdeKind::Burgers1d => Box::new(BurgersTapeRhs::new(grid, nu)?),
    })
}

/// Backward-Euler residual `‖(pred - last)/Δt - F(pred)‖²`, reduced like
/// [`mse_loss`]. `pred` and `last` are shaped `[batch, modes..., 2F]`.
pub fn physics_residual_loss(
    tape: &mut Tape,
    last: Var,
    pred: Var,
    dt: f64,
    rhs: &dyn SpectralRhs,
    n_modes: usize,
) -> Result<Var, TensorError> {
    if !(dt > 0.0) {
        return Err(TensorError::Invalid(format!("dt must be positive, got {dt}")));
    }
    let step = tape.sub(pred, last)?;
    let rate = tape.scale(step, 1.0 / dt);
    let f = rhs.apply(tape, pred)?;
    let resid = tape.sub(rate, f)?;
    let zero = tape.constant(Tensor::zeros(tape.shape(resid)));
    mse_loss(tape, resid, zero, n_modes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TrainError::Invalid(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            param: format!("flat index {i}"),
            step: state.step + 1,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total` steps.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Mse,
    /// Residual of the spectral ODE plus a weighted initial-window term.
    Physics,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Mse => "mse",
            LossMode::Physics => "physics",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(LossMode::Mse),
            "physics" => Some(LossMode::Physics),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub loss: LossMode,
    pub ic_weight: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            lr_min: 1e-5,
            adam: AdamConfig::default(),
            loss: LossMode::Mse,
            ic_weight: 1.0,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<LossRecord>,
    /// Mean single-step MSE over every window, before and after training.
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Mean raw-output MSE over all windows of the dataset.
pub fn dataset_mse(params: &ModelParams, data: &WindowedDataset, chunk: usize) -> Result<f64, TrainError> {
    let m = data.model();
    let mut total = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for batch in all.chunks(chunk.max(1)) {
        let out = predict(m, params, data.inputs(batch))?;
        let tgt = data.targets(batch);
        total += mse_value(out.data(), tgt.data(), 1, m.n_modes());
    }
    Ok(total / data.len() as f64)
}

/// Single-step validation MSE of window `w`: predict, symmetrize (and
/// optionally project), then compare on the full grid.
pub fn single_step_mse(
    params: &ModelParams,
    data: &WindowedDataset,
    w: usize,
    project: bool,
) -> Result<f64, TrainError> {
    let m = data.model();
    let out = predict(m, params, data.inputs(&[w]))?;
    let pred = symmetrize_prediction(out.data(), data.grid(), m, project)?;
    let target = &data.trajectory().states[data.target_index(w)];
    Ok(spectral_mse(&pred, target).map_err(ModelError::from)?)
}

struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Loss of one batch and gradients in canonical parameter order.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    data: &WindowedDataset,
    windows: &[usize],
    cfg: &TrainConfig,
    rhs: Option<&dyn SpectralRhs>,
) -> Result<(f64, Vec<f64>), TrainError> {
    let m = data.model();
    let mut tape = Tape::new();
    let p = ParamVars::attach(&mut tape, params, true);
    let b = windows.len();
    let loss = match cfg.loss {
        LossMode::Mse => {
            let x = tape.constant(data.inputs(windows));
            let y = forward(m, &mut tape, &p, x)?;
            let y = tape.reshape(y, &[b, m.output_len()])?;
            let t = tape.constant(data.targets(windows));
            mse_loss(&mut tape, y, t, m.n_modes())?
        }
        LossMode::Physics => {
            let rhs = rhs.ok_or_else(|| TrainError::Invalid("physics loss needs a tendency".into()))?;
            let mut rows = windows.to_vec();
            rows.push(0);
            let x = tape.constant(data.inputs(&rows));
            let y = forward(m, &mut tape, &p, x)?;
            let y = tape.reshape(y, &[b + 1, m.output_len()])?;
            let pred = tape.slice(y, 0, 0, b)?;
            let ic_pred = tape.slice(y, 0, b, b + 1)?;
            let mut grid_shape = vec![b];
            grid_shape.extend_from_slice(&m.mode_dims);
            grid_shape.push(m.d_output);
            let pred_grid = tape.reshape(pred, &grid_shape)?;
            let last = data.last_inputs(windows).reshaped(grid_shape)?;
            let last = tape.constant(last);
            let dt = data.trajectory().meta.sample_interval();
            let phys = physics_residual_loss(&mut tape, last, pred_grid, dt, rhs, m.n_modes())?;
            let ic_t = tape.constant(data.targets(&[0]));
            let ic = mse_loss(&mut tape, ic_pred, ic_t, m.n_modes())?;
            let ic = tape.scale(ic, cfg.ic_weight);
            tape.add(phys, ic)?
        }
    };
    let value = tape.value(loss).item().unwrap_or(f64::NAN);
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(params.n_params());
    for (v, (name, _)) in p.vars().iter().zip(params.entries()) {
        match grads.get(*v) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => {
                return Err(TrainError::Invalid(format!("no gradient for `{name}`")));
            }
        }
    }
    Ok((value, flat))
}

/// Central finite-difference check of [`batch_loss_and_grads`] over every
/// parameter: the whole network plus loss as one composite function.
pub fn check_batch_gradients(
    params: &ModelParams,
    data: &WindowedDataset,
    windows: &[usize],
    cfg: &TrainConfig,
    rhs: Option<&dyn SpectralRhs>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TrainError> {
    let (_, analytic) = batch_loss_and_grads(params, data, windows, cfg, rhs)?;
    let flat = params.to_flat();
    let mut probe = params.clone();
    let mut shifted = flat.clone();
    let mut numeric = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        shifted[i] = flat[i] + h;
        probe.set_flat(&shifted)?;
        let (fp, _) = batch_loss_and_grads(&probe, data, windows, cfg, rhs)?;
        shifted[i] = flat[i] - h;
        probe.set_flat(&shifted)?;
        let (fm, _) = batch_loss_and_grads(&probe, data, windows, cfg, rhs)?;
        shifted[i] = flat[i];
        numeric.push((fp - fm) / (2.0 * h));
    }
    Ok(compare_gradients(analytic, numeric, tol))
}

/// Mini-batch training loop. `rhs` is required for [`LossMode::Physics`].
pub fn train(
    init: ModelParams,
    data: &WindowedDataset,
    cfg: &TrainConfig,
    rhs: Option<&dyn SpectralRhs>,
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::InsufficientSamples {
            available: 0,
            needed: 1,
        });
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Invalid("batch_size must be positive".into()));
    }
    if cfg.loss == LossMode::Physics {
        let m = data.model();
        if m.mode_dims != data.grid().dims() {
            return Err(TrainError::Invalid(format!(
                "physics loss needs mode_dims {:?} equal to the grid {:?}",
                m.mode_dims,
                data.grid().dims()
            )));
        }
    }
    let eval_chunk = 64;
    let initial_mse = dataset_mse(&init, data, eval_chunk)?;
    let mut params = init;
    let mut flat = params.to_flat();
    let mut state = OptimState::new(flat.len());
    let mut batcher = Batcher::new(data.len(), cfg.shuffle_seed);
    let mut history = Vec::with_capacity(cfg.steps);
    let clock = Instant::now();
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
        let windows = batcher.next(cfg.batch_size);
        let (loss, grads) = batch_loss_and_grads(&params, data, &windows, cfg, rhs)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                step,
                loss,
                last_good: Box::new(params),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let param = locate(&params, i);
            return Err(TrainError::NonFiniteGradient {
                param,
                step: state.step + 1,
            });
        }
        adam_step(&mut flat, &grads, &mut state, lr, &cfg.adam)?;
        params.set_flat(&flat)?;
        history.push(LossRecord {
            step,
            loss,
            lr,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
    }
    let final_mse = dataset_mse(&params, data, eval_chunk)?;
    Ok(TrainOutcome {
        params,
        history,
        initial_mse,
        final_mse,
    })
}

fn locate(params: &ModelParams, flat_index: usize) -> String {
    let mut off = 0;
    for (name, t) in params.entries() {
        if flat_index < off + t.len() {
            return format!("{name}[{}]", flat_index - off);
        }
        off += t.len();
    }
    format!("flat index {flat_index}")
}
