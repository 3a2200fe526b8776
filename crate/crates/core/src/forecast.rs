//! Autoregressive rollout and error measures against a reference trajectory.

use crate::burgers1d::{Burgers1d, NonlinearForm};
use crate::ns2d::{field_errors, FieldErrors, Ns2d, NsState};
use crate::spectral::{inverse_transform, SpectralError, SpectralField};
use crate::trajectory::{rk4_step, PdeKind, SolverError, Trajectory};
use crate::transformer::{
    build_input_window, predict, symmetrize_prediction, ModelConfig, ModelError, ModelParams,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("time stamps are misaligned: {0}")]
    Misaligned(String),
    #[error("invalid rollout request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// `(1/M) Σ_k Σ_c |pred_c(k) - ref_c(k)|²` with `M` the number of modes.
pub fn spectral_mse(pred: &SpectralField, reference: &SpectralField) -> Result<f64, SpectralError> {
    if !pred.same_layout(reference) {
        return Err(SpectralError::GridMismatch);
    }
    let s: f64 = pred
        .coeffs()
        .iter()
        .zip(reference.coeffs())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(s / pred.grid().len() as f64)
}

/// Anything that maps a window of past states to the next state.
pub trait NextStepModel {
    fn seq_len(&self) -> usize;

    /// Next Hermitian state after `states` (sampled at `times`), valid at `next_time`.
    fn predict_next(
        &self,
        states: &[SpectralField],
        times: &[f64],
        next_time: f64,
    ) -> Result<SpectralField, ForecastError>;
}

/// A trained network with its output post-processing.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub t_norm: f64,
    /// Project NS predictions onto divergence-free fields.
    pub project: bool,
}

impl NextStepModel for TransformerModel {
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn predict_next(
        &self,
        states: &[SpectralField],
        times: &[f64],
        _next_time: f64,
    ) -> Result<SpectralField, ForecastError> {
        let x = build_input_window(&self.config, states, times, self.t_norm)?;
        let y = predict(&self.config, &self.params, x)?;
        Ok(symmetrize_prediction(
            y.data(),
            states[0].grid(),
            &self.config,
            self.project,
        )?)
    }
}

/// Looks the answer up in a stored trajectory.
#[derive(Debug, Clone)]
pub struct OracleModel<'a> {
    pub reference: &'a Trajectory,
    pub seq_len: usize,
}

impl NextStepModel for OracleModel<'_> {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn predict_next(
        &self,
        _states: &[SpectralField],
        _times: &[f64],
        next_time: f64,
    ) -> Result<SpectralField, ForecastError> {
        let i = find_time(self.reference, next_time)?;
        Ok(self.reference.states[i].clone())
    }
}

/// Advances the last state with the numerical solver that produced the
/// reference, using the same step sequence.
#[derive(Debug, Clone)]
pub struct SolverModel {
    pde: PdeKind,
    ns: Option<Ns2d>,
    burgers: Option<Burgers1d>,
    dt: f64,
    substeps: usize,
    seq_len: usize,
}

impl SolverModel {
    pub fn for_trajectory(reference: &Trajectory, seq_len: usize) -> Result<Self, SolverError> {
        let grid = reference.states[0].grid();
        let meta = &reference.meta;
        let (ns, burgers) = match meta.pde {
            PdeKind::Ns2d => (Some(Ns2d::new(grid, meta.nu)?), None),
            PdeKind::Burgers1d => (
                None,
                Some(Burgers1d::new(grid, meta.nu, NonlinearForm::Conservative)?),
            ),
        };
        Ok(Self {
            pde: meta.pde,
            ns,
            burgers,
            dt: meta.dt,
            substeps: meta.sample_every,
            seq_len,
        })
    }
}

impl NextStepModel for SolverModel {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn predict_next(
        &self,
        states: &[SpectralField],
        times: &[f64],
        _next_time: f64,
    ) -> Result<SpectralField, ForecastError> {
        let mut y = states[states.len() - 1].clone();
        // Step times are reconstructed from step counts like the generator does.
        let start_step = (times[times.len() - 1] / self.dt).round() as usize;
        for s in 0..self.substeps {
            let t = (start_step + s) as f64 * self.dt;
            y = match self.pde {
                PdeKind::Ns2d => {
                    let ns = self.ns.as_ref().expect("ns solver");
                    ns.step(&NsState { velocity: y, time: t, nu: ns.nu() }, self.dt)?
                        .velocity
                }
                PdeKind::Burgers1d => {
                    let b = self.burgers.as_ref().expect("burgers solver");
                    rk4_step(&y, t, self.dt, |y, t| b.rhs(y, t))?
                }
            };
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Feed predictions back as inputs.
    ClosedLoop,
    /// Always feed reference states; each prediction is a single step.
    TeacherForced,
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// Predicted states at the reference stamps following the seed window.
    pub predicted: Trajectory,
    /// `(t, MSE(t))` for every predicted state.
    pub mse: Vec<(f64, f64)>,
    /// End of the training interval; later stamps are test data.
    pub split_time: f64,
    /// Why the rollout stopped early, if it did.
    pub aborted: Option<String>,
}

impl RolloutResult {
    pub fn label(&self, t: f64) -> &'static str {
        interval_label(t, self.split_time)
    }
}

pub fn interval_label(t: f64, split_time: f64) -> &'static str {
    if t <= split_time + 1e-9 {
        "train"
    } else {
        "test"
    }
}

fn find_time(traj: &Trajectory, t: f64) -> Result<usize, ForecastError> {
    traj.times
        .iter()
        .position(|&s| s == t)
        .ok_or_else(|| ForecastError::Misaligned(format!("no reference state at t = {t}")))
}

/// Rolls `model` forward `n_steps` samples, seeded with the reference states
/// `seed_start .. seed_start + S`.
pub fn rollout(
    model: &dyn NextStepModel,
    reference: &Trajectory,
    seed_start: usize,
    n_steps: usize,
    mode: RolloutMode,
    split_time: f64,
) -> Result<RolloutResult, ForecastError> {
    let s = model.seq_len();
    if n_steps == 0 {
        return Err(ForecastError::Invalid("n_steps must be at least 1".into()));
    }
    let first = seed_start + s;
    if first + n_steps > reference.len() {
        return Err(ForecastError::Invalid(format!(
            "rollout to sample {} exceeds the reference length {}",
            first + n_steps,
            reference.len()
        )));
    }
    let mut window: Vec<SpectralField> = reference.states[seed_start..first].to_vec();
    let mut times: Vec<f64> = reference.times[seed_start..first].to_vec();
    let mut predicted = Trajectory {
        meta: reference.meta.clone(),
        times: Vec::with_capacity(n_steps),
        states: Vec::with_capacity(n_steps),
    };
    let mut mse = Vec::with_capacity(n_steps);
    let mut aborted = None;
    for j in 0..n_steps {
        let idx = first + j;
        let t = reference.times[idx];
        let next = match model.predict_next(&window, &times, t) {
            Ok(p) if p.is_finite() => p,
            Ok(_) => {
                aborted = Some(format!("non-finite prediction at t = {t}"));
                break;
            }
            Err(ForecastError::Model(ModelError::NonFinite { location })) => {
                aborted = Some(format!("non-finite activations in {location} at t = {t}"));
                break;
            }
            Err(e) => return Err(e),
        };
        mse.push((t, spectral_mse(&next, &reference.states[idx])?));
        window.remove(0);
        times.remove(0);
        match mode {
            RolloutMode::ClosedLoop => window.push(next.clone()),
            RolloutMode::TeacherForced => window.push(reference.states[idx].clone()),
        }
        times.push(t);
        predicted.times.push(t);
        predicted.states.push(next);
    }
    Ok(RolloutResult {
        predicted,
        mse,
        split_time,
        aborted,
    })
}

/// `(t, MSE(t))` for every predicted stamp, matched exactly in `reference`.
pub fn mse_curve(pred: &Trajectory, reference: &Trajectory) -> Result<Vec<(f64, f64)>, ForecastError> {
    pred.times
        .iter()
        .zip(&pred.states)
        .map(|(&t, p)| {
            let i = find_time(reference, t)?;
            Ok((t, spectral_mse(p, &reference.states[i])?))
        })
        .collect()
}

/// Physical fields, pointwise error and scalar metrics per component.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub predicted: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    pub abs_error: Vec<Vec<f64>>,
    pub metrics: Vec<FieldErrors>,
}

pub fn reconstruct_and_compare(
    pred: &SpectralField,
    reference: &SpectralField,
) -> Result<Comparison, ForecastError> {
    if !pred.same_layout(reference) {
        return Err(SpectralError::GridMismatch.into());
    }
    let p = inverse_transform(pred)?;
    let r = inverse_transform(reference)?;
    let abs_error = p
        .iter()
        .zip(&r)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect())
        .collect();
    let metrics = p
        .iter()
        .zip(&r)
        .map(|(a, b)| field_errors(a, b))
        .collect::<Result<_, _>>()?;
    Ok(Comparison {
        predicted: p,
        reference: r,
        abs_error,
        metrics,
    })
}
