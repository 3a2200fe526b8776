//! Time integration shared by both solvers and the sampled trajectory type.

use crate::spectral::{SpectralError, SpectralField};
use std::fmt;
use thiserror::Error;

/// Version tag stamped into every generated trajectory.
pub const SOLVER_VERSION: &str = "fst-solver-1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("numerical blowup: non-finite coefficients at t = {time}")]
    Blowup { time: f64 },
    #[error("invalid solver argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PdeKind {
    Ns2d,
    Burgers1d,
}

impl PdeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PdeKind::Ns2d => "ns2d",
            PdeKind::Burgers1d => "burgers1d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ns2d" => Some(PdeKind::Ns2d),
            "burgers1d" => Some(PdeKind::Burgers1d),
            _ => None,
        }
    }

    /// Number of velocity components evolved by the solver.
    pub fn n_fields(self) -> usize {
        match self {
            PdeKind::Ns2d => 2,
            PdeKind::Burgers1d => 1,
        }
    }
}

impl fmt::Display for PdeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub pde: PdeKind,
    pub nu: f64,
    pub dt: f64,
    pub sample_every: usize,
    pub solver_version: String,
}

impl TrajectoryMeta {
    /// Spacing between stored samples.
    pub fn sample_interval(&self) -> f64 {
        self.dt * self.sample_every as f64
    }

    /// Time of stored sample `i`, computed from integer step counts so that
    /// stamps are reproducible bit for bit.
    pub fn sample_time(&self, i: usize) -> f64 {
        (i * self.sample_every) as f64 * self.dt
    }
}

/// Sampled solver output: `states[i]` holds the coefficients at `times[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub times: Vec<f64>,
    pub states: Vec<SpectralField>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Indices of samples with `t0 <= t <= t1` (with a small slack for
    /// accumulated stamp rounding).
    pub fn indices_in(&self, t0: f64, t1: f64) -> std::ops::Range<usize> {
        let slack = 1e-9 * self.meta.sample_interval();
        let start = self.times.partition_point(|&t| t < t0 - slack);
        let end = self.times.partition_point(|&t| t <= t1 + slack);
        start..end.max(start)
    }

    /// Copy restricted to the first `n` samples.
    pub fn truncated(&self, n: usize) -> Trajectory {
        Trajectory {
            meta: self.meta.clone(),
            times: self.times[..n.min(self.len())].to_vec(),
            states: self.states[..n.min(self.len())].to_vec(),
        }
    }
}

/// One classical fourth-order Runge–Kutta step for `dy/dt = f(t, y)`.
pub fn rk4_step<F>(y: &SpectralField, t: f64, dt: f64, mut f: F) -> Result<SpectralField, SolverError>
where
    F: FnMut(&SpectralField, f64) -> Result<SpectralField, SolverError>,
{
    let k1 = f(y, t)?;
    let k2 = f(&y.axpy(0.5 * dt, &k1)?, t + 0.5 * dt)?;
    let k3 = f(&y.axpy(0.5 * dt, &k2)?, t + 0.5 * dt)?;
    let k4 = f(&y.axpy(dt, &k3)?, t + dt)?;
    let mut out = y.clone();
    let w = dt / 6.0;
    for i in 0..out.coeffs().len() {
        let inc = k1.coeffs()[i] + (k2.coeffs()[i] + k3.coeffs()[i]) * 2.0 + k4.coeffs()[i];
        out.coeffs_mut()[i] += inc * w;
    }
    Ok(out)
}

pub(crate) fn check_schedule(dt: f64, n_steps: usize, sample_every: usize) -> Result<(), SolverError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SolverError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if n_steps == 0 {
        return Err(SolverError::InvalidArgument("n_steps must be at least 1".into()));
    }
    if sample_every == 0 || n_steps % sample_every != 0 {
        return Err(SolverError::InvalidArgument(format!(
            "sample_every ({sample_every}) must divide n_steps ({n_steps})"
        )));
    }
    Ok(())
}

/// Integrates `n_steps` steps of `step`, storing every `sample_every`-th state.
pub(crate) fn sample_run<F>(
    meta: TrajectoryMeta,
    initial: SpectralField,
    n_steps: usize,
    mut step: F,
) -> Result<Trajectory, SolverError>
where
    F: FnMut(&SpectralField, f64) -> Result<SpectralField, SolverError>,
{
    check_schedule(meta.dt, n_steps, meta.sample_every)?;
    let n_samples = n_steps / meta.sample_every + 1;
    let mut times = Vec::with_capacity(n_samples);
    let mut states = Vec::with_capacity(n_samples);
    times.push(0.0);
    states.push(initial.clone());
    let mut y = initial;
    for s in 0..n_steps {
        let t = s as f64 * meta.dt;
        y = step(&y, t)?;
        if !y.is_finite() {
            return Err(SolverError::Blowup {
                time: (s + 1) as f64 * meta.dt,
            });
        }
        if (s + 1) % meta.sample_every == 0 {
            times.push((s + 1) as f64 * meta.dt);
            states.push(y.clone());
        }
    }
    Ok(Trajectory { meta, times, states })
}
