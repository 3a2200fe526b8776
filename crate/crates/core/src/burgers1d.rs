//! Fourier pseudo-spectral solver for the viscous Burgers equation
//! `uₜ + u uₓ = ν uₓₓ` on a periodic interval.

use crate::spectral::{forward_transform, inverse_component, ModeGrid, SpectralError, SpectralField};
use crate::trajectory::{
    rk4_step, sample_run, PdeKind, SolverError, Trajectory, TrajectoryMeta, SOLVER_VERSION,
};
use fst_tensor::{Tape, Tensor, TensorError, Var};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Benchmark viscosity `0.01 / π`.
pub const BENCHMARK_NU: f64 = 0.01 / PI;

#[derive(Debug, Clone, PartialEq)]
pub struct BurgersState {
    pub spectrum: SpectralField,
    pub time: f64,
    pub nu: f64,
}

/// How the quadratic term is formed on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonlinearForm {
    /// `-(ik/2) FFT(u²)`: the mean mode receives exactly zero tendency.
    #[default]
    Conservative,
    /// `-FFT(u uₓ)`.
    Advective,
}

#[derive(Debug, Clone)]
pub struct Burgers1d {
    grid: ModeGrid,
    nu: f64,
    form: NonlinearForm,
    dx: Vec<Complex64>,
    k2: Vec<f64>,
    keep: Vec<bool>,
}

impl Burgers1d {
    pub fn new(grid: &ModeGrid, nu: f64, form: NonlinearForm) -> Result<Self, SolverError> {
        if grid.ndim() != 1 {
            return Err(SolverError::InvalidArgument(format!(
                "burgers1d needs a 1D grid, got {} dimensions",
                grid.ndim()
            )));
        }
        if !(nu.is_finite() && nu >= 0.0) {
            return Err(SolverError::InvalidArgument(format!("viscosity {nu} is invalid")));
        }
        Ok(Self {
            grid: grid.clone(),
            nu,
            form,
            dx: grid.derivative_factor(0, 1),
            k2: grid.k_squared(),
            keep: grid.dealias_mask(),
        })
    }

    pub fn grid(&self) -> &ModeGrid {
        &self.grid
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn rhs(&self, spectrum: &SpectralField, time: f64) -> Result<SpectralField, SolverError> {
        if spectrum.n_fields() != 1 || spectrum.grid() != &self.grid {
            return Err(SpectralError::GridMismatch.into());
        }
        let uh = spectrum.component(0);
        let u = inverse_component(&self.grid, uh);
        let mut out = match self.form {
            NonlinearForm::Conservative => {
                let sq: Vec<f64> = u.iter().map(|v| v * v).collect();
                let mut f = forward_transform(&sq, &self.grid)?;
                for (c, d) in f.coeffs_mut().iter_mut().zip(&self.dx) {
                    *c *= -0.5 * d;
                }
                f
            }
            NonlinearForm::Advective => {
                let d: Vec<Complex64> = uh.iter().zip(&self.dx).map(|(a, b)| a * b).collect();
                let ux = inverse_component(&self.grid, &d);
                let prod: Vec<f64> = u.iter().zip(&ux).map(|(a, b)| -a * b).collect();
                forward_transform(&prod, &self.grid)?
            }
        };
        for (((c, keep), k2), u) in out
            .coeffs_mut()
            .iter_mut()
            .zip(&self.keep)
            .zip(&self.k2)
            .zip(uh)
        {
            if !keep {
                *c = Complex64::new(0.0, 0.0);
            }
            *c -= u * (self.nu * k2);
        }
        if !out.is_finite() {
            return Err(SolverError::Blowup { time });
        }
        Ok(out)
    }

    pub fn step(&self, state: &BurgersState, dt: f64) -> Result<BurgersState, SolverError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SolverError::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        let spectrum = rk4_step(&state.spectrum, state.time, dt, |y, t| self.rhs(y, t))?;
        let time = state.time + dt;
        if !spectrum.is_finite() {
            return Err(SolverError::Blowup { time });
        }
        Ok(BurgersState {
            spectrum,
            time,
            nu: state.nu,
        })
    }

    pub fn simulate(
        &self,
        initial: &BurgersState,
        dt: f64,
        n_steps: usize,
        sample_every: usize,
    ) -> Result<Trajectory, SolverError> {
        if initial.spectrum.grid() != &self.grid || initial.spectrum.n_fields() != 1 {
            return Err(SpectralError::GridMismatch.into());
        }
        let meta = TrajectoryMeta {
            pde: PdeKind::Burgers1d,
            nu: self.nu,
            dt,
            sample_every,
            solver_version: SOLVER_VERSION.to_string(),
        };
        sample_run(meta, initial.spectrum.clone(), n_steps, |y, t| {
            rk4_step(y, t, dt, |y, t| self.rhs(y, t))
        })
    }
}

/// Tendency in the default conservative form.
pub fn burgers_rhs(state: &BurgersState) -> Result<SpectralField, SolverError> {
    Burgers1d::new(state.spectrum.grid(), state.nu, NonlinearForm::Conservative)?
        .rhs(&state.spectrum, state.time)
}

pub fn simulate_burgers(
    initial: &BurgersState,
    dt: f64,
    n_steps: usize,
    sample_every: usize,
) -> Result<Trajectory, SolverError> {
    Burgers1d::new(initial.spectrum.grid(), initial.nu, NonlinearForm::Conservative)?
        .simulate(initial, dt, n_steps, sample_every)
}

/// `u₀ = -sin x` on an `n`-point periodic grid of length `2π`.
pub fn negative_sine_state(n: usize, nu: f64) -> Result<BurgersState, SolverError> {
    let grid = ModeGrid::periodic(&[n])?;
    let u: Vec<f64> = grid.coordinates(0).iter().map(|x| -x.sin()).collect();
    Ok(BurgersState {
        spectrum: forward_transform(&u, &grid)?,
        time: 0.0,
        nu,
    })
}

/// Differentiable conservative-form tendency on `[batch, n, 2]` coefficients.
#[derive(Debug, Clone)]
pub struct BurgersTapeRhs {
    n: usize,
    nonlinear: Tensor,
    viscous: Tensor,
}

impl BurgersTapeRhs {
    pub fn new(grid: &ModeGrid, nu: f64) -> Result<Self, SolverError> {
        let s = Burgers1d::new(grid, nu, NonlinearForm::Conservative)?;
        let n = grid.len();
        let nonlinear = s
            .dx
            .iter()
            .zip(&s.keep)
            .flat_map(|(d, &keep)| {
                let f = if keep { -0.5 * d } else { Complex64::new(0.0, 0.0) };
                [f.re, f.im]
            })
            .collect();
        let viscous = s.k2.iter().flat_map(|k2| [-nu * k2, 0.0]).collect();
        Ok(Self {
            n,
            nonlinear: Tensor::new(vec![n, 2], nonlinear).expect("factor shape"),
            viscous: Tensor::new(vec![n, 2], viscous).expect("factor shape"),
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1..] != [self.n, 2] {
            return Err(TensorError::ShapeMismatch {
                op: "burgers_rhs",
                lhs: shape,
                rhs: vec![self.n, 2],
            });
        }
        let u = tape.ifft_real(x, 1)?;
        let sq = tape.mul(u, u)?;
        let sq_hat = tape.fft(sq, 1)?;
        let nl = tape.spectral_scale(sq_hat, &self.nonlinear)?;
        let visc = tape.spectral_scale(x, &self.viscous)?;
        tape.add(nl, visc)
    }
}
