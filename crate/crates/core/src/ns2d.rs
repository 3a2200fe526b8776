//! Pseudo-spectral solver for 2D incompressible Navier–Stokes on a periodic box.
//!
//! Velocity is evolved in Fourier space. The advective term is formed on the
//! grid, transformed back and truncated with the 2/3 rule; pressure never
//! appears explicitly because every tendency is Leray-projected onto the
//! divergence-free subspace.

use crate::spectral::{
    forward_transform_fields, inverse_component, inverse_transform, ModeGrid, SpectralError,
    SpectralField,
};
use crate::trajectory::{
    rk4_step, sample_run, PdeKind, SolverError, Trajectory, TrajectoryMeta, SOLVER_VERSION,
};
use fst_tensor::{Tape, Tensor, TensorError, Var};
use num_complex::Complex64;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct NsState {
    pub velocity: SpectralField,
    pub time: f64,
    pub nu: f64,
}

/// Precomputed wavenumber factors for one grid and viscosity.
#[derive(Debug, Clone)]
pub struct Ns2d {
    grid: ModeGrid,
    nu: f64,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    dx: Vec<Complex64>,
    dy: Vec<Complex64>,
    keep: Vec<bool>,
    /// Modes on a Nyquist line; their mirror is not the negated wavevector,
    /// so the projector cannot keep them Hermitian and zeroes them instead.
    nyquist: Vec<bool>,
}

impl Ns2d {
    pub fn new(grid: &ModeGrid, nu: f64) -> Result<Self, SolverError> {
        if grid.ndim() != 2 {
            return Err(SolverError::InvalidArgument(format!(
                "ns2d needs a 2D grid, got {} dimensions",
                grid.ndim()
            )));
        }
        if !(nu.is_finite() && nu >= 0.0) {
            return Err(SolverError::InvalidArgument(format!("viscosity {nu} is invalid")));
        }
        let (kx, ky) = (grid.wavenumber_field(0), grid.wavenumber_field(1));
        let (dx, dy) = (grid.derivative_factor(0, 1), grid.derivative_factor(1, 1));
        let nyquist = (0..grid.len())
            .map(|i| (dx[i].norm() == 0.0 && kx[i] != 0.0) || (dy[i].norm() == 0.0 && ky[i] != 0.0))
            .collect();
        Ok(Self {
            grid: grid.clone(),
            nu,
            kx,
            ky,
            k2: grid.k_squared(),
            dx,
            dy,
            keep: grid.dealias_mask(),
            nyquist,
        })
    }

    pub fn grid(&self) -> &ModeGrid {
        &self.grid
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    fn check(&self, velocity: &SpectralField) -> Result<(), SolverError> {
        if velocity.n_fields() != 2 || velocity.grid() != &self.grid {
            return Err(SpectralError::GridMismatch.into());
        }
        Ok(())
    }

    /// `N̂ = -FFT(u·∇u)`, 2/3-truncated, unprojected.
    pub fn nonlinear(&self, velocity: &SpectralField) -> Result<SpectralField, SolverError> {
        self.check(velocity)?;
        let (uh, vh) = (velocity.component(0), velocity.component(1));
        let deriv = |c: &[Complex64], f: &[Complex64]| -> Vec<f64> {
            let d: Vec<Complex64> = c.iter().zip(f).map(|(a, b)| a * b).collect();
            inverse_component(&self.grid, &d)
        };
        let u = inverse_component(&self.grid, uh);
        let v = inverse_component(&self.grid, vh);
        let (ux, uy) = (deriv(uh, &self.dx), deriv(uh, &self.dy));
        let (vx, vy) = (deriv(vh, &self.dx), deriv(vh, &self.dy));
        let n = self.grid.len();
        let mut adv_u = vec![0.0; n];
        let mut adv_v = vec![0.0; n];
        for i in 0..n {
            adv_u[i] = -(u[i] * ux[i] + v[i] * uy[i]);
            adv_v[i] = -(u[i] * vx[i] + v[i] * vy[i]);
        }
        let mut out = forward_transform_fields(&[&adv_u, &adv_v], &self.grid)?;
        for c in 0..2 {
            for (value, keep) in out.component_mut(c).iter_mut().zip(&self.keep) {
                if !keep {
                    *value = ZERO;
                }
            }
        }
        Ok(out)
    }

    /// Leray-projected tendency `P(N̂ - ν K² û)`.
    pub fn rhs(&self, velocity: &SpectralField, time: f64) -> Result<SpectralField, SolverError> {
        let mut tend = self.nonlinear(velocity)?;
        for c in 0..2 {
            let src = velocity.component(c);
            for ((t, u), k2) in tend.component_mut(c).iter_mut().zip(src).zip(&self.k2) {
                *t -= u * (self.nu * k2);
            }
        }
        let out = self.project(&tend);
        if !out.is_finite() {
            return Err(SolverError::Blowup { time });
        }
        Ok(out)
    }

    /// Entry `(a, b)` of the Leray projector `I - k kᵀ / |k|²` at mode `i`.
    fn projector(&self, a: usize, b: usize, i: usize) -> f64 {
        if self.nyquist[i] {
            return 0.0;
        }
        let delta = if a == b { 1.0 } else { 0.0 };
        let k2 = self.k2[i];
        if k2 == 0.0 {
            return delta;
        }
        let k = |c: usize| if c == 0 { self.kx[i] } else { self.ky[i] };
        delta - k(a) * k(b) / k2
    }

    fn project(&self, velocity: &SpectralField) -> SpectralField {
        let mut out = velocity.clone();
        let n = self.grid.len();
        for i in 0..n {
            let (u, v) = (velocity.coeffs()[i], velocity.coeffs()[n + i]);
            out.coeffs_mut()[i] = u * self.projector(0, 0, i) + v * self.projector(0, 1, i);
            out.coeffs_mut()[n + i] = u * self.projector(1, 0, i) + v * self.projector(1, 1, i);
        }
        out
    }

    /// One RK4 step followed by re-projection onto the divergence-free subspace.
    pub fn step(&self, state: &NsState, dt: f64) -> Result<NsState, SolverError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SolverError::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        self.check(&state.velocity)?;
        let next = rk4_step(&state.velocity, state.time, dt, |y, t| self.rhs(y, t))?;
        let velocity = self.project(&next);
        let time = state.time + dt;
        if !velocity.is_finite() {
            return Err(SolverError::Blowup { time });
        }
        Ok(NsState {
            velocity,
            time,
            nu: state.nu,
        })
    }

    /// Integrates from `initial`, keeping every `sample_every`-th state.
    pub fn simulate(
        &self,
        initial: &NsState,
        dt: f64,
        n_steps: usize,
        sample_every: usize,
    ) -> Result<Trajectory, SolverError> {
        self.check(&initial.velocity)?;
        let meta = TrajectoryMeta {
            pde: PdeKind::Ns2d,
            nu: self.nu,
            dt,
            sample_every,
            solver_version: SOLVER_VERSION.to_string(),
        };
        let start = self.project(&initial.velocity);
        sample_run(meta, start, n_steps, |y, t| {
            let next = rk4_step(y, t, dt, |y, t| self.rhs(y, t))?;
            Ok(self.project(&next))
        })
    }

    /// Pressure from `|k|² p̂ = -i k·N̂`, with zero mean.
    pub fn recover_pressure(&self, velocity: &SpectralField) -> Result<Vec<f64>, SolverError> {
        let nl = self.nonlinear(velocity)?;
        let n = self.grid.len();
        let mut ph = vec![ZERO; n];
        for (i, p) in ph.iter_mut().enumerate() {
            let k2 = self.k2[i];
            if k2 == 0.0 {
                continue;
            }
            let kn = nl.coeffs()[i] * self.kx[i] + nl.coeffs()[n + i] * self.ky[i];
            *p = Complex64::new(0.0, -1.0) * kn / k2;
        }
        let sf = SpectralField::from_coeffs(&self.grid, 1, ph)?;
        Ok(inverse_transform(&sf)?.remove(0))
    }
}

/// Tendency of the spectral NS system with Leray projection.
pub fn ns_rhs(state: &NsState) -> Result<SpectralField, SolverError> {
    Ns2d::new(state.velocity.grid(), state.nu)?.rhs(&state.velocity, state.time)
}

/// Applies `I - k kᵀ / |k|²` per mode, leaving `k = 0` unchanged.
pub fn project_divergence_free(velocity: &SpectralField) -> Result<SpectralField, SolverError> {
    let solver = Ns2d::new(velocity.grid(), 0.0)?;
    solver.check(velocity)?;
    Ok(solver.project(velocity))
}

/// `K₁ û + K₂ v̂` per mode.
pub fn divergence(velocity: &SpectralField) -> Result<Vec<Complex64>, SolverError> {
    let grid = velocity.grid();
    if velocity.n_fields() != 2 || grid.ndim() != 2 {
        return Err(SpectralError::GridMismatch.into());
    }
    let (kx, ky) = (grid.wavenumber_field(0), grid.wavenumber_field(1));
    Ok(velocity
        .component(0)
        .iter()
        .zip(velocity.component(1))
        .enumerate()
        .map(|(i, (u, v))| u * kx[i] + v * ky[i])
        .collect())
}

pub fn max_divergence(velocity: &SpectralField) -> Result<f64, SolverError> {
    Ok(divergence(velocity)?.iter().fold(0.0, |m, d| m.max(d.norm())))
}

/// Closed-form decaying vortex used to validate the solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorGreen {
    pub nu: f64,
}

impl TaylorGreen {
    pub fn u(&self, x: f64, y: f64, t: f64) -> f64 {
        x.sin() * y.cos() * (-2.0 * self.nu * t).exp()
    }

    pub fn v(&self, x: f64, y: f64, t: f64) -> f64 {
        -x.cos() * y.sin() * (-2.0 * self.nu * t).exp()
    }

    /// Pressure balancing the advective term of this velocity field in
    /// `∂ₜu + u·∇u = -∇p + νΔu`: `p = (cos 2x + cos 2y)/4 · e^{-4νt}`.
    ///
    /// The formula commonly printed alongside this velocity carries the
    /// opposite sign; that field does not satisfy the momentum equation (see
    /// [`TaylorGreen::printed_pressure`]).
    pub fn p(&self, x: f64, y: f64, t: f64) -> f64 {
        -self.printed_pressure(x, y, t)
    }

    /// `-(cos 2x + cos 2y)/4 · e^{-4νt}`, the opposite-sign variant.
    pub fn printed_pressure(&self, x: f64, y: f64, t: f64) -> f64 {
        -0.25 * ((2.0 * x).cos() + (2.0 * y).cos()) * (-4.0 * self.nu * t).exp()
    }
}

/// Grid samples of the vortex velocity and pressure `(u, v, p)` at time `t`.
pub fn taylor_green(t: f64, grid: &ModeGrid, nu: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let tg = TaylorGreen { nu };
    let (xs, ys) = (grid.coordinates(0), grid.coordinates(1));
    let n = grid.len();
    let (mut u, mut v, mut p) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for &x in &xs {
        for &y in &ys {
            u.push(tg.u(x, y, t));
            v.push(tg.v(x, y, t));
            p.push(tg.p(x, y, t));
        }
    }
    (u, v, p)
}

/// Spectral vortex state at time `t`.
pub fn taylor_green_state(t: f64, grid: &ModeGrid, nu: f64) -> Result<NsState, SolverError> {
    let (u, v, _) = taylor_green(t, grid, nu);
    Ok(NsState {
        velocity: forward_transform_fields(&[&u, &v], grid)?,
        time: t,
        nu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldErrors {
    /// `|c - r|₂ / |r|₂`, or the absolute `|c - r|₂` when `absolute_fallback` is set.
    pub relative_l2: f64,
    pub max_abs: f64,
    /// Set when the reference norm is zero.
    pub absolute_fallback: bool,
}

pub fn field_errors(computed: &[f64], reference: &[f64]) -> Result<FieldErrors, SpectralError> {
    if computed.len() != reference.len() {
        return Err(SpectralError::ShapeMismatch {
            expected: reference.len(),
            got: computed.len(),
        });
    }
    let mut diff_sq = 0.0;
    let mut ref_sq = 0.0;
    let mut max_abs = 0.0_f64;
    for (c, r) in computed.iter().zip(reference) {
        let d = c - r;
        diff_sq += d * d;
        ref_sq += r * r;
        max_abs = max_abs.max(d.abs());
    }
    let absolute_fallback = ref_sq == 0.0;
    let relative_l2 = if absolute_fallback {
        diff_sq.sqrt()
    } else {
        (diff_sq / ref_sq).sqrt()
    };
    Ok(FieldErrors {
        relative_l2,
        max_abs,
        absolute_fallback,
    })
}

/// Differentiable NS tendency on batched coefficients laid out as
/// `[batch, n_x, n_y, 4]` with channels `(Re û, Im û, Re v̂, Im v̂)`.
#[derive(Debug, Clone)]
pub struct NsTapeRhs {
    dims: [usize; 2],
    dx: Tensor,
    dy: Tensor,
    /// `-mask · P_ab` for the four projector entries.
    nl_proj: [Tensor; 4],
    /// `-ν K² · P_ab`.
    visc_proj: [Tensor; 4],
}

impl NsTapeRhs {
    pub fn new(grid: &ModeGrid, nu: f64) -> Result<Self, SolverError> {
        let s = Ns2d::new(grid, nu)?;
        let dims = [grid.dims()[0], grid.dims()[1]];
        let complex = |f: &[Complex64]| {
            let data = f.iter().flat_map(|c| [c.re, c.im]).collect();
            Tensor::new(vec![dims[0], dims[1], 2], data).expect("factor shape")
        };
        let real = |f: Vec<f64>| {
            let data = f.into_iter().flat_map(|r| [r, 0.0]).collect();
            Tensor::new(vec![dims[0], dims[1], 2], data).expect("factor shape")
        };
        let n = grid.len();
        let proj = |a: usize, b: usize, i: usize| s.projector(a, b, i);
        let pairs = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let nl_proj = pairs.map(|(a, b)| {
            real((0..n)
                .map(|i| if s.keep[i] { -proj(a, b, i) } else { 0.0 })
                .collect())
        });
        let visc_proj =
            pairs.map(|(a, b)| real((0..n).map(|i| -nu * s.k2[i] * proj(a, b, i)).collect()));
        Ok(Self {
            dims,
            dx: complex(&s.dx),
            dy: complex(&s.dy),
            nl_proj,
            visc_proj,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let shape = tape.shape(x).to_vec();
        let [n1, n2] = self.dims;
        if shape.len() != 4 || shape[1..] != [n1, n2, 4] {
            return Err(TensorError::ShapeMismatch {
                op: "ns_rhs",
                lhs: shape,
                rhs: vec![n1, n2, 4],
            });
        }
        let b = shape[0];
        let flat = tape.reshape(x, &[b, n1 * n2, 4])?;
        let mut comp = Vec::with_capacity(2);
        for c in 0..2 {
            let s = tape.slice(flat, 2, 2 * c, 2 * c + 2)?;
            comp.push(tape.reshape(s, &[b, n1, n2, 2])?);
        }
        let (uh, vh) = (comp[0], comp[1]);
        let u = tape.ifft_real(uh, 2)?;
        let v = tape.ifft_real(vh, 2)?;
        let grad = |tape: &mut Tape, h: Var, f: &Tensor| -> Result<Var, TensorError> {
            let d = tape.spectral_scale(h, f)?;
            tape.ifft_real(d, 2)
        };
        let ux = grad(tape, uh, &self.dx)?;
        let uy = grad(tape, uh, &self.dy)?;
        let vx = grad(tape, vh, &self.dx)?;
        let vy = grad(tape, vh, &self.dy)?;
        let advect = |tape: &mut Tape, fx: Var, fy: Var| -> Result<Var, TensorError> {
            let a = tape.mul(u, fx)?;
            let c = tape.mul(v, fy)?;
            let s = tape.add(a, c)?;
            tape.fft(s, 2)
        };
        let au = advect(tape, ux, uy)?;
        let av = advect(tape, vx, vy)?;
        let mut out = Vec::with_capacity(2);
        for (pa, pb) in [(0, 1), (2, 3)] {
            let terms = [
                tape.spectral_scale(au, &self.nl_proj[pa])?,
                tape.spectral_scale(av, &self.nl_proj[pb])?,
                tape.spectral_scale(uh, &self.visc_proj[pa])?,
                tape.spectral_scale(vh, &self.visc_proj[pb])?,
            ];
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            let acc = tape.reshape(acc, &[b, n1 * n2, 2])?;
            out.push(acc);
        }
        let joined = tape.concat(&out, 2)?;
        tape.reshape(joined, &[b, n1, n2, 4])
    }
}

/// Packs a two-component spectrum into the `[n_x, n_y, 4]` channel layout.
pub fn pack_channels(sf: &SpectralField) -> Vec<f64> {
    let n = sf.grid().len();
    let f = sf.n_fields();
    let mut out = vec![0.0; n * 2 * f];
    for c in 0..f {
        for (i, z) in sf.component(c).iter().enumerate() {
            out[i * 2 * f + 2 * c] = z.re;
            out[i * 2 * f + 2 * c + 1] = z.im;
        }
    }
    out
}

/// Inverse of [`pack_channels`].
pub fn unpack_channels(
    grid: &ModeGrid,
    n_fields: usize,
    data: &[f64],
) -> Result<SpectralField, SpectralError> {
    let n = grid.len();
    if data.len() != n * 2 * n_fields {
        return Err(SpectralError::ShapeMismatch {
            expected: n * 2 * n_fields,
            got: data.len(),
        });
    }
    let mut coeffs = vec![ZERO; n * n_fields];
    for c in 0..n_fields {
        for i in 0..n {
            let base = i * 2 * n_fields + 2 * c;
            coeffs[c * n + i] = Complex64::new(data[base], data[base + 1]);
        }
    }
    SpectralField::from_coeffs(grid, n_fields, coeffs)
}
