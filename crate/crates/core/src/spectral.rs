//! Fourier transforms, wavenumber grids, dealiasing and spectral derivatives.
//!
//! Coefficients use the mean normalization: the forward transform divides by
//! the number of grid points, so the zero mode is the spatial mean and
//! `mean(f^2) = sum |c_k|^2`. Grid point `j` along an axis sits at
//! `x_j = j * L / N`; for `L = 2π` this is the point set of `[-π, π)`.

use fst_tensor::fft::BlockFft;
use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

/// Relative tolerance for the Hermitian-symmetry precondition.
pub const HERMITIAN_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("invalid mode grid: {0}")]
    InvalidGrid(String),
    #[error("expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("axis {axis} out of range for a {ndim}-dimensional grid")]
    InvalidAxis { axis: usize, ndim: usize },
    #[error("coefficients violate Hermitian symmetry by {violation:.3e}")]
    NotHermitian { violation: f64 },
    #[error("fields live on different grids or component counts")]
    GridMismatch,
}

/// Mode counts and period of a periodic box.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeGrid {
    dims: Vec<usize>,
    domain_length: f64,
}

impl ModeGrid {
    pub fn new(dims: Vec<usize>, domain_length: f64) -> Result<Self, SpectralError> {
        if dims.is_empty() {
            return Err(SpectralError::InvalidGrid("no dimensions".into()));
        }
        if let Some(n) = dims.iter().find(|&&n| n < 4 || n % 2 != 0) {
            return Err(SpectralError::InvalidGrid(format!(
                "mode count {n} must be even and at least 4"
            )));
        }
        if !(domain_length.is_finite() && domain_length > 0.0) {
            return Err(SpectralError::InvalidGrid(format!(
                "domain length {domain_length} must be positive"
            )));
        }
        Ok(Self {
            dims,
            domain_length,
        })
    }

    /// Grid on the `2π`-periodic box.
    pub fn periodic(dims: &[usize]) -> Result<Self, SpectralError> {
        Self::new(dims.to_vec(), 2.0 * PI)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn domain_length(&self) -> f64 {
        self.domain_length
    }

    /// Total number of modes (equal to the number of grid points).
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn stride(&self, axis: usize) -> usize {
        self.dims[axis + 1..].iter().product()
    }

    /// Integer mode number for storage index `i` along an axis of length `n`:
    /// `0, 1, …, n/2-1, -n/2, …, -1`.
    pub fn signed_mode(i: usize, n: usize) -> i64 {
        if i < n / 2 {
            i as i64
        } else {
            i as i64 - n as i64
        }
    }

    /// Storage index along one axis of the integer mode `m`.
    pub fn storage_index(m: i64, n: usize) -> usize {
        m.rem_euclid(n as i64) as usize
    }

    /// Integer mode numbers of flat index `flat`, one per axis.
    pub fn modes_of(&self, flat: usize) -> Vec<i64> {
        let mut rem = flat;
        let mut out = vec![0; self.ndim()];
        for axis in (0..self.ndim()).rev() {
            let n = self.dims[axis];
            out[axis] = Self::signed_mode(rem % n, n);
            rem /= n;
        }
        out
    }

    /// Integer mode number along `axis` for every flat index.
    pub fn mode_numbers(&self, axis: usize) -> Vec<i64> {
        let n = self.dims[axis];
        let stride = self.stride(axis);
        (0..self.len())
            .map(|flat| Self::signed_mode((flat / stride) % n, n))
            .collect()
    }

    /// Wavenumbers of one axis in FFT order, scaled by `2π / L`.
    pub fn wavenumbers(&self, axis: usize) -> Vec<f64> {
        let n = self.dims[axis];
        let scale = 2.0 * PI / self.domain_length;
        (0..n)
            .map(|i| Self::signed_mode(i, n) as f64 * scale)
            .collect()
    }

    /// Wavenumber along `axis` for every flat index.
    pub fn wavenumber_field(&self, axis: usize) -> Vec<f64> {
        let scale = 2.0 * PI / self.domain_length;
        self.mode_numbers(axis)
            .into_iter()
            .map(|m| m as f64 * scale)
            .collect()
    }

    /// `|k|^2` for every flat index.
    pub fn k_squared(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for axis in 0..self.ndim() {
            for (o, k) in out.iter_mut().zip(self.wavenumber_field(axis)) {
                *o += k * k;
            }
        }
        out
    }

    /// Flat index of the mode `-k` for the mode stored at `flat`.
    pub fn mirror(&self, flat: usize) -> usize {
        let mut rem = flat;
        let mut out = 0;
        let mut mult = 1;
        for axis in (0..self.ndim()).rev() {
            let n = self.dims[axis];
            let i = rem % n;
            rem /= n;
            out += ((n - i) % n) * mult;
            mult *= n;
        }
        out
    }

    /// Physical coordinates along `axis`.
    pub fn coordinates(&self, axis: usize) -> Vec<f64> {
        let n = self.dims[axis];
        let h = self.domain_length / n as f64;
        (0..n).map(|j| j as f64 * h).collect()
    }

    /// Mask keeping modes with `|m_i| <= N_i / 3` on every axis.
    pub fn dealias_mask(&self) -> Vec<bool> {
        let mut keep = vec![true; self.len()];
        for axis in 0..self.ndim() {
            let n = self.dims[axis] as i64;
            for (k, m) in keep.iter_mut().zip(self.mode_numbers(axis)) {
                if 3 * m.abs() > n {
                    *k = false;
                }
            }
        }
        keep
    }

    /// `(i k_axis)^order` per flat index; the Nyquist mode is zeroed for odd orders.
    pub fn derivative_factor(&self, axis: usize, order: u32) -> Vec<Complex64> {
        let n = self.dims[axis];
        let nyquist = -(n as i64) / 2;
        let scale = 2.0 * PI / self.domain_length;
        self.mode_numbers(axis)
            .into_iter()
            .map(|m| {
                if order % 2 == 1 && m == nyquist {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, m as f64 * scale).powu(order)
                }
            })
            .collect()
    }
}

/// Complex Fourier coefficients of `n_fields` components on a [`ModeGrid`].
///
/// Storage is component-major: `coeffs[c * grid.len() + flat]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: ModeGrid,
    n_fields: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn zeros(grid: &ModeGrid, n_fields: usize) -> Self {
        Self {
            grid: grid.clone(),
            n_fields,
            coeffs: vec![Complex64::new(0.0, 0.0); grid.len() * n_fields],
        }
    }

    pub fn from_coeffs(
        grid: &ModeGrid,
        n_fields: usize,
        coeffs: Vec<Complex64>,
    ) -> Result<Self, SpectralError> {
        let expected = grid.len() * n_fields;
        if coeffs.len() != expected || n_fields == 0 {
            return Err(SpectralError::ShapeMismatch {
                expected,
                got: coeffs.len(),
            });
        }
        Ok(Self {
            grid: grid.clone(),
            n_fields,
            coeffs,
        })
    }

    pub fn grid(&self) -> &ModeGrid {
        &self.grid
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<Complex64> {
        self.coeffs
    }

    pub fn component(&self, c: usize) -> &[Complex64] {
        let n = self.grid.len();
        &self.coeffs[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [Complex64] {
        let n = self.grid.len();
        &mut self.coeffs[c * n..(c + 1) * n]
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.n_fields == other.n_fields && self.grid == other.grid
    }

    fn check_layout(&self, other: &Self) -> Result<(), SpectralError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(SpectralError::GridMismatch)
        }
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &Self) -> Result<Self, SpectralError> {
        self.check_layout(other)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(x, y)| x + y * a)
            .collect();
        Ok(Self {
            coeffs,
            ..self.clone()
        })
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c * a).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    /// `sum |c_k|^2` over all modes and components; equals the grid mean of
    /// the summed squared fields.
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Largest `|c(k) - conj(c(-k))|` over all modes and components.
    pub fn hermitian_violation(&self) -> f64 {
        let n = self.grid.len();
        let mut worst = 0.0_f64;
        for c in 0..self.n_fields {
            let comp = &self.coeffs[c * n..(c + 1) * n];
            for (flat, value) in comp.iter().enumerate() {
                let mirror = comp[self.grid.mirror(flat)];
                worst = worst.max((value - mirror.conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian_violation() <= HERMITIAN_TOL * self.max_abs().max(1.0)
    }
}

/// Forward transform of one real field sampled on `grid`.
pub fn forward_transform(values: &[f64], grid: &ModeGrid) -> Result<SpectralField, SpectralError> {
    forward_transform_fields(&[values], grid)
}

/// Forward transform of several real components into one [`SpectralField`].
pub fn forward_transform_fields(
    fields: &[&[f64]],
    grid: &ModeGrid,
) -> Result<SpectralField, SpectralError> {
    let n = grid.len();
    let mut plan = BlockFft::new(grid.dims(), false);
    let scale = 1.0 / n as f64;
    let mut coeffs = Vec::with_capacity(n * fields.len());
    for values in fields {
        if values.len() != n {
            return Err(SpectralError::ShapeMismatch {
                expected: n,
                got: values.len(),
            });
        }
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        plan.process(&mut buf);
        coeffs.extend(buf.into_iter().map(|c| c * scale));
    }
    SpectralField::from_coeffs(grid, fields.len(), coeffs)
}

/// Physical values of every component. Rejects coefficients that are not
/// Hermitian within [`HERMITIAN_TOL`].
pub fn inverse_transform(sf: &SpectralField) -> Result<Vec<Vec<f64>>, SpectralError> {
    let violation = sf.hermitian_violation();
    if violation > HERMITIAN_TOL * sf.max_abs().max(1.0) {
        return Err(SpectralError::NotHermitian { violation });
    }
    Ok(inverse_unchecked(sf))
}

/// Real part of the inverse transform without the symmetry check.
pub(crate) fn inverse_unchecked(sf: &SpectralField) -> Vec<Vec<f64>> {
    let n = sf.grid.len();
    let mut plan = BlockFft::new(sf.grid.dims(), true);
    (0..sf.n_fields)
        .map(|c| {
            let mut buf = sf.coeffs[c * n..(c + 1) * n].to_vec();
            plan.process(&mut buf);
            buf.into_iter().map(|z| z.re).collect()
        })
        .collect()
}

/// Transforms a complex per-mode array (one component) to physical space,
/// keeping the real part.
pub(crate) fn inverse_component(grid: &ModeGrid, coeffs: &[Complex64]) -> Vec<f64> {
    let mut plan = BlockFft::new(grid.dims(), true);
    let mut buf = coeffs.to_vec();
    plan.process(&mut buf);
    buf.into_iter().map(|z| z.re).collect()
}

/// Zeroes every mode with `|m_i| > N_i / 3` on some axis.
pub fn dealias(sf: &SpectralField) -> SpectralField {
    let mask = sf.grid.dealias_mask();
    let mut out = sf.clone();
    let n = sf.grid.len();
    for c in 0..sf.n_fields {
        for (value, keep) in out.coeffs[c * n..(c + 1) * n].iter_mut().zip(&mask) {
            if !keep {
                *value = Complex64::new(0.0, 0.0);
            }
        }
    }
    out
}

/// Multiplies every component by `(i k_axis)^order`.
pub fn spectral_derivative(
    sf: &SpectralField,
    axis: usize,
    order: u32,
) -> Result<SpectralField, SpectralError> {
    if axis >= sf.grid.ndim() {
        return Err(SpectralError::InvalidAxis {
            axis,
            ndim: sf.grid.ndim(),
        });
    }
    let factor = sf.grid.derivative_factor(axis, order);
    let n = sf.grid.len();
    let mut out = sf.clone();
    for c in 0..sf.n_fields {
        for (value, f) in out.coeffs[c * n..(c + 1) * n].iter_mut().zip(&factor) {
            *value *= f;
        }
    }
    Ok(out)
}

/// Averages each coefficient with the conjugate of its mirror mode.
pub fn symmetrize(sf: &SpectralField) -> SpectralField {
    let n = sf.grid.len();
    let mut out = sf.clone();
    for c in 0..sf.n_fields {
        let comp = &sf.coeffs[c * n..(c + 1) * n];
        for flat in 0..n {
            let mirror = comp[sf.grid.mirror(flat)];
            out.coeffs[c * n + flat] = (comp[flat] + mirror.conj()) * 0.5;
        }
    }
    out
}
