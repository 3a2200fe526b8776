//! Attention-only sequence model over windows of spectral coefficients.
//!
//! A window of `S` states is flattened per step into `modes × d_input`
//! features, embedded to `d_model`, passed through `L` blocks of multi-head
//! self-attention followed by layer normalization, and the last position is
//! decoded to the next state's coefficients.

use crate::ns2d::project_divergence_free;
use crate::spectral::{symmetrize, ModeGrid, SpectralError, SpectralField};
use crate::trajectory::SolverError;
use fst_tensor::{Tape, Tensor, TensorError, Var};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite activations in {location}")]
    NonFinite { location: String },
    #[error("missing or malformed parameter `{0}`")]
    Parameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_head: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    /// Retained mode counts per direction; a centered low-mode block of the
    /// solver grid.
    pub mode_dims: Vec<usize>,
    /// Features per mode and step: `(Re, Im)` per component, then time.
    pub d_input: usize,
    /// Features per predicted mode: `(Re, Im)` per component.
    pub d_output: usize,
    /// Add the block input back before normalization.
    pub residual: bool,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Defaults for a PDE with `n_fields` velocity components on `mode_dims`.
    pub fn new(mode_dims: Vec<usize>, n_fields: usize) -> Self {
        Self {
            d_model: 128,
            n_head: 4,
            n_layers: 2,
            seq_len: 10,
            mode_dims,
            d_input: 2 * n_fields + 1,
            d_output: 2 * n_fields,
            residual: true,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.mode_dims.iter().product()
    }

    pub fn n_fields(&self) -> usize {
        self.d_output / 2
    }

    /// Flattened features per time step.
    pub fn step_features(&self) -> usize {
        self.n_modes() * self.d_input
    }

    pub fn output_len(&self) -> usize {
        self.n_modes() * self.d_output
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_head == 0 || self.d_model % self.n_head != 0 {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_head ({})",
                self.d_model, self.n_head
            ));
        }
        if self.seq_len == 0 || self.n_layers == 0 {
            return bad("seq_len and n_layers must be at least 1".into());
        }
        if self.mode_dims.is_empty() || self.mode_dims.iter().any(|&n| n < 2 || n % 2 != 0) {
            return bad(format!("mode_dims {:?} must be even and at least 2", self.mode_dims));
        }
        if self.d_output == 0 || self.d_output % 2 != 0 || self.d_input != self.d_output + 1 {
            return bad(format!(
                "d_input ({}) must equal d_output ({}) + 1 with d_output even",
                self.d_input, self.d_output
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Canonical parameter names and shapes, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut specs = vec![
            ("embedding.weight".into(), vec![self.step_features(), d]),
            ("embedding.bias".into(), vec![d]),
        ];
        for i in 0..self.n_layers {
            for role in ["query", "key", "value", "output"] {
                specs.push((format!("layers.{i}.attention.{role}.weight"), vec![d, d]));
                specs.push((format!("layers.{i}.attention.{role}.bias"), vec![d]));
            }
            specs.push((format!("layers.{i}.norm.gamma"), vec![d]));
            specs.push((format!("layers.{i}.norm.beta"), vec![d]));
        }
        specs.push(("decoder.weight".into(), vec![d, self.output_len()]));
        specs.push(("decoder.bias".into(), vec![self.output_len()]));
        specs
    }
}

/// Learnable tensors keyed by canonical path, in [`ModelConfig::param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn from_entries(
        config: &ModelConfig,
        mut entries: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let specs = config.param_specs();
        let mut ordered = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let pos = entries
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| ModelError::Parameter(name.clone()))?;
            let (_, t) = entries.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Shape {
                    what: "parameter",
                    expected: shape,
                    got: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(ModelError::NonFinite { location: name });
            }
            ordered.push((name, t));
        }
        if let Some((extra, _)) = entries.first() {
            return Err(ModelError::Parameter(extra.clone()));
        }
        Ok(Self { entries: ordered })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn n_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Replaces all values from a flat vector in canonical order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.n_params() {
            return Err(ModelError::Shape {
                what: "flat parameters",
                expected: vec![self.n_params()],
                got: vec![flat.len()],
            });
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Deterministic initialization: weights `N(0, 1/fan_in)`, biases zero,
/// normalization gain one and shift zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = config
        .param_specs()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".weight") {
                let std = 1.0 / (shape[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
                    .expect("spec shape")
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            (name, t)
        })
        .collect();
    Ok(ModelParams { entries })
}

/// Parameters registered on a tape, in canonical order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Registers every parameter as a differentiable leaf (or a constant).
    pub fn attach(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Intermediate values exposed for inspection.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[batch, mode_dims..., d_output]`.
    pub output: Var,
    /// Attention weights `[batch, S, S]`, indexed `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

fn finite_check(tape: &Tape, v: Var, location: impl FnOnce() -> String) -> Result<(), ModelError> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite {
            location: location(),
        })
    }
}

/// Builds the forward graph for input `[batch, S, step_features]`.
pub fn forward_traced(
    config: &ModelConfig,
    tape: &mut Tape,
    p: &ParamVars,
    input: Var,
) -> Result<ForwardTrace, ModelError> {
    let shape = tape.shape(input).to_vec();
    let expected = [config.seq_len, config.step_features()];
    if shape.len() != 3 || shape[1..] != expected {
        return Err(ModelError::Shape {
            what: "model input",
            expected: expected.to_vec(),
            got: shape,
        });
    }
    let (b, s, d) = (shape[0], config.seq_len, config.d_model);
    let dh = config.head_dim();
    let v = &p.vars;
    let dense = |tape: &mut Tape, x: Var, w: Var, bias: Var| -> Result<Var, TensorError> {
        let y = tape.matmul(x, w)?;
        tape.add_broadcast(y, bias)
    };

    let mut h = dense(tape, input, v[0], v[1])?;
    finite_check(tape, h, || "embedding".into())?;
    let mut attention = Vec::with_capacity(config.n_layers);
    let per_layer = 10;
    for layer in 0..config.n_layers {
        let lp = &v[2 + layer * per_layer..2 + (layer + 1) * per_layer];
        let q = dense(tape, h, lp[0], lp[1])?;
        let k = dense(tape, h, lp[2], lp[3])?;
        let val = dense(tape, h, lp[4], lp[5])?;
        let mut heads = Vec::with_capacity(config.n_head);
        let mut weights = Vec::with_capacity(config.n_head);
        let scale = 1.0 / (dh as f64).sqrt();
        for head in 0..config.n_head {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = tape.slice(q, 2, lo, hi)?;
            let kh = tape.slice(k, 2, lo, hi)?;
            let vh = tape.slice(val, 2, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.bmm(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let a = tape.softmax(scores, 2)?;
            weights.push(a);
            heads.push(tape.bmm(a, vh)?);
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 2)?
        };
        let attn = dense(tape, ctx, lp[6], lp[7])?;
        let pre = if config.residual {
            tape.add(h, attn)?
        } else {
            attn
        };
        let normed = tape.layer_norm(pre, 2, config.layer_norm_eps)?;
        let scaled = tape.mul_broadcast(normed, lp[8])?;
        h = tape.add_broadcast(scaled, lp[9])?;
        finite_check(tape, h, || format!("layers.{layer}"))?;
        attention.push(weights);
    }
    let last = tape.slice(h, 1, s - 1, s)?;
    let last = tape.reshape(last, &[b, d])?;
    let n = v.len();
    let out = dense(tape, last, v[n - 2], v[n - 1])?;
    finite_check(tape, out, || "decoder".into())?;
    let mut out_shape = vec![b];
    out_shape.extend_from_slice(&config.mode_dims);
    out_shape.push(config.d_output);
    let output = tape.reshape(out, &out_shape)?;
    Ok(ForwardTrace { output, attention })
}

pub fn forward(
    config: &ModelConfig,
    tape: &mut Tape,
    p: &ParamVars,
    input: Var,
) -> Result<Var, ModelError> {
    Ok(forward_traced(config, tape, p, input)?.output)
}

/// Forward pass without gradient tracking; returns the output tensor.
pub fn predict(config: &ModelConfig, params: &ModelParams, input: Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let p = ParamVars::attach(&mut tape, params, false);
    let x = tape.constant(input);
    let y = forward(config, &mut tape, &p, x)?;
    Ok(tape.value(y).clone())
}

/// Flat indices in `full` of the centered low-mode block with `mode_dims`
/// modes per axis, enumerated in the block's own FFT order.
pub fn retained_indices(full: &ModeGrid, mode_dims: &[usize]) -> Result<Vec<usize>, ModelError> {
    if mode_dims.len() != full.ndim() || mode_dims.iter().zip(full.dims()).any(|(m, n)| m > n) {
        return Err(ModelError::Config(format!(
            "mode_dims {mode_dims:?} must fit inside grid {:?}",
            full.dims()
        )));
    }
    let total: usize = mode_dims.iter().product();
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = 0;
        let mut mult = 1;
        for axis in (0..mode_dims.len()).rev() {
            let m = mode_dims[axis];
            let signed = ModeGrid::signed_mode(rem % m, m);
            rem /= m;
            let n = full.dims()[axis];
            idx += ModeGrid::storage_index(signed, n) * mult;
            mult *= n;
        }
        out.push(idx);
    }
    Ok(out)
}

/// Coefficient features of one state on the retained modes, mode-major with
/// channels `(Re, Im)` per component.
pub fn state_features(sf: &SpectralField, retained: &[usize]) -> Vec<f64> {
    let f = sf.n_fields();
    let mut out = Vec::with_capacity(retained.len() * 2 * f);
    for &idx in retained {
        for c in 0..f {
            let z = sf.component(c)[idx];
            out.push(z.re);
            out.push(z.im);
        }
    }
    out
}

/// Appends one time step (coefficient features plus the normalized time
/// channel) to `row`.
pub fn push_step(row: &mut Vec<f64>, features: &[f64], n_channels: usize, t_scaled: f64) {
    for mode in features.chunks_exact(n_channels) {
        row.extend_from_slice(mode);
        row.push(t_scaled);
    }
}

/// Input window `[1, S, modes · d_input]` from `S` consecutive states.
pub fn build_input_window(
    config: &ModelConfig,
    states: &[SpectralField],
    times: &[f64],
    t_norm: f64,
) -> Result<Tensor, ModelError> {
    if states.len() != config.seq_len || times.len() != config.seq_len {
        return Err(ModelError::Shape {
            what: "window length",
            expected: vec![config.seq_len],
            got: vec![states.len(), times.len()],
        });
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ModelError::Config("window times must be strictly increasing".into()));
    }
    if !(t_norm > 0.0) {
        return Err(ModelError::Config("t_norm must be positive".into()));
    }
    let grid = states[0].grid();
    if states
        .iter()
        .any(|s| s.grid() != grid || s.n_fields() != config.n_fields())
    {
        return Err(SpectralError::GridMismatch.into());
    }
    let retained = retained_indices(grid, &config.mode_dims)?;
    let mut row = Vec::with_capacity(config.seq_len * config.step_features());
    for (s, &t) in states.iter().zip(times) {
        push_step(&mut row, &state_features(s, &retained), config.d_output, t / t_norm);
    }
    Ok(Tensor::new(vec![1, config.seq_len, config.step_features()], row)?)
}

/// Converts one raw network output (`modes × d_output`, retained block) into
/// a Hermitian spectrum on `grid`, optionally projected to zero divergence.
pub fn symmetrize_prediction(
    raw: &[f64],
    grid: &ModeGrid,
    config: &ModelConfig,
    project: bool,
) -> Result<SpectralField, ModelError> {
    if raw.len() != config.output_len() {
        return Err(ModelError::Shape {
            what: "prediction",
            expected: vec![config.output_len()],
            got: vec![raw.len()],
        });
    }
    let retained = retained_indices(grid, &config.mode_dims)?;
    let f = config.n_fields();
    let mut sf = SpectralField::zeros(grid, f);
    let n = grid.len();
    for (m, &idx) in retained.iter().enumerate() {
        for c in 0..f {
            let base = m * 2 * f + 2 * c;
            sf.coeffs_mut()[c * n + idx] = Complex64::new(raw[base], raw[base + 1]);
        }
    }
    let sym = symmetrize(&sf);
    if project && f == 2 && grid.ndim() == 2 {
        Ok(project_divergence_free(&sym)?)
    } else {
        Ok(sym)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::forward_transform;

    fn toy() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_head: 2,
            n_layers: 2,
            seq_len: 3,
            ..ModelConfig::new(vec![4], 1)
        }
    }

    #[test]
    fn config_validation() {
        assert!(toy().validate().is_ok());
        assert!(ModelConfig { n_head: 3, ..toy() }.validate().is_err());
        assert!(ModelConfig { seq_len: 0, ..toy() }.validate().is_err());
        assert!(ModelConfig { d_input: 4, ..toy() }.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = init_params(&toy(), 7).unwrap();
        assert_eq!(a, init_params(&toy(), 7).unwrap());
        assert_ne!(a.to_flat(), init_params(&toy(), 8).unwrap().to_flat());
        assert!(a.get("layers.1.norm.gamma").unwrap().data().iter().all(|&g| g == 1.0));
        assert!(a.get("decoder.bias").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn flat_roundtrip() {
        let a = init_params(&toy(), 1).unwrap();
        let mut b = init_params(&toy(), 2).unwrap();
        b.set_flat(&a.to_flat()).unwrap();
        assert_eq!(a, b);
        assert!(b.set_flat(&[0.0]).is_err());
    }

    #[test]
    fn from_entries_rejects_missing_and_extra() {
        let cfg = toy();
        let a = init_params(&cfg, 1).unwrap();
        let mut entries = a.entries().to_vec();
        entries.reverse();
        assert_eq!(ModelParams::from_entries(&cfg, entries.clone()).unwrap(), a);
        entries.pop();
        assert!(ModelParams::from_entries(&cfg, entries).is_err());
        let mut extra = a.entries().to_vec();
        extra.push(("stray".into(), Tensor::scalar(1.0)));
        assert!(ModelParams::from_entries(&cfg, extra).is_err());
    }

    #[test]
    fn window_features_of_sine() {
        let cfg = ModelConfig {
            seq_len: 1,
            ..ModelConfig::new(vec![8], 1)
        };
        let g = ModeGrid::periodic(&[8]).unwrap();
        let u: Vec<f64> = g.coordinates(0).iter().map(|x| x.sin()).collect();
        let s = forward_transform(&u, &g).unwrap();
        let w = build_input_window(&cfg, &[s], &[3.0], 3.0).unwrap();
        assert_eq!(w.shape(), &[1, 1, 24]);
        for m in 0..8 {
            let f = &w.data()[3 * m..3 * m + 3];
            let im = match m {
                1 => -0.5,
                7 => 0.5,
                _ => 0.0,
            };
            assert!(f[0].abs() < 1e-16 && (f[1] - im).abs() < 1e-16);
            assert_eq!(f[2], 1.0);
        }
    }

    #[test]
    fn retained_block_is_centered() {
        let g = ModeGrid::periodic(&[8, 8]).unwrap();
        let r = retained_indices(&g, &[4, 4]).unwrap();
        // Signed modes (0,1,-2,-1) per axis map to storage (0,1,6,7).
        let axis = [0usize, 1, 6, 7];
        let expected: Vec<usize> = axis
            .iter()
            .flat_map(|&i| axis.iter().map(move |&j| i * 8 + j))
            .collect();
        assert_eq!(r, expected);
        assert!(retained_indices(&g, &[10, 4]).is_err());
    }

    #[test]
    fn symmetrize_splits_unpaired_mode() {
        let cfg = ModelConfig::new(vec![8], 1);
        let g = ModeGrid::periodic(&[8]).unwrap();
        let mut raw = vec![0.0; 16];
        raw[2 * 3] = 1.0;
        let sf = symmetrize_prediction(&raw, &g, &cfg, false).unwrap();
        assert_eq!(sf.coeffs()[3], Complex64::new(0.5, 0.0));
        assert_eq!(sf.coeffs()[5], Complex64::new(0.5, 0.0));
        let again = symmetrize_prediction(&crate::ns2d::pack_channels(&sf), &g, &cfg, false).unwrap();
        assert_eq!(again, sf);
    }
}
