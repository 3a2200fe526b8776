//! Experiment configuration: TOML text merged over per-PDE defaults.

use crate::burgers1d::{NonlinearForm, BENCHMARK_NU};
use crate::spectral::ModeGrid;
use crate::trajectory::PdeKind;
use crate::training::{AdamConfig, LossMode, TrainConfig};
use crate::transformer::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    /// `ns2d` or `burgers1d`.
    pub kind: String,
    pub grid: Vec<usize>,
    pub domain_length: f64,
    pub nu: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub sample_every: usize,
    /// Burgers only: `conservative` or `advective`.
    pub nonlinear_form: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    /// Training interval is `[0, train_end]`; the test interval follows it up
    /// to the end of the trajectory.
    pub train_end: f64,
    /// Divisor of the time channel; the end of training maps to 1.
    pub t_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_head: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    pub mode_dims: Vec<usize>,
    pub residual: bool,
    pub layer_norm_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// `mse` or `physics`.
    pub loss: String,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ic_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSection {
    /// `closed_loop` or `teacher_forced`.
    pub mode: String,
    /// Project NS predictions onto divergence-free fields.
    pub project: bool,
    /// Rollout length in samples; 0 means "to the end of the trajectory".
    pub horizon: usize,
    /// Times at which 1D slice plots are drawn.
    pub slice_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub init: u64,
    pub shuffle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pde: PdeSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub forecast: ForecastSection,
    pub seeds: SeedsSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Defaults for one PDE.
    pub fn defaults(pde: PdeKind) -> Self {
        let (grid, nu, dt, n_steps, sample_every, train_end, slices) = match pde {
            PdeKind::Ns2d => (vec![32, 32], 1e-3, 0.1, 2000, 1, 100.0, vec![]),
            PdeKind::Burgers1d => (
                vec![256],
                BENCHMARK_NU,
                1e-3,
                5500,
                10,
                3.0,
                vec![0.5, 1.5, 3.0, 4.0, 5.0, 5.5],
            ),
        };
        Self {
            pde: PdeSection {
                kind: pde.as_str().into(),
                grid: grid.clone(),
                domain_length: 2.0 * PI,
                nu,
                dt,
                n_steps,
                sample_every,
                nonlinear_form: "conservative".into(),
            },
            split: SplitSection {
                train_end,
                t_norm: train_end,
            },
            model: ModelSection {
                d_model: 128,
                n_head: 4,
                n_layers: 2,
                seq_len: 10,
                mode_dims: grid,
                residual: true,
                layer_norm_eps: 1e-5,
            },
            training: TrainingSection {
                loss: "mse".into(),
                steps: 2000,
                batch_size: 32,
                lr: 1e-3,
                lr_min: 1e-5,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                ic_weight: 1.0,
            },
            forecast: ForecastSection {
                mode: "closed_loop".into(),
                project: true,
                horizon: 0,
                slice_times: slices,
            },
            seeds: SeedsSection { init: 0, shuffle: 0 },
            output: OutputSection {
                dir: format!("runs/{}", pde.as_str()),
            },
        }
    }

    /// Parses TOML, filling every omitted field from the defaults of the
    /// PDE named in `pde.kind` (Burgers when absent), then validates.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Value = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let kind = user
            .get("pde")
            .and_then(|p| p.get("kind"))
            .and_then(|k| k.as_str())
            .unwrap_or("burgers1d");
        let pde = PdeKind::parse(kind)
            .ok_or_else(|| ConfigError::Invalid(vec![format!("pde.kind: unknown PDE `{kind}`")]))?;
        let mut base = toml::Value::try_from(Self::defaults(pde))
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        // Mode counts follow the grid unless set explicitly.
        if let Some(grid) = user.get("pde").and_then(|p| p.get("grid")) {
            if let Some(model) = base.get_mut("model").and_then(|m| m.as_table_mut()) {
                model.insert("mode_dims".into(), grid.clone());
            }
        }
        if let Some(end) = user.get("split").and_then(|p| p.get("train_end")) {
            if let Some(split) = base.get_mut("split").and_then(|m| m.as_table_mut()) {
                split.insert("t_norm".into(), end.clone());
            }
        }
        merge(&mut base, user);
        let cfg: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, as lowercase hex.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml_string().as_bytes())
    }

    /// Hash of the fields that determine the generated trajectory.
    pub fn trajectory_hash(&self) -> String {
        hex_digest(toml::to_string(&self.pde).expect("pde serializes").as_bytes())
    }

    pub fn pde_kind(&self) -> PdeKind {
        PdeKind::parse(&self.pde.kind).expect("validated")
    }

    pub fn nonlinear_form(&self) -> NonlinearForm {
        match self.pde.nonlinear_form.as_str() {
            "advective" => NonlinearForm::Advective,
            _ => NonlinearForm::Conservative,
        }
    }

    pub fn grid(&self) -> ModeGrid {
        ModeGrid::new(self.pde.grid.clone(), self.pde.domain_length).expect("validated")
    }

    pub fn t_end(&self) -> f64 {
        self.pde.n_steps as f64 * self.pde.dt
    }

    pub fn loss_mode(&self) -> LossMode {
        LossMode::parse(&self.training.loss).expect("validated")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let f = self.pde_kind().n_fields();
        ModelConfig {
            d_model: m.d_model,
            n_head: m.n_head,
            n_layers: m.n_layers,
            seq_len: m.seq_len,
            mode_dims: m.mode_dims.clone(),
            d_input: 2 * f + 1,
            d_output: 2 * f,
            residual: m.residual,
            layer_norm_eps: m.layer_norm_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_min: t.lr_min,
            adam: AdamConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            loss: self.loss_mode(),
            ic_weight: t.ic_weight,
            shuffle_seed: self.seeds.shuffle,
        }
    }

    /// Checks every field; errors name the offending path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        let p = &self.pde;
        let pde = PdeKind::parse(&p.kind);
        need(pde.is_some(), format!("pde.kind: unknown PDE `{}`", p.kind));
        if let Some(pde) = pde {
            let d = match pde {
                PdeKind::Ns2d => 2,
                PdeKind::Burgers1d => 1,
            };
            need(
                p.grid.len() == d,
                format!("pde.grid: {} needs {d} dimensions, got {}", p.kind, p.grid.len()),
            );
        }
        need(
            p.grid.iter().all(|&n| n >= 4 && n % 2 == 0),
            format!("pde.grid: mode counts {:?} must be even and at least 4", p.grid),
        );
        need(positive(p.domain_length), format!("pde.domain_length: must be positive, got {}", p.domain_length));
        if pde == Some(PdeKind::Ns2d) {
            // The Taylor–Green initial condition is 2π-periodic.
            need(
                (p.domain_length - 2.0 * PI).abs() < 1e-12,
                format!("pde.domain_length: ns2d runs on [0, 2π)², got {}", p.domain_length),
            );
        }
        need(positive(p.nu), format!("pde.nu: must be positive, got {}", p.nu));
        need(positive(p.dt), format!("pde.dt: must be positive, got {}", p.dt));
        need(p.n_steps >= 1, "pde.n_steps: must be at least 1".into());
        need(
            p.sample_every >= 1 && p.n_steps % p.sample_every.max(1) == 0,
            format!("pde.sample_every: {} must divide n_steps {}", p.sample_every, p.n_steps),
        );
        need(
            matches!(p.nonlinear_form.as_str(), "conservative" | "advective"),
            format!("pde.nonlinear_form: unknown form `{}`", p.nonlinear_form),
        );
        let s = &self.split;
        need(positive(s.train_end), format!("split.train_end: must be positive, got {}", s.train_end));
        need(
            s.train_end <= self.t_end() + 1e-12,
            format!("split.train_end: {} exceeds the trajectory end {}", s.train_end, self.t_end()),
        );
        need(positive(s.t_norm), format!("split.t_norm: must be positive, got {}", s.t_norm));
        let m = &self.model;
        need(
            m.n_head >= 1 && m.d_model >= 1 && m.d_model % m.n_head.max(1) == 0,
            format!("model.d_model: {} must be a positive multiple of model.n_head {}", m.d_model, m.n_head),
        );
        need(m.n_layers >= 1, "model.n_layers: must be at least 1".into());
        need(m.seq_len >= 1, "model.seq_len: must be at least 1".into());
        need(
            m.mode_dims.len() == p.grid.len()
                && m.mode_dims.iter().zip(&p.grid).all(|(a, b)| a <= b && *a >= 2 && a % 2 == 0),
            format!("model.mode_dims: {:?} must be even and fit inside pde.grid {:?}", m.mode_dims, p.grid),
        );
        need(positive(m.layer_norm_eps), "model.layer_norm_eps: must be positive".into());
        let t = &self.training;
        let loss = LossMode::parse(&t.loss);
        need(loss.is_some(), format!("training.loss: unknown mode `{}`", t.loss));
        if loss == Some(LossMode::Physics) {
            need(
                m.mode_dims == p.grid,
                "training.loss: physics loss needs model.mode_dims equal to pde.grid".into(),
            );
        }
        need(t.batch_size >= 1, "training.batch_size: must be at least 1".into());
        need(t.lr >= 0.0 && t.lr.is_finite(), format!("training.lr: invalid value {}", t.lr));
        need(
            t.lr_min >= 0.0 && t.lr_min <= t.lr,
            format!("training.lr_min: must lie in [0, lr], got {}", t.lr_min),
        );
        need((0.0..1.0).contains(&t.beta1), "training.beta1: must lie in [0, 1)".into());
        need((0.0..1.0).contains(&t.beta2), "training.beta2: must lie in [0, 1)".into());
        need(positive(t.eps), "training.eps: must be positive".into());
        need(t.ic_weight >= 0.0 && t.ic_weight.is_finite(), "training.ic_weight: must be non-negative".into());
        let f = &self.forecast;
        need(
            matches!(f.mode.as_str(), "closed_loop" | "teacher_forced"),
            format!("forecast.mode: unknown mode `{}`", f.mode),
        );
        need(!self.output.dir.is_empty(), "output.dir: must not be empty".into());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Recursively overwrites `base` with the entries of `over`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
