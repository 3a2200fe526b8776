//! Container layouts for trajectories and checkpoints, and CSV artifacts.

use crate::container::{find, read_container, write_atomic, write_container, ContainerError, Record};
use crate::spectral::{ModeGrid, SpectralField};
use crate::trajectory::{PdeKind, Trajectory, TrajectoryMeta};
use crate::training::LossRecord;
use crate::transformer::{ModelConfig, ModelParams};
use fst_tensor::Tensor;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("malformed {what}: {reason}")]
    Malformed { what: &'static str, reason: String },
    #[error("csv error on {path}: {reason}")]
    Csv { path: String, reason: String },
}

fn malformed(what: &'static str, reason: impl ToString) -> PersistError {
    PersistError::Malformed {
        what,
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub pde: String,
    pub nu: f64,
    pub dt: f64,
    pub sample_every: usize,
    pub solver_version: String,
    pub grid: Vec<usize>,
    pub domain_length: f64,
    pub n_fields: usize,
    /// Hash of the configuration section that produced the data.
    pub config_hash: String,
}

pub fn trajectory_records(traj: &Trajectory, config_hash: &str) -> Vec<Record> {
    let first = &traj.states[0];
    let grid = first.grid();
    let header = TrajectoryHeader {
        pde: traj.meta.pde.as_str().into(),
        nu: traj.meta.nu,
        dt: traj.meta.dt,
        sample_every: traj.meta.sample_every,
        solver_version: traj.meta.solver_version.clone(),
        grid: grid.dims().to_vec(),
        domain_length: grid.domain_length(),
        n_fields: first.n_fields(),
        config_hash: config_hash.into(),
    };
    let mut shape = vec![traj.len(), first.n_fields()];
    shape.extend_from_slice(grid.dims());
    shape.push(2);
    let coeffs = traj
        .states
        .iter()
        .flat_map(|s| s.coeffs().iter().flat_map(|c| [c.re, c.im]))
        .collect();
    vec![
        Record::text("meta", &toml::to_string(&header).expect("header serializes")),
        Record::f64("times", vec![traj.len()], traj.times.clone()),
        Record::f64("coeffs", shape, coeffs),
    ]
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, config_hash: &str) -> Result<(), PersistError> {
    Ok(write_container(path, &trajectory_records(traj, config_hash))?)
}

pub fn trajectory_from_records(records: &[Record]) -> Result<(TrajectoryHeader, Trajectory), PersistError> {
    let meta_text = find(records, "meta")?
        .as_text()
        .ok_or_else(|| malformed("trajectory", "meta is not text"))?;
    let header: TrajectoryHeader = toml::from_str(meta_text).map_err(|e| malformed("trajectory", e))?;
    let pde = PdeKind::parse(&header.pde).ok_or_else(|| malformed("trajectory", "unknown pde"))?;
    let grid = ModeGrid::new(header.grid.clone(), header.domain_length).map_err(|e| malformed("trajectory", e))?;
    let times = find(records, "times")?
        .as_f64()
        .ok_or_else(|| malformed("trajectory", "times not f64"))?
        .to_vec();
    let coeffs_rec = find(records, "coeffs")?;
    let data = coeffs_rec
        .as_f64()
        .ok_or_else(|| malformed("trajectory", "coeffs not f64"))?;
    let per_state = grid.len() * header.n_fields;
    let mut expected = vec![times.len(), header.n_fields];
    expected.extend_from_slice(grid.dims());
    expected.push(2);
    if coeffs_rec.shape != expected {
        return Err(malformed(
            "trajectory",
            format!("coeffs shape {:?}, expected {expected:?}", coeffs_rec.shape),
        ));
    }
    let states = data
        .chunks_exact(2 * per_state)
        .map(|chunk| {
            let c = chunk.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
            SpectralField::from_coeffs(&grid, header.n_fields, c).map_err(|e| malformed("trajectory", e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let meta = TrajectoryMeta {
        pde,
        nu: header.nu,
        dt: header.dt,
        sample_every: header.sample_every,
        solver_version: header.solver_version.clone(),
    };
    Ok((header, Trajectory { meta, times, states }))
}

pub fn read_trajectory(path: &Path) -> Result<(TrajectoryHeader, Trajectory), PersistError> {
    trajectory_from_records(&read_container(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub pde: String,
    pub grid: Vec<usize>,
    pub t_norm: f64,
    pub loss: String,
    pub config_hash: String,
    pub trajectory_hash: String,
    pub d_model: usize,
    pub n_head: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    pub mode_dims: Vec<usize>,
    pub d_input: usize,
    pub d_output: usize,
    pub residual: bool,
    pub layer_norm_eps: f64,
}

impl CheckpointHeader {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_head: self.n_head,
            n_layers: self.n_layers,
            seq_len: self.seq_len,
            mode_dims: self.mode_dims.clone(),
            d_input: self.d_input,
            d_output: self.d_output,
            residual: self.residual,
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

pub struct CheckpointInfo<'a> {
    pub pde: PdeKind,
    pub grid: &'a [usize],
    pub t_norm: f64,
    pub loss: &'a str,
    pub config_hash: &'a str,
    pub trajectory_hash: &'a str,
}

pub fn write_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams,
    info: &CheckpointInfo<'_>,
) -> Result<(), PersistError> {
    let header = CheckpointHeader {
        pde: info.pde.as_str().into(),
        grid: info.grid.to_vec(),
        t_norm: info.t_norm,
        loss: info.loss.into(),
        config_hash: info.config_hash.into(),
        trajectory_hash: info.trajectory_hash.into(),
        d_model: config.d_model,
        n_head: config.n_head,
        n_layers: config.n_layers,
        seq_len: config.seq_len,
        mode_dims: config.mode_dims.clone(),
        d_input: config.d_input,
        d_output: config.d_output,
        residual: config.residual,
        layer_norm_eps: config.layer_norm_eps,
    };
    let mut records = vec![Record::text(
        "meta",
        &toml::to_string(&header).expect("header serializes"),
    )];
    for (name, t) in params.entries() {
        records.push(Record::f64(name.clone(), t.shape().to_vec(), t.data().to_vec()));
    }
    Ok(write_container(path, &records)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams), PersistError> {
    let records = read_container(path)?;
    let meta_text = find(&records, "meta")?
        .as_text()
        .ok_or_else(|| malformed("checkpoint", "meta is not text"))?;
    let header: CheckpointHeader = toml::from_str(meta_text).map_err(|e| malformed("checkpoint", e))?;
    let config = header.model_config();
    let entries = records
        .iter()
        .filter(|r| r.name != "meta")
        .map(|r| {
            let data = r
                .as_f64()
                .ok_or_else(|| malformed("checkpoint", format!("{} is not f64", r.name)))?;
            let t = Tensor::new(r.shape.clone(), data.to_vec()).map_err(|e| malformed("checkpoint", e))?;
            Ok((r.name.clone(), t))
        })
        .collect::<Result<Vec<_>, PersistError>>()?;
    let params = ModelParams::from_entries(&config, entries).map_err(|e| malformed("checkpoint", e))?;
    Ok((header, params))
}

/// Writes a CSV file atomically.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), PersistError> {
    let csv_err = |e: csv::Error| PersistError::Csv {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| PersistError::Csv {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(write_atomic(path, &bytes)?)
}

/// `step,loss,lr`: deterministic for a fixed configuration and seed.
pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<(), PersistError> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| vec![r.step.to_string(), r.loss.to_string(), r.lr.to_string()])
        .collect();
    write_csv(path, &["step", "loss", "lr"], &rows)
}

/// `step,wall_ms`: elapsed wall-clock time, kept apart from the loss file.
pub fn write_timing_csv(path: &Path, history: &[LossRecord]) -> Result<(), PersistError> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| vec![r.step.to_string(), format!("{:.3}", r.wall_ms)])
        .collect();
    write_csv(path, &["step", "wall_ms"], &rows)
}

/// `t,mse,interval` with `interval` either `train` or `test`.
pub fn write_mse_csv(path: &Path, rows: &[(f64, f64, &str)]) -> Result<(), PersistError> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|(t, m, l)| vec![t.to_string(), m.to_string(), l.to_string()])
        .collect();
    write_csv(path, &["t", "mse", "interval"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::burgers1d::{negative_sine_state, simulate_burgers, BENCHMARK_NU};
    use crate::transformer::init_params;

    #[test]
    fn trajectory_roundtrip() {
        let s = negative_sine_state(16, BENCHMARK_NU).unwrap();
        let traj = simulate_burgers(&s, 1e-3, 20, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.fsta");
        write_trajectory(&path, &traj, "abc").unwrap();
        let (header, back) = read_trajectory(&path).unwrap();
        assert_eq!(back, traj);
        assert_eq!(header.config_hash, "abc");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = ModelConfig {
            d_model: 8,
            n_head: 2,
            ..ModelConfig::new(vec![4], 1)
        };
        let params = init_params(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.fsta");
        let info = CheckpointInfo {
            pde: PdeKind::Burgers1d,
            grid: &[4],
            t_norm: 3.0,
            loss: "mse",
            config_hash: "h",
            trajectory_hash: "t",
        };
        write_checkpoint(&path, &cfg, &params, &info).unwrap();
        let (header, back) = read_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(header.model_config(), cfg);
    }

    #[test]
    fn csv_has_header_and_plain_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mse.csv");
        write_mse_csv(&path, &[(3.01, 1.5e-4, "test")]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "t,mse,interval\n3.01,0.00015,test\n");
    }
}
