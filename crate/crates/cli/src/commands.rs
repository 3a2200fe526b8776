use crate::error::CliError;
use crate::manifest::Manifest;
use fst_core::burgers1d::{Burgers1d, BurgersState};
use fst_core::config::ExperimentConfig;
use fst_core::forecast::{
    interval_label, mse_curve, reconstruct_and_compare, rollout, NextStepModel, RolloutMode,
    TransformerModel,
};
use fst_core::ns2d::{field_errors, max_divergence, taylor_green, taylor_green_state, Ns2d};
use fst_core::persist::{
    read_checkpoint, read_trajectory, write_checkpoint, write_csv, write_loss_csv, write_mse_csv,
    write_timing_csv, write_trajectory, CheckpointInfo, TrajectoryHeader,
};
use fst_core::container::{write_container, Record};
use fst_core::plot::{write_heatmap_panels, LinePlot, Marker, Panel, Series};
use fst_core::spectral::{forward_transform, inverse_transform, ModeGrid};
use fst_core::trajectory::{PdeKind, Trajectory};
use fst_core::training::{build_windows, tape_rhs_for, LossMode};
use fst_core::transformer::init_params;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const TRAJECTORY_FILE: &str = "trajectory.fsta";
const SPLIT_LABEL: &str = "end of training interval";

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.output.dir)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Compact time label for file names: `3`, `0.5`, `100.1`.
fn time_tag(t: f64) -> String {
    let s = format!("{t:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn find_index(traj: &Trajectory, t: f64) -> Option<usize> {
    let tol = 1e-9 * traj.meta.sample_interval().max(1e-300);
    traj.times.iter().position(|&s| (s - t).abs() <= tol)
}

fn field_names(pde: PdeKind) -> &'static [&'static str] {
    match pde {
        PdeKind::Ns2d => &["u", "v"],
        PdeKind::Burgers1d => &["u"],
    }
}

/// Rearranges an `[n_x][n_y]` field into image rows of constant `y`.
fn to_image(field: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    let mut img = vec![0.0; nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            img[iy * nx + ix] = field[ix * ny + iy];
        }
    }
    img
}

fn check_trajectory_matches(cfg: &ExperimentConfig, header: &TrajectoryHeader) -> Result<(), CliError> {
    let p = &cfg.pde;
    let mut diffs = Vec::new();
    if header.pde != p.kind {
        diffs.push(format!("pde {} vs config {}", header.pde, p.kind));
    }
    if header.grid != p.grid {
        diffs.push(format!("grid {:?} vs config {:?}", header.grid, p.grid));
    }
    if header.nu != p.nu {
        diffs.push(format!("nu {} vs config {}", header.nu, p.nu));
    }
    if header.dt != p.dt || header.sample_every != p.sample_every {
        diffs.push(format!(
            "sampling dt={} every {} vs config dt={} every {}",
            header.dt, header.sample_every, p.dt, p.sample_every
        ));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(format!(
            "trajectory incompatible with config: {}",
            diffs.join("; ")
        )))
    }
}

pub fn generate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg);
    let grid = cfg.grid();
    let p = &cfg.pde;
    let traj = match cfg.pde_kind() {
        PdeKind::Ns2d => {
            let init = taylor_green_state(0.0, &grid, p.nu)?;
            Ns2d::new(&grid, p.nu)?.simulate(&init, p.dt, p.n_steps, p.sample_every)?
        }
        PdeKind::Burgers1d => {
            let u: Vec<f64> = grid
                .coordinates(0)
                .iter()
                .map(|&x| -(2.0 * PI * x / p.domain_length).sin())
                .collect();
            let init = BurgersState {
                spectrum: forward_transform(&u, &grid)?,
                time: 0.0,
                nu: p.nu,
            };
            Burgers1d::new(&grid, p.nu, cfg.nonlinear_form())?.simulate(&init, p.dt, p.n_steps, p.sample_every)?
        }
    };
    write_trajectory(&dir.join(TRAJECTORY_FILE), &traj, &cfg.trajectory_hash())?;

    let mut manifest = Manifest::new("generate", cfg);
    manifest.output(TRAJECTORY_FILE);
    manifest.summary("n_states", traj.len() as f64);
    manifest.summary("t_end", *traj.times.last().unwrap_or(&0.0));
    if cfg.pde_kind() == PdeKind::Ns2d {
        let mut worst = 0.0f64;
        for s in &traj.states {
            worst = worst.max(max_divergence(s)?);
        }
        manifest.summary("max_divergence", worst);
    }
    manifest.write(&dir)?;
    println!(
        "generated {} {} states on t in [0, {}] -> {}",
        traj.len(),
        p.kind,
        traj.times.last().unwrap_or(&0.0),
        dir.join(TRAJECTORY_FILE).display()
    );
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, trajectory: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out_dir(cfg);
    let traj_path = trajectory.unwrap_or_else(|| dir.join(TRAJECTORY_FILE));
    let (header, traj) = read_trajectory(&traj_path)?;
    check_trajectory_matches(cfg, &header)?;

    let model = cfg.model_config();
    let data = build_windows(Arc::new(traj), &model, (0.0, cfg.split.train_end), cfg.split.t_norm)?;
    let init = init_params(&model, cfg.seeds.init)?;
    let tc = cfg.train_config();
    let rhs = match tc.loss {
        LossMode::Physics => Some(tape_rhs_for(cfg.pde_kind(), &cfg.grid(), cfg.pde.nu)?),
        LossMode::Mse => None,
    };
    let outcome = fst_core::training::train(init, &data, &tc, rhs.as_deref())?;

    let tag = tc.loss.as_str();
    let ckpt = format!("checkpoint_{tag}.fsta");
    let loss_csv = format!("loss_{tag}.csv");
    let timing_csv = format!("timing_{tag}.csv");
    let loss_svg = format!("loss_{tag}.svg");
    let info = CheckpointInfo {
        pde: cfg.pde_kind(),
        grid: &cfg.pde.grid,
        t_norm: cfg.split.t_norm,
        loss: tag,
        config_hash: &cfg.hash(),
        trajectory_hash: &header.config_hash,
    };
    write_checkpoint(&dir.join(&ckpt), &model, &outcome.params, &info)?;
    write_loss_csv(&dir.join(&loss_csv), &outcome.history)?;
    write_timing_csv(&dir.join(&timing_csv), &outcome.history)?;
    LinePlot {
        title: format!("training loss ({tag})"),
        x_label: "optimizer step".into(),
        y_label: "batch loss".into(),
        log_y: true,
        series: vec![Series::new(
            tag,
            outcome.history.iter().map(|r| (r.step as f64, r.loss)).collect(),
        )],
        markers: vec![],
    }
    .write(&dir.join(&loss_svg))?;

    let mut manifest = Manifest::new("train", cfg).tagged(tag);
    manifest.input("trajectory", &traj_path)?;
    for f in [&ckpt, &loss_csv, &timing_csv, &loss_svg] {
        manifest.output(f.as_str());
    }
    manifest.summary("windows", data.len() as f64);
    manifest.summary("initial_mse", outcome.initial_mse);
    manifest.summary("final_mse", outcome.final_mse);
    manifest.summary("final_loss", outcome.history.last().map_or(f64::NAN, |r| r.loss));
    manifest.write(&dir)?;
    println!(
        "trained {} steps ({tag} loss) on {} windows: dataset MSE {:.3e} -> {:.3e}",
        tc.steps,
        data.len(),
        outcome.initial_mse,
        outcome.final_mse
    );
    Ok(())
}

pub fn predict(
    cfg: &ExperimentConfig,
    checkpoint: Option<PathBuf>,
    trajectory: Option<PathBuf>,
) -> Result<(), CliError> {
    let dir = out_dir(cfg);
    let ckpt_path = checkpoint.unwrap_or_else(|| dir.join(format!("checkpoint_{}.fsta", cfg.training.loss)));
    let traj_path = trajectory.unwrap_or_else(|| dir.join(TRAJECTORY_FILE));
    let (ck, params) = read_checkpoint(&ckpt_path)?;
    let (th, reference) = read_trajectory(&traj_path)?;
    if ck.pde != th.pde || ck.grid != th.grid {
        return Err(CliError::Mismatch(format!(
            "checkpoint trained for {} {:?}, trajectory is {} {:?}",
            ck.pde, ck.grid, th.pde, th.grid
        )));
    }
    let tag = ck.loss.clone();
    let model = TransformerModel {
        config: ck.model_config(),
        params,
        t_norm: ck.t_norm,
        project: cfg.forecast.project,
    };
    let s = model.seq_len();
    let train_end = cfg.split.train_end;
    let n_train = reference.indices_in(0.0, train_end).end;
    if n_train < s {
        return Err(CliError::Config(format!(
            "split.train_end: only {n_train} training samples, the model needs {s}"
        )));
    }
    let available = reference.len() - n_train;
    let horizon = if cfg.forecast.horizon == 0 {
        available
    } else {
        cfg.forecast.horizon
    };
    if horizon == 0 || horizon > available {
        return Err(CliError::Config(format!(
            "forecast.horizon: {horizon} requested, {available} reference samples follow the training interval"
        )));
    }
    let mode = match cfg.forecast.mode.as_str() {
        "teacher_forced" => RolloutMode::TeacherForced,
        _ => RolloutMode::ClosedLoop,
    };
    let result = rollout(&model, &reference, n_train - s, horizon, mode, train_end)?;
    // One-step predictions across the training interval, for context.
    let in_sample = if n_train > s {
        rollout(&model, &reference, 0, n_train - s, RolloutMode::TeacherForced, train_end)?.mse
    } else {
        Vec::new()
    };

    let mut manifest = Manifest::new("predict", cfg).tagged(&tag);
    manifest.input("checkpoint", &ckpt_path)?;
    manifest.input("trajectory", &traj_path)?;

    if !result.predicted.states.is_empty() {
        let name = format!("prediction_{tag}.fsta");
        write_trajectory(&dir.join(&name), &result.predicted, &cfg.hash())?;
        manifest.output(name);
    }
    let mse_name = format!("mse_curve_{tag}.csv");
    let rows: Vec<(f64, f64, &str)> = in_sample
        .iter()
        .chain(&result.mse)
        .map(|&(t, m)| (t, m, interval_label(t, train_end)))
        .collect();
    write_mse_csv(&dir.join(&mse_name), &rows)?;
    manifest.output(mse_name);

    let svg_name = format!("mse_curve_{tag}.svg");
    let mut series = Vec::new();
    if !in_sample.is_empty() {
        series.push(Series::new("one-step (training interval)", in_sample.clone()));
    }
    let rollout_label = match mode {
        RolloutMode::ClosedLoop => "closed-loop forecast",
        RolloutMode::TeacherForced => "teacher-forced forecast",
    };
    series.push(Series::new(rollout_label, result.mse.clone()));
    LinePlot {
        title: format!("MSE(t), {} ({tag} loss)", reference.meta.pde),
        x_label: "t".into(),
        y_label: "MSE".into(),
        log_y: true,
        series,
        markers: vec![Marker {
            x: train_end,
            label: SPLIT_LABEL.into(),
        }],
    }
    .write(&dir.join(&svg_name))?;
    manifest.output(svg_name);

    let figures = match reference.meta.pde {
        PdeKind::Burgers1d => burgers_slices(cfg, &dir, &tag, &model, &reference, &result.predicted)?,
        PdeKind::Ns2d => ns_panels(cfg, &dir, &tag, &reference, &result.predicted)?,
    };
    for f in figures {
        manifest.output(f);
    }

    // MSE(t) relative to the reference energy Σ|û|².
    let mut worst = 0.0f64;
    let mut worst_rel = 0.0f64;
    for &(t, m) in &result.mse {
        let i = find_index(&reference, t).expect("rollout stamps come from the reference");
        let energy = reference.states[i].energy();
        worst = worst.max(m);
        worst_rel = worst_rel.max(m / energy.max(f64::MIN_POSITIVE));
    }
    manifest.summary("horizon", horizon as f64);
    manifest.summary("predicted", result.predicted.len() as f64);
    manifest.summary("max_test_mse", worst);
    manifest.summary("max_test_mse_over_energy", worst_rel);
    manifest.write(&dir)?;

    if let Some(reason) = result.aborted {
        return Err(CliError::Blowup(format!(
            "numerical blowup: rollout stopped after {} of {horizon} steps: {reason}",
            result.predicted.len()
        )));
    }
    println!(
        "forecast {horizon} steps from t = {}: max MSE {worst:.3e} (MSE/energy {worst_rel:.3e})",
        reference.times[n_train - 1]
    );
    Ok(())
}

/// Physical slices `u(x)` at the configured times: the forecast where one
/// exists, otherwise a one-step prediction from the preceding reference window.
fn burgers_slices(
    cfg: &ExperimentConfig,
    dir: &Path,
    tag: &str,
    model: &TransformerModel,
    reference: &Trajectory,
    predicted: &Trajectory,
) -> Result<Vec<String>, CliError> {
    let s = model.seq_len();
    let x = reference.states[0].grid().coordinates(0);
    let mut written = Vec::new();
    for &t in &cfg.forecast.slice_times {
        let Some(i) = find_index(reference, t) else {
            continue;
        };
        let (pred, kind) = if let Some(j) = find_index(predicted, t) {
            (Some(predicted.states[j].clone()), "forecast")
        } else if i >= s {
            let p = model.predict_next(&reference.states[i - s..i], &reference.times[i - s..i], t)?;
            (Some(p), "one-step prediction")
        } else {
            (None, "")
        };
        let u_ref = inverse_transform(&reference.states[i])?.remove(0);
        let mut series = vec![Series::new("reference", x.iter().copied().zip(u_ref).collect())];
        if let Some(p) = pred {
            let u = inverse_transform(&p)?.remove(0);
            series.push(Series::new(kind, x.iter().copied().zip(u).collect()).dashed());
        }
        let name = format!("slice_{tag}_t{}.svg", time_tag(t));
        LinePlot {
            title: format!("u(x, t = {}) [{}]", time_tag(t), interval_label(t, cfg.split.train_end)),
            x_label: "x".into(),
            y_label: "u".into(),
            log_y: false,
            series,
            markers: vec![],
        }
        .write(&dir.join(&name))?;
        written.push(name);
    }
    Ok(written)
}

/// Heatmaps of predicted, reference and absolute-error fields, plus the same
/// arrays in a container file.
fn ns_panels(
    cfg: &ExperimentConfig,
    dir: &Path,
    tag: &str,
    reference: &Trajectory,
    predicted: &Trajectory,
) -> Result<Vec<String>, CliError> {
    if predicted.is_empty() {
        return Ok(Vec::new());
    }
    let mut picks: Vec<usize> = cfg
        .forecast
        .slice_times
        .iter()
        .filter_map(|&t| find_index(predicted, t))
        .collect();
    if picks.is_empty() {
        let n = predicted.len();
        picks = vec![0, n / 2, n - 1];
        picks.dedup();
    }
    let grid: &ModeGrid = reference.states[0].grid();
    let (nx, ny) = (grid.dims()[0], grid.dims()[1]);
    let mut written = Vec::new();
    let mut records = Vec::new();
    for j in picks {
        let t = predicted.times[j];
        let i = find_index(reference, t).expect("forecast stamps come from the reference");
        let cmp = reconstruct_and_compare(&predicted.states[j], &reference.states[i])?;
        let mut images = Vec::new();
        for (c, name) in ["u", "v"].iter().enumerate() {
            for (kind, data) in [
                ("predicted", &cmp.predicted[c]),
                ("reference", &cmp.reference[c]),
                ("abs error", &cmp.abs_error[c]),
            ] {
                images.push((format!("{name} {kind}"), to_image(data, nx, ny)));
                records.push(Record::f64(
                    format!("t{}/{name}/{}", time_tag(t), kind.replace(' ', "_")),
                    vec![nx, ny],
                    data.clone(),
                ));
            }
        }
        let panels: Vec<Panel<'_>> = images
            .iter()
            .map(|(title, data)| Panel {
                title: title.clone(),
                data,
            })
            .collect();
        let name = format!("fields_{tag}_t{}.svg", time_tag(t));
        write_heatmap_panels(
            &dir.join(&name),
            &format!(
                "t = {} [{}]: u rel. L2 {:.2e}, v rel. L2 {:.2e}",
                time_tag(t),
                interval_label(t, cfg.split.train_end),
                cmp.metrics[0].relative_l2,
                cmp.metrics[1].relative_l2
            ),
            &panels,
            nx,
            ny,
        )?;
        written.push(name);
    }
    let name = format!("fields_{tag}.fsta");
    write_container(&dir.join(&name), &records)?;
    written.push(name);
    Ok(written)
}

pub fn evaluate(cfg: &ExperimentConfig, preds: Vec<PathBuf>, reference: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out_dir(cfg);
    let ref_path = reference.unwrap_or_else(|| dir.join(TRAJECTORY_FILE));
    let (_, reference) = read_trajectory(&ref_path)?;
    let preds = if preds.is_empty() {
        let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| CliError::Io(format!("i/o error on {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let n = file_name(p);
                n.starts_with("prediction_") && n.ends_with(".fsta")
            })
            .collect();
        found.sort();
        found
    } else {
        preds
    };
    if preds.is_empty() {
        return Err(CliError::Config("no prediction files to evaluate".into()));
    }

    let pde = reference.meta.pde;
    let fields = field_names(pde);
    let mut header = vec!["label".to_string(), "t".into(), "interval".into(), "mse".into()];
    for f in fields {
        header.push(format!("{f}_relative_l2"));
        header.push(format!("{f}_max_abs"));
    }
    let mut manifest = Manifest::new("evaluate", cfg);
    manifest.input("reference", &ref_path)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for path in &preds {
        let (_, pred) = read_trajectory(path)?;
        if pred.meta.pde != pde || pred.states.first().map(|s| s.grid()) != Some(reference.states[0].grid()) {
            return Err(CliError::Mismatch(format!(
                "{} does not share the reference PDE and grid",
                path.display()
            )));
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let label = stem.strip_prefix("prediction_").unwrap_or(&stem).to_string();
        manifest.input(&format!("prediction.{label}"), path)?;
        let curve = mse_curve(&pred, &reference)?;
        let mut worst = 0.0f64;
        for (&(t, mse), state) in curve.iter().zip(&pred.states) {
            let i = find_index(&reference, t).expect("mse_curve checked alignment");
            let cmp = reconstruct_and_compare(state, &reference.states[i])?;
            let mut row = vec![
                label.clone(),
                t.to_string(),
                interval_label(t, cfg.split.train_end).to_string(),
                mse.to_string(),
            ];
            for m in &cmp.metrics {
                row.push(m.relative_l2.to_string());
                row.push(m.max_abs.to_string());
            }
            rows.push(row);
            worst = worst.max(mse);
        }
        manifest.summary(&format!("max_mse.{label}"), worst);
        series.push(Series::new(label, curve));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&dir.join("metrics.csv"), &header_refs, &rows)?;
    LinePlot {
        title: format!("MSE(t) comparison, {pde}"),
        x_label: "t".into(),
        y_label: "MSE".into(),
        log_y: true,
        series,
        markers: vec![Marker {
            x: cfg.split.train_end,
            label: SPLIT_LABEL.into(),
        }],
    }
    .write(&dir.join("mse_comparison.svg"))?;
    manifest.output("metrics.csv");
    manifest.output("mse_comparison.svg");
    manifest.write(&dir)?;
    println!("evaluated {} prediction file(s) -> {}", preds.len(), dir.join("metrics.csv").display());
    Ok(())
}

/// Runs the NS solver from the Taylor–Green initial state and tabulates the
/// error of `u`, `v` and the recovered pressure against the analytic solution.
pub fn evaluate_taylor_green(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.pde_kind() != PdeKind::Ns2d {
        return Err(CliError::Config("pde.kind: --taylor-green needs ns2d".into()));
    }
    let dir = out_dir(cfg);
    let p = &cfg.pde;
    let grid = cfg.grid();
    let ns = Ns2d::new(&grid, p.nu)?;
    let traj = ns.simulate(&taylor_green_state(0.0, &grid, p.nu)?, p.dt, p.n_steps, p.sample_every)?;
    let mut rows = Vec::new();
    let mut curves: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 6];
    let mut worst = [0.0f64; 6];
    for (&t, state) in traj.times.iter().zip(&traj.states) {
        let (u, v, pr) = taylor_green(t, &grid, p.nu);
        let phys = inverse_transform(state)?;
        let pc = ns.recover_pressure(state)?;
        let errs = [
            field_errors(&phys[0], &u)?,
            field_errors(&phys[1], &v)?,
            field_errors(&pc, &pr)?,
        ];
        let vals = [
            errs[0].relative_l2,
            errs[0].max_abs,
            errs[1].relative_l2,
            errs[1].max_abs,
            errs[2].relative_l2,
            errs[2].max_abs,
        ];
        let mut row = vec![t.to_string()];
        for (k, v) in vals.iter().enumerate() {
            row.push(v.to_string());
            curves[k].push((t, *v));
            worst[k] = worst[k].max(*v);
        }
        row.push(max_divergence(state)?.to_string());
        rows.push(row);
    }
    let header = [
        "t",
        "u_relative_l2",
        "u_max_abs",
        "v_relative_l2",
        "v_max_abs",
        "p_relative_l2",
        "p_max_abs",
        "max_divergence",
    ];
    write_csv(&dir.join("taylor_green.csv"), &header, &rows)?;
    let series = header[1..7]
        .iter()
        .zip(curves)
        .enumerate()
        .map(|(k, (name, pts))| {
            let s = Series::new(*name, pts);
            if k % 2 == 1 {
                s.dashed()
            } else {
                s
            }
        })
        .collect();
    LinePlot {
        title: format!("solver vs Taylor–Green, N = {:?}, dt = {}, nu = {}", p.grid, p.dt, p.nu),
        x_label: "t".into(),
        y_label: "error".into(),
        log_y: true,
        series,
        markers: vec![],
    }
    .write(&dir.join("taylor_green.svg"))?;

    let mut manifest = Manifest::new("evaluate", cfg);
    manifest.output("taylor_green.csv");
    manifest.output("taylor_green.svg");
    for (name, w) in header[1..7].iter().zip(worst) {
        manifest.summary(&format!("max_{name}"), w);
    }
    manifest.write(&dir)?;
    println!(
        "Taylor–Green over t in [0, {}]: max relative L2 u {:.2e}, v {:.2e}, p {:.2e}",
        traj.times.last().unwrap_or(&0.0),
        worst[0],
        worst[2],
        worst[4]
    );
    Ok(())
}

pub fn export(cfg: &ExperimentConfig, input: &Path, times: &[f64]) -> Result<(), CliError> {
    let dir = out_dir(cfg);
    let (_, traj) = read_trajectory(input)?;
    if traj.is_empty() {
        return Err(CliError::Mismatch(format!("{} holds no states", input.display())));
    }
    let picks = if times.is_empty() {
        vec![traj.len() - 1]
    } else {
        times
            .iter()
            .map(|&t| {
                find_index(&traj, t)
                    .ok_or_else(|| CliError::Mismatch(format!("no sample at t = {t} in {}", input.display())))
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let grid = traj.states[0].grid().clone();
    let fields = field_names(traj.meta.pde);
    let mut manifest = Manifest::new("export", cfg);
    manifest.input("source", input)?;
    for i in picks {
        let phys = inverse_transform(&traj.states[i])?;
        let (header, rows): (Vec<&str>, Vec<Vec<String>>) = match grid.ndim() {
            1 => {
                let x = grid.coordinates(0);
                let rows = x
                    .iter()
                    .enumerate()
                    .map(|(j, x)| vec![x.to_string(), phys[0][j].to_string()])
                    .collect();
                (vec!["x", fields[0]], rows)
            }
            _ => {
                let (xs, ys) = (grid.coordinates(0), grid.coordinates(1));
                let mut rows = Vec::with_capacity(grid.len());
                for (ix, x) in xs.iter().enumerate() {
                    for (iy, y) in ys.iter().enumerate() {
                        let k = ix * ys.len() + iy;
                        let mut row = vec![x.to_string(), y.to_string()];
                        row.extend(phys.iter().map(|f| f[k].to_string()));
                        rows.push(row);
                    }
                }
                let mut header = vec!["x", "y"];
                header.extend_from_slice(fields);
                (header, rows)
            }
        };
        let name = format!("{stem}_t{}.csv", time_tag(traj.times[i]));
        write_csv(&dir.join(&name), &header, &rows)?;
        manifest.output(name);
    }
    manifest.write(&dir)?;
    println!("exported {} snapshot(s) to {}", manifest.outputs.len(), dir.display());
    Ok(())
}
