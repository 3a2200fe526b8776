//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The long pipelines (default-size Burgers and NS training) run once
//! through the `fst` binary; the numerical criteria then inspect their
//! artifacts with the library.

use fst_core::burgers1d::{negative_sine_state, simulate_burgers, BurgersTapeRhs, BENCHMARK_NU};
use fst_core::config::ExperimentConfig;
use fst_core::container::{decode, encode, ArrayData, ContainerError, Record};
use fst_core::forecast::{rollout, spectral_mse, OracleModel, RolloutMode, TransformerModel};
use fst_core::ns2d::{
    field_errors, max_divergence, taylor_green, taylor_green_state, Ns2d, NsState, NsTapeRhs,
};
use fst_core::persist::{read_checkpoint, read_trajectory, PersistError};
use fst_core::spectral::{forward_transform_fields, inverse_transform, ModeGrid};
use fst_core::trajectory::{PdeKind, Trajectory};
use fst_core::training::{
    build_windows, check_batch_gradients, dataset_mse, single_step_mse, train, LossMode, TrainConfig,
    WindowedDataset,
};
use fst_core::transformer::{forward_traced, init_params, predict, ModelConfig, ModelParams, ParamVars};
use fst_tensor::{grad_check, Tape, Tensor, TensorError, Var};
use proptest::strategy::Strategy;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

type Check = Result<String, String>;

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

// ---------------------------------------------------------------- helpers

fn fst(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fst"))
        .args(args)
        .output()
        .map_err(|e| format!("cannot launch fst: {e}"))?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`fst {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn exit_code(args: &[&str]) -> Option<i32> {
    Command::new(env!("CARGO_BIN_EXE_fst")).args(args).output().ok()?.status.code()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn load_traj(path: &Path) -> Result<Trajectory, String> {
    read_trajectory(path)
        .map(|(_, t)| t)
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let r: f64 = b.iter().map(|y| y * y).sum();
    (d / r).sqrt()
}

// -------------------------------------------------------------- pipelines

struct Pipelines {
    burgers: Result<PathBuf, String>,
    ns: Result<PathBuf, String>,
    burgers_train_time: Vec<(String, Duration)>,
    ns_train_time: Option<Duration>,
}

fn run_burgers(root: &Path, times: &mut Vec<(String, Duration)>) -> Result<PathBuf, String> {
    let dir = root.join("burgers");
    let cfg = root.join("burgers.toml");
    std::fs::write(&cfg, "[pde]\nkind = \"burgers1d\"\n").map_err(|e| e.to_string())?;
    let common = ["--config", s(&cfg), "--out", s(&dir)];
    let with = |cmd: &str, extra: &[&str]| {
        let mut v = vec![cmd];
        v.extend_from_slice(&common);
        v.extend_from_slice(extra);
        fst(&v)
    };
    with("generate", &[])?;
    for loss in ["mse", "physics"] {
        let t0 = Instant::now();
        let out = with("train", &["--loss", loss])?;
        times.push((loss.to_string(), t0.elapsed()));
        eprint!("  burgers {loss}: {out}");
        with("predict", &["--loss", loss])?;
    }
    with("evaluate", &[])?;
    Ok(dir)
}

fn run_ns(root: &Path, time: &mut Option<Duration>) -> Result<PathBuf, String> {
    let dir = root.join("ns");
    let cfg = root.join("ns.toml");
    std::fs::write(&cfg, "[pde]\nkind = \"ns2d\"\n").map_err(|e| e.to_string())?;
    let common = ["--config", s(&cfg), "--out", s(&dir)];
    let with = |cmd: &str| {
        let mut v = vec![cmd];
        v.extend_from_slice(&common);
        fst(&v)
    };
    with("generate")?;
    let t0 = Instant::now();
    let out = with("train")?;
    *time = Some(t0.elapsed());
    eprint!("  ns mse: {out}");
    with("predict")?;
    with("evaluate")?;
    Ok(dir)
}

// ------------------------------------------------------------ criterion 1

fn taylor_green_run() -> Trajectory {
    let grid = ModeGrid::periodic(&[32, 32]).unwrap();
    let nu = 1e-3;
    let init = taylor_green_state(0.0, &grid, nu).unwrap();
    Ns2d::new(&grid, nu).unwrap().simulate(&init, 0.1, 2000, 1).unwrap()
}

fn criterion_1(traj: &Trajectory) -> Check {
    let grid = traj.states[0].grid().clone();
    let nu = traj.meta.nu;
    let ns = Ns2d::new(&grid, nu).map_err(|e| e.to_string())?;
    let mut worst = [0.0f64; 6];
    for (&t, st) in traj.times.iter().zip(&traj.states) {
        let (u, v, p) = taylor_green(t, &grid, nu);
        let phys = inverse_transform(st).map_err(|e| e.to_string())?;
        let pc = ns.recover_pressure(st).map_err(|e| e.to_string())?;
        for (k, (c, r)) in [(&phys[0], &u), (&phys[1], &v), (&pc, &p)].into_iter().enumerate() {
            let e = field_errors(c, r).map_err(|e| e.to_string())?;
            worst[2 * k] = worst[2 * k].max(e.relative_l2);
            worst[2 * k + 1] = worst[2 * k + 1].max(e.max_abs);
        }
    }
    let detail = format!(
        "t in [0, {}]: rel L2 u {:.2e} v {:.2e} p {:.2e}; max abs u {:.2e} v {:.2e} p {:.2e} (limit 1e-4)",
        traj.times.last().unwrap(),
        worst[0],
        worst[2],
        worst[4],
        worst[1],
        worst[3],
        worst[5]
    );
    ensure(worst.iter().all(|&w| w <= 1e-4), || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ criterion 2

/// RK4 error is invisible at the benchmark viscosity (it sits below the
/// round-off floor), so the order study uses ν = 1 where the decay rate
/// 2ν makes the truncation error dominate. Diffusion is explicit, so the
/// step must satisfy 2ν(N/2)²·dt < 2.78; N = 16 with dt ≤ 1/64 does.
fn criterion_2() -> Check {
    let grid = ModeGrid::periodic(&[16, 16]).unwrap();
    let nu = 1.0;
    let ns = Ns2d::new(&grid, nu).map_err(|e| e.to_string())?;
    let init = taylor_green_state(0.0, &grid, nu).map_err(|e| e.to_string())?;
    let (u, v, _) = taylor_green(1.0, &grid, nu);
    let exact: Vec<f64> = u.iter().chain(&v).copied().collect();
    let mut errors = Vec::new();
    for n in [64usize, 128, 256, 512] {
        let dt = 1.0 / n as f64;
        let traj = ns.simulate(&init, dt, n, n).map_err(|e| e.to_string())?;
        let phys = inverse_transform(traj.states.last().unwrap()).map_err(|e| e.to_string())?;
        let got: Vec<f64> = phys[0].iter().chain(&phys[1]).copied().collect();
        errors.push(relative_l2(&got, &exact));
    }
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let detail = format!(
        "N = 16, nu = 1, dt = 1/64..1/512: errors {:.3e} {:.3e} {:.3e} {:.3e}; ratios {:.2} {:.2} {:.2} (band [12, 20])",
        errors[0], errors[1], errors[2], errors[3], ratios[0], ratios[1], ratios[2]
    );
    ensure(ratios.iter().all(|r| (12.0..=20.0).contains(r)), || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ criterion 3

fn criterion_3(tg: &Trajectory, ns_dir: &Result<PathBuf, String>) -> Check {
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut sources = vec![("Taylor–Green run", tg.clone())];
    let dir = ns_dir.as_ref().map_err(|e| format!("NS pipeline failed: {e}"))?;
    sources.push(("generated trajectory", load_traj(&dir.join("trajectory.fsta"))?));
    sources.push(("projected forecast", load_traj(&dir.join("prediction_mse.fsta"))?));
    let mut parts = Vec::new();
    for (name, traj) in &sources {
        let mut w = 0.0f64;
        for st in &traj.states {
            w = w.max(max_divergence(st).map_err(|e| e.to_string())?);
        }
        parts.push(format!("{name} {w:.1e}"));
        worst = worst.max(w);
        count += traj.len();
    }
    let detail = format!("{count} NS states, max |k·û| : {} (limit 1e-12)", parts.join(", "));
    ensure(worst <= 1e-12, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ criterion 4

fn criterion_4() -> Check {
    let coarse = simulate_burgers(&negative_sine_state(256, BENCHMARK_NU).unwrap(), 1e-3, 500, 500)
        .map_err(|e| e.to_string())?;
    let fine = simulate_burgers(&negative_sine_state(512, BENCHMARK_NU).unwrap(), 1e-4, 5000, 5000)
        .map_err(|e| e.to_string())?;
    ensure(coarse.times.last() == Some(&0.5) && fine.times.last() == Some(&0.5), || {
        "runs did not end at t = 0.5".into()
    })?;
    let uc = inverse_transform(coarse.states.last().unwrap()).map_err(|e| e.to_string())?.remove(0);
    let uf = inverse_transform(fine.states.last().unwrap()).map_err(|e| e.to_string())?.remove(0);
    // x_j = jL/N: the fine grid's even points are the coarse grid.
    let uf_on_coarse: Vec<f64> = uf.iter().step_by(2).copied().collect();
    let rel = relative_l2(&uc, &uf_on_coarse);

    let long = simulate_burgers(&negative_sine_state(256, BENCHMARK_NU).unwrap(), 1e-3, 5500, 10)
        .map_err(|e| e.to_string())?;
    let m0 = long.states[0].coeffs()[0];
    let drift = long
        .states
        .iter()
        .map(|s| (s.coeffs()[0] - m0).norm())
        .fold(0.0f64, f64::max);
    let detail = format!(
        "rel L2 (256, 1e-3) vs (512, 1e-4) at t = 0.5: {rel:.2e} (limit 1e-6); mean drift over [0, {}]: {drift:.1e} (limit 1e-12)",
        long.times.last().unwrap()
    );
    ensure(rel <= 1e-6 && drift <= 1e-12, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ criterion 5

fn project_out(t: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
    let w = random_tensor(t.shape(out), &mut rng);
    let w = t.constant(w);
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

/// Every primitive at random toy shapes, contracted to a scalar with random weights.
fn primitive_trial(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank = rng.gen_range(1..4);
    let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
    let axis = rng.gen_range(0..rank);
    let x = random_tensor(&shape, &mut rng);
    let other = random_tensor(&shape, &mut rng);
    let mut failures = Vec::new();
    let mut check = |name: &str, x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var, TensorError>| {
        match grad_check(|t, v| { let o = f(t, v)?; project_out(t, o, seed) }, x, FD_STEP, FD_TOL) {
            Ok(r) if r.passed => {}
            Ok(r) => failures.push(format!("{name} ({:.2e})", r.max_rel_error)),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    };
    check("add", &x, &|t, v| {
        let c = t.constant(other.clone());
        t.add(v, c)
    });
    check("sub", &x, &|t, v| {
        let c = t.constant(other.clone());
        t.sub(c, v)
    });
    check("mul", &x, &|t, v| t.mul(v, v));
    check("scale", &x, &|t, v| Ok(t.scale(v, -0.7)));
    check("exp", &x, &|t, v| Ok(t.exp(v)));
    check("softmax", &x, &|t, v| t.softmax(v, axis));
    let mut ln_shape = shape.clone();
    ln_shape[axis] = ln_shape[axis].max(3);
    let xl = random_tensor(&ln_shape, &mut rng);
    check("layer_norm", &xl, &|t, v| t.layer_norm(v, axis, 1e-5));
    check("sum", &x, &|t, v| Ok(t.sum(v)));
    check("mean", &x, &|t, v| t.mean(v));
    check("sum_axis", &x, &|t, v| t.sum_axis(v, axis));
    check("mean_axis", &x, &|t, v| t.mean_axis(v, axis));
    check("reshape", &x, &|t, v| {
        let n = t.value(v).len();
        t.reshape(v, &[n])
    });
    let n = shape[axis];
    let start = rng.gen_range(0..n);
    let end = rng.gen_range(start + 1..=n);
    check("slice", &x, &|t, v| t.slice(v, axis, start, end));
    check("concat", &x, &|t, v| {
        let c = t.constant(other.clone());
        t.concat(&[c, v], axis)
    });

    let (b, m, k, nn) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let a = random_tensor(&[b, m, k], &mut rng);
    let w = random_tensor(&[k, nn], &mut rng);
    let c = random_tensor(&[b, k, nn], &mut rng);
    check("matmul", &a, &|t, v| {
        let wc = t.constant(w.clone());
        t.matmul(v, wc)
    });
    check("matmul.weight", &w, &|t, v| {
        let ac = t.constant(a.clone());
        t.matmul(ac, v)
    });
    check("bmm", &c, &|t, v| {
        let ac = t.constant(a.clone());
        t.bmm(ac, v)
    });
    check("transpose", &a, &|t, v| t.transpose(v));
    let bias = random_tensor(&[m, k], &mut rng);
    check("add_broadcast", &bias, &|t, v| {
        let ac = t.constant(a.clone());
        t.add_broadcast(ac, v)
    });
    let gain = random_tensor(&[k], &mut rng);
    check("mul_broadcast", &gain, &|t, v| {
        let ac = t.constant(a.clone());
        t.mul_broadcast(ac, v)
    });

    let nd = rng.gen_range(1..3);
    let dims: Vec<usize> = (0..nd).map(|_| rng.gen_range(2..6)).collect();
    let mut rshape = vec![rng.gen_range(1..3)];
    rshape.extend(&dims);
    let r = random_tensor(&rshape, &mut rng);
    check("fft", &r, &|t, v| t.fft(v, nd));
    let mut cshape = rshape.clone();
    cshape.push(2);
    let z = random_tensor(&cshape, &mut rng);
    check("ifft_real", &z, &|t, v| t.ifft_real(v, nd));
    let mut fshape = dims.clone();
    fshape.push(2);
    let factor = random_tensor(&fshape, &mut rng);
    check("spectral_scale", &z, &|t, v| t.spectral_scale(v, &factor));

    if failures.is_empty() {
        Ok(())
    } else {
        Err(format!("seed {seed}: {}", failures.join(", ")))
    }
}

fn toy(mode_dims: Vec<usize>, n_fields: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_head: 2,
        n_layers: 2,
        seq_len: 3,
        ..ModelConfig::new(mode_dims, n_fields)
    }
}

fn toy_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for layer in 0..cfg.n_layers {
        for role in ["gamma", "beta"] {
            for x in p.get_mut(&format!("layers.{layer}.norm.{role}")).unwrap().data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
    p
}

fn toy_burgers(cfg: &ModelConfig) -> WindowedDataset {
    let traj = simulate_burgers(&negative_sine_state(8, BENCHMARK_NU).unwrap(), 1e-3, 100, 10).unwrap();
    build_windows(Arc::new(traj), cfg, (0.0, 0.1), 0.1).unwrap()
}

fn toy_ns(cfg: &ModelConfig) -> WindowedDataset {
    let grid = ModeGrid::periodic(&[4, 4]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let u: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let state = NsState {
        velocity: forward_transform_fields(&[&u, &v], &grid).unwrap(),
        time: 0.0,
        nu: 0.05,
    };
    let traj = Ns2d::new(&grid, 0.05).unwrap().simulate(&state, 0.01, 10, 1).unwrap();
    build_windows(Arc::new(traj), cfg, (0.0, 0.1), 0.1).unwrap()
}

fn criterion_5() -> Check {
    let mut runner = TestRunner::new_with_rng(
        PropConfig {
            cases: 100,
            failure_persistence: None,
            ..PropConfig::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let trials = std::cell::Cell::new(0);
    let outcome = runner.run(&(0u64..u64::MAX).prop_map(|s| s), |seed| {
        trials.set(trials.get() + 1);
        primitive_trial(seed).map_err(proptest::test_runner::TestCaseError::fail)
    });
    outcome.map_err(|e| format!("property suite: {e}"))?;

    let mse = TrainConfig::default();
    let phys = TrainConfig {
        loss: LossMode::Physics,
        ..TrainConfig::default()
    };
    let mut worst = Vec::new();
    let cfg_b = toy(vec![8], 1);
    let data_b = toy_burgers(&cfg_b);
    let rhs_b = BurgersTapeRhs::new(data_b.grid(), BENCHMARK_NU).map_err(|e| e.to_string())?;
    let cfg_n = toy(vec![2, 2], 2);
    let data_n = toy_ns(&cfg_n);
    let cfg_np = toy(vec![4, 4], 2);
    let data_np = toy_ns(&cfg_np);
    let rhs_n = NsTapeRhs::new(data_np.grid(), 0.05).map_err(|e| e.to_string())?;
    let cases: [(&str, &ModelConfig, &WindowedDataset, &TrainConfig, Option<&dyn fst_core::training::SpectralRhs>); 4] = [
        ("burgers mse (8 modes)", &cfg_b, &data_b, &mse, None),
        ("burgers physics (8 modes)", &cfg_b, &data_b, &phys, Some(&rhs_b)),
        ("ns mse (4 modes)", &cfg_n, &data_n, &mse, None),
        ("ns physics (16 modes)", &cfg_np, &data_np, &phys, Some(&rhs_n)),
    ];
    for (i, (name, cfg, data, tc, rhs)) in cases.into_iter().enumerate() {
        let params = toy_params(cfg, 30 + i as u64);
        let r = check_batch_gradients(&params, data, &[0, 3], tc, rhs, FD_STEP, FD_TOL).map_err(|e| e.to_string())?;
        ensure(r.passed, || format!("{name}: max rel error {:.2e}", r.max_rel_error))?;
        worst.push(format!("{name} {:.1e}", r.max_rel_error));
    }
    Ok(format!(
        "{trials} primitive trials green; Transformer+loss composites (S = 3): {}",
        worst.join(", "),
        trials = trials.get()
    ))
}

// ------------------------------------------------------------ criterion 6

fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    (0..n_out)
        .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>())
        .collect()
}

fn criterion_6() -> Check {
    // Attention rows at the default Burgers size.
    let cfg = ModelConfig::new(vec![256], 1);
    let params = init_params(&cfg, 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&[2, cfg.seq_len, cfg.step_features()], &mut rng);
    let mut tape = Tape::new();
    let p = ParamVars::attach(&mut tape, &params, false);
    let xv = tape.constant(x.clone());
    let trace = forward_traced(&cfg, &mut tape, &p, xv).map_err(|e| e.to_string())?;
    let mut row_err = 0.0f64;
    for layer in &trace.attention {
        for &a in layer {
            for row in tape.value(a).data().chunks_exact(cfg.seq_len) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(row_err <= 1e-12, || format!("attention row sum error {row_err:.2e}"))?;

    // One token: every softmax is 1.
    let cfg1 = ModelConfig {
        seq_len: 1,
        ..toy(vec![4], 1)
    };
    let p1 = toy_params(&cfg1, 7);
    let x1 = random_tensor(&[1, 1, cfg1.step_features()], &mut rng);
    let got = predict(&cfg1, &p1, x1.clone()).map_err(|e| e.to_string())?;
    let g = |n: &str| p1.get(n).unwrap();
    let mut h = dense(x1.data(), g("embedding.weight"), g("embedding.bias"));
    for l in 0..cfg1.n_layers {
        let w = |r: &str, k: &str| g(&format!("layers.{l}.attention.{r}.{k}"));
        let v = dense(&h, w("value", "weight"), w("value", "bias"));
        let a = dense(&v, w("output", "weight"), w("output", "bias"));
        let z: Vec<f64> = h.iter().zip(&a).map(|(p, q)| p + q).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        let r = 1.0 / (var + cfg1.layer_norm_eps).sqrt();
        let gamma = g(&format!("layers.{l}.norm.gamma")).data();
        let beta = g(&format!("layers.{l}.norm.beta")).data();
        h = z.iter().enumerate().map(|(j, v)| (v - mean) * r * gamma[j] + beta[j]).collect();
    }
    let want = dense(&h, g("decoder.weight"), g("decoder.bias"));
    let s1_err = got
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    ensure(s1_err <= 1e-12, || format!("S = 1 path differs from hand computation by {s1_err:.2e}"))?;

    // Zero decoder.
    let mut pz = params.clone();
    for name in ["decoder.weight", "decoder.bias"] {
        pz.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let out = predict(&cfg, &pz, x.clone()).map_err(|e| e.to_string())?;
    ensure(out.data().iter().all(|&v| v == 0.0), || "zero decoder produced non-zero output".into())?;

    // Determinism: initialization, inference and a short training run.
    let a = init_params(&cfg, 5).map_err(|e| e.to_string())?;
    ensure(bits(&a.to_flat()) == bits(&params.to_flat()), || "init not bit-exact".into())?;
    let y1 = predict(&cfg, &params, x.clone()).map_err(|e| e.to_string())?;
    let y2 = predict(&cfg, &a, x).map_err(|e| e.to_string())?;
    ensure(bits(y1.data()) == bits(y2.data()), || "inference not bit-exact".into())?;
    let tcfg = toy(vec![8], 1);
    let data = toy_burgers(&tcfg);
    let tc = TrainConfig {
        steps: 5,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let r1 = train(init_params(&tcfg, 9).unwrap(), &data, &tc, None).map_err(|e| e.to_string())?;
    let r2 = train(init_params(&tcfg, 9).unwrap(), &data, &tc, None).map_err(|e| e.to_string())?;
    let losses = |r: &fst_core::training::TrainOutcome| r.history.iter().map(|h| h.loss.to_bits()).collect::<Vec<_>>();
    ensure(
        bits(&r1.params.to_flat()) == bits(&r2.params.to_flat()) && losses(&r1) == losses(&r2),
        || "training not bit-exact".into(),
    )?;
    Ok(format!(
        "attention row-sum error {row_err:.1e}; S = 1 vs hand computation {s1_err:.1e}; zero decoder -> 0; init, inference and training bit-exact"
    ))
}

// ------------------------------------------------------------ criterion 7

fn training_ratio(dir: &Path, pde: PdeKind, loss: &str) -> Result<(f64, f64), String> {
    let cfg = ExperimentConfig::defaults(pde);
    let traj = load_traj(&dir.join("trajectory.fsta"))?;
    let (ck, params) =
        read_checkpoint(&dir.join(format!("checkpoint_{loss}.fsta"))).map_err(|e| e.to_string())?;
    let model = ck.model_config();
    let data = build_windows(Arc::new(traj), &model, (0.0, cfg.split.train_end), ck.t_norm).map_err(|e| e.to_string())?;
    let init = init_params(&model, cfg.seeds.init).map_err(|e| e.to_string())?;
    let before = dataset_mse(&init, &data, 64).map_err(|e| e.to_string())?;
    let after = dataset_mse(&params, &data, 64).map_err(|e| e.to_string())?;
    Ok((before, after))
}

fn criterion_7(p: &Pipelines) -> Check {
    let bdir = p.burgers.as_ref().map_err(|e| format!("Burgers pipeline failed: {e}"))?;
    let ndir = p.ns.as_ref().map_err(|e| format!("NS pipeline failed: {e}"))?;
    let (b0, b1) = training_ratio(bdir, PdeKind::Burgers1d, "mse")?;
    let (n0, n1) = training_ratio(ndir, PdeKind::Ns2d, "mse")?;
    let bt = p
        .burgers_train_time
        .iter()
        .find(|(l, _)| l == "mse")
        .map(|(_, d)| *d)
        .unwrap_or_default();
    let nt = p.ns_train_time.unwrap_or_default();
    let limit = Duration::from_secs(20 * 60);
    let detail = format!(
        "Burgers 2000 steps: {b0:.3e} -> {b1:.3e} (x{:.1e}, need >= 1e3) in {:.0} s; NS [0, 100] 2000 steps: {n0:.3e} -> {n1:.3e} (x{:.1e}, need >= 1e2) in {:.0} s",
        b0 / b1,
        bt.as_secs_f64(),
        n0 / n1,
        nt.as_secs_f64()
    );
    ensure(b0 / b1 >= 1e3 && n0 / n1 >= 1e2 && bt <= limit && nt <= limit, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ criterion 8

fn oracle_is_exact(reference: &Trajectory, split: f64) -> Result<usize, String> {
    let s = 10;
    let oracle = OracleModel { reference, seq_len: s };
    let n_train = reference.indices_in(0.0, split).end;
    let mut total = 0;
    for (start, steps) in [(0, reference.len() - s), (n_train - s, reference.len() - n_train)] {
        let r = rollout(&oracle, reference, start, steps, RolloutMode::ClosedLoop, split).map_err(|e| e.to_string())?;
        ensure(r.mse.len() == steps && r.mse.iter().all(|&(_, m)| m == 0.0), || {
            "oracle rollout has non-zero MSE".into()
        })?;
        total += steps;
    }
    Ok(total)
}

fn criterion_8(p: &Pipelines) -> Check {
    let bdir = p.burgers.as_ref().map_err(|e| format!("Burgers pipeline failed: {e}"))?;
    let ndir = p.ns.as_ref().map_err(|e| format!("NS pipeline failed: {e}"))?;
    let bref = load_traj(&bdir.join("trajectory.fsta"))?;
    let nref = load_traj(&ndir.join("trajectory.fsta"))?;
    let checked = oracle_is_exact(&bref, 3.0)? + oracle_is_exact(&nref, 100.0)?;

    let cfg = ExperimentConfig::defaults(PdeKind::Burgers1d);
    let (ck, params) = read_checkpoint(&bdir.join("checkpoint_mse.fsta")).map_err(|e| e.to_string())?;
    let model_cfg = ck.model_config();
    let model = TransformerModel {
        config: model_cfg.clone(),
        params: params.clone(),
        t_norm: ck.t_norm,
        project: cfg.forecast.project,
    };
    let reference = Arc::new(bref);
    let t_end = *reference.times.last().unwrap();
    let full = build_windows(reference.clone(), &model_cfg, (0.0, t_end), ck.t_norm).map_err(|e| e.to_string())?;
    let n_train = reference.indices_in(0.0, cfg.split.train_end).end;
    let mut compared = Vec::new();
    // Last training window, first forecast window, and one deep in the test interval.
    let first_test_window = n_train - model_cfg.seq_len;
    for w in [first_test_window - 1, first_test_window, full.len() - 1] {
        let start = full.input_range(w).start;
        let r = rollout(&model, &reference, start, 1, RolloutMode::ClosedLoop, cfg.split.train_end)
            .map_err(|e| e.to_string())?;
        let single = single_step_mse(&params, &full, w, cfg.forecast.project).map_err(|e| e.to_string())?;
        let first = r.mse[0].1;
        ensure(first.to_bits() == single.to_bits(), || {
            format!("window {w}: rollout {first:e} vs single-step {single:e}")
        })?;
        compared.push(format!("t = {} {first:.3e}", r.mse[0].0));
    }
    // The CLI's first forecast row is the same number.
    let csv = std::fs::read_to_string(bdir.join("mse_curve_mse.csv")).map_err(|e| e.to_string())?;
    let first_test: f64 = csv
        .lines()
        .find(|l| l.ends_with(",test"))
        .and_then(|l| l.split(',').nth(1))
        .and_then(|v| v.parse().ok())
        .ok_or("no test row in mse_curve_mse.csv")?;
    let single = single_step_mse(&params, &full, first_test_window, cfg.forecast.project).map_err(|e| e.to_string())?;
    ensure(first_test.to_bits() == single.to_bits(), || {
        format!("CLI first forecast MSE {first_test:e} vs single-step {single:e}")
    })?;
    Ok(format!(
        "oracle MSE == 0 over {checked} rollout steps; first-step MSE == single-step MSE bit-exactly at {}",
        compared.join(", ")
    ))
}

// ------------------------------------------------------------ criterion 9

fn criterion_9(p: &Pipelines) -> Check {
    let bdir = p.burgers.as_ref().map_err(|e| format!("Burgers pipeline failed: {e}"))?;
    let ndir = p.ns.as_ref().map_err(|e| format!("NS pipeline failed: {e}"))?;
    let reference = load_traj(&bdir.join("trajectory.fsta"))?;
    let pred = load_traj(&bdir.join("prediction_mse.fsta"))?;
    ensure(
        pred.times.first().is_some_and(|&t| (t - 3.01).abs() < 1e-9) && pred.times.last() == reference.times.last(),
        || format!("Burgers forecast covers {:?}..{:?}", pred.times.first(), pred.times.last()),
    )?;
    // MSE(t) = (1/N)Σ|Δû|² against the reference energy Σ|û|².
    let mut worst = 0.0f64;
    for (t, st) in pred.times.iter().zip(&pred.states) {
        let i = reference.times.iter().position(|r| r == t).ok_or("misaligned forecast")?;
        let mse = spectral_mse(st, &reference.states[i]).map_err(|e| e.to_string())?;
        let energy = reference.states[i].energy();
        ensure(mse.is_finite(), || format!("non-finite MSE at t = {t}"))?;
        worst = worst.max(mse / energy);
    }
    ensure(worst <= 1e-2, || format!("Burgers MSE/energy reaches {worst:.3e} on (3, 5.5]"))?;
    let svg = std::fs::read_to_string(bdir.join("mse_curve_mse.svg")).map_err(|e| e.to_string())?;
    ensure(
        svg.contains("class=\"marker\"") && svg.contains("stroke-dasharray") && svg.contains("end of training interval"),
        || "MSE figure lacks the dashed train/test boundary".into(),
    )?;
    let csv = std::fs::read_to_string(bdir.join("mse_curve_mse.csv")).map_err(|e| e.to_string())?;
    let boundary_ok = csv.lines().skip(1).all(|l| {
        let f: Vec<&str> = l.split(',').collect();
        let t: f64 = f[0].parse().unwrap_or(f64::NAN);
        (t <= 3.0 + 1e-9 && f[2] == "train") || (t > 3.0 + 1e-9 && f[2] == "test")
    });
    ensure(boundary_ok, || "MSE CSV interval labels do not split at t = 3".into())?;
    let slices = ["0.5", "1.5", "3", "4", "5", "5.5"]
        .iter()
        .filter(|t| bdir.join(format!("slice_mse_t{t}.svg")).exists())
        .count();
    ensure(slices == 6, || format!("{slices} of 6 Burgers slice plots emitted"))?;

    let nref = load_traj(&ndir.join("trajectory.fsta"))?;
    let npred = load_traj(&ndir.join("prediction_mse.fsta"))?;
    ensure(
        npred.len() == 1000 && npred.times.first().is_some_and(|&t| t > 100.0) && npred.times.last() == nref.times.last(),
        || format!("NS forecast has {} states", npred.len()),
    )?;
    ensure(npred.states.iter().all(|s| s.is_finite()), || "NS forecast not finite".into())?;
    let mut nworst = 0.0f64;
    for (t, st) in npred.times.iter().zip(&npred.states) {
        let i = nref.times.iter().position(|r| r == t).ok_or("misaligned NS forecast")?;
        let mse = spectral_mse(st, &nref.states[i]).map_err(|e| e.to_string())?;
        let energy = nref.states[i].energy();
        nworst = nworst.max(mse / energy);
    }
    ensure(nworst.is_finite(), || "NS MSE not finite".into())?;
    let panels = std::fs::read_dir(ndir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name().to_string_lossy().into_owned();
            n.starts_with("fields_mse_t") && n.ends_with(".svg")
        })
        .count();
    ensure(panels >= 1 && ndir.join("fields_mse.fsta").exists(), || "NS field/error panels missing".into())?;
    Ok(format!(
        "Burgers (3, 5.5]: max MSE/energy {worst:.2e} (limit 1e-2), boundary marked, 6 slice plots; NS (100, 200]: 1000 finite steps, max MSE/energy {nworst:.2e}, {panels} field/error panel figures"
    ))
}

// ----------------------------------------------------------- criterion 10

fn criterion_10(p: &Pipelines) -> Check {
    let dir = p.burgers.as_ref().map_err(|e| format!("Burgers pipeline failed: {e}"))?;
    let mut seeds = Vec::new();
    for loss in ["mse", "physics"] {
        for f in [
            format!("checkpoint_{loss}.fsta"),
            format!("prediction_{loss}.fsta"),
            format!("mse_curve_{loss}.csv"),
            format!("manifest.train.{loss}.toml"),
        ] {
            ensure(dir.join(&f).exists(), || format!("missing {f}"))?;
        }
        let m: toml::Value = std::fs::read_to_string(dir.join(format!("manifest.train.{loss}.toml")))
            .map_err(|e| e.to_string())?
            .parse()
            .map_err(|e: toml::de::Error| e.to_string())?;
        seeds.push(m.get("seeds").cloned());
    }
    ensure(seeds[0].is_some() && seeds[0] == seeds[1], || "loss modes used different seeds".into())?;
    let svg = std::fs::read_to_string(dir.join("mse_comparison.svg")).map_err(|e| e.to_string())?;
    ensure(
        svg.matches("<polyline").count() == 2 && svg.contains(">mse<") && svg.contains(">physics<"),
        || "comparison figure does not show both loss modes".into(),
    )?;
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let mut worst = [0.0f64; 2];
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let k = match f[0] {
            "mse" => 0,
            "physics" => 1,
            _ => continue,
        };
        if f[2] == "test" {
            worst[k] = worst[k].max(f[3].parse::<f64>().unwrap_or(f64::NAN));
        }
    }
    ensure(worst.iter().all(|w| *w > 0.0), || "metrics.csv lacks test rows for a loss mode".into())?;
    let times: Vec<String> = p
        .burgers_train_time
        .iter()
        .map(|(l, d)| format!("{l} {:.0} s", d.as_secs_f64()))
        .collect();
    Ok(format!(
        "both modes trained on identical seeds ({}); test-interval max MSE: mse {:.3e}, physics {:.3e}; curves emitted side by side in mse_comparison.svg",
        times.join(", "),
        worst[0],
        worst[1]
    ))
}

// ----------------------------------------------------------- criterion 11

fn criterion_11(root: &Path) -> Check {
    // Bit-exact roundtrip, including values that compare equal but differ in bits.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut special = vec![0.0, -0.0, f64::MIN_POSITIVE / 3.0, f64::MAX, f64::INFINITY, f64::NEG_INFINITY];
    special.push(f64::from_bits(0x7ff8_0000_dead_beef));
    special.extend((0..500).map(|_| rng.gen::<f64>() * 1e3 - 5e2));
    let records = vec![
        Record::f64("values", vec![special.len()], special.clone()),
        Record::f64("cube", vec![2, 3, 4], (0..24).map(|i| i as f64 / 7.0).collect()),
        Record::text("meta", "kind = \"test\"\n"),
    ];
    let bytes = encode(&records).map_err(|e| e.to_string())?;
    let back = decode(&bytes).map_err(|e| e.to_string())?;
    for (a, b) in records.iter().zip(&back) {
        let same = a.name == b.name
            && a.shape == b.shape
            && match (&a.data, &b.data) {
                (ArrayData::F64(x), ArrayData::F64(y)) => bits(x) == bits(y),
                (x, y) => x == y,
            };
        ensure(same, || format!("record `{}` not bit-exact", a.name))?;
    }

    // Corruption in a real trajectory file.
    let dir = root.join("repeat");
    let cfg = root.join("tiny.toml");
    std::fs::write(
        &cfg,
        "[pde]\nkind = \"burgers1d\"\ngrid = [32]\nn_steps = 600\nsample_every = 10\n\n[split]\ntrain_end = 0.4\n\n[model]\nd_model = 16\nn_head = 2\nseq_len = 4\n\n[training]\nsteps = 40\nbatch_size = 8\n",
    )
    .map_err(|e| e.to_string())?;
    let args = |cmd: &'static str| vec![cmd, "--config", s(&cfg), "--out", s(&dir)];
    fst(&args("generate"))?;
    let traj_path = dir.join("trajectory.fsta");
    let mut raw = std::fs::read(&traj_path).map_err(|e| e.to_string())?;
    let pos = raw.len() - 100;
    raw[pos] ^= 0x10;
    let bad = root.join("corrupt.fsta");
    std::fs::write(&bad, &raw).map_err(|e| e.to_string())?;
    let crc_detected = matches!(
        read_trajectory(&bad),
        Err(PersistError::Container(ContainerError::CrcMismatch { .. }))
    );
    ensure(crc_detected, || "flipped payload bit not detected".into())?;
    let code = exit_code(&["train", "--config", s(&cfg), "--out", s(&dir), "--trajectory", s(&bad)]);
    ensure(code == Some(3), || format!("corrupt input exit code {code:?}, expected 3"))?;

    // Two identical CLI runs.
    let artifacts = [
        "trajectory.fsta",
        "checkpoint_mse.fsta",
        "loss_mse.csv",
        "manifest.generate.toml",
        "manifest.train.mse.toml",
    ];
    fst(&args("train"))?;
    let first: Vec<Vec<u8>> = artifacts
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap_or_default())
        .collect();
    fst(&args("generate"))?;
    fst(&args("train"))?;
    for (f, before) in artifacts.iter().zip(&first) {
        let after = std::fs::read(dir.join(f)).map_err(|e| e.to_string())?;
        ensure(!after.is_empty() && &after == before, || format!("{f} differs between identical runs"))?;
    }
    Ok(format!(
        "{} values roundtrip bit-exactly; CRC catches a flipped bit (CLI exit 3); identical runs reproduce {}",
        special.len() + 24,
        artifacts.join(", ")
    ))
}

// ------------------------------------------------------------------- main

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(payload) => Err(payload
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    }
}

fn main() {
    // Honor `cargo test -- --list` and name filters minimally.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let root = tempfile::tempdir().expect("temp dir");
    let started = Instant::now();
    eprintln!("acceptance: running default-size pipelines (this takes a few minutes)");
    let mut burgers_train_time = Vec::new();
    let mut ns_train_time = None;
    let burgers = run_burgers(root.path(), &mut burgers_train_time);
    let ns = run_ns(root.path(), &mut ns_train_time);
    let pipelines = Pipelines {
        burgers,
        ns,
        burgers_train_time,
        ns_train_time,
    };
    let tg = taylor_green_run();

    let criteria: Vec<(&str, Box<dyn FnOnce() -> Check + '_>)> = vec![
        ("solver vs analytic Taylor–Green", Box::new(|| criterion_1(&tg))),
        ("RK4 temporal order", Box::new(criterion_2)),
        ("incompressibility", Box::new(|| criterion_3(&tg, &pipelines.ns))),
        ("Burgers convergence and mean conservation", Box::new(criterion_4)),
        ("autodiff soundness", Box::new(criterion_5)),
        ("architecture shape/behavior", Box::new(criterion_6)),
        ("training convergence", Box::new(|| criterion_7(&pipelines))),
        ("rollout consistency", Box::new(|| criterion_8(&pipelines))),
        ("generalization protocol", Box::new(|| criterion_9(&pipelines))),
        ("loss-mode comparison", Box::new(|| criterion_10(&pipelines))),
        ("I/O integrity", Box::new(|| criterion_11(root.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        match guarded(check) {
            Ok(detail) => println!("PASS criterion {:>2} ({name}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} ({name}): {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0} s",
        11 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
