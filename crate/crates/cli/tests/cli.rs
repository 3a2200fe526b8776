use fst_core::persist::{read_checkpoint, read_trajectory};
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[pde]
kind = "burgers1d"
grid = [32]
n_steps = 600
sample_every = 10

[split]
train_end = 0.4

[model]
d_model = 16
n_head = 2
seq_len = 4

[training]
steps = 20
batch_size = 8

[forecast]
slice_times = [0.2, 0.5]
"#;

fn fst(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fst"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("launch fst")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fst(dir, args);
    assert!(
        out.status.success(),
        "fst {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(dir: &Path, args: &[&str]) -> Option<i32> {
    fst(dir, args).status.code()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn tiny_run(dir: &Path) {
    write(dir, "tiny.toml", TINY);
    for cmd in ["generate", "train", "predict"] {
        ok(dir, &[cmd, "--config", "tiny.toml", "--out", "run"]);
    }
}

#[test]
fn invalid_config_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "bad.toml", "[pde]\nkind = \"burgers1d\"\nnu = 0.0\n");
    assert_eq!(code(tmp.path(), &["generate", "--config", "bad.toml", "--out", "run"]), Some(2));
    assert!(!tmp.path().join("run").exists());

    write(tmp.path(), "typo.toml", "[pde]\nkind = \"heat\"\n");
    assert_eq!(code(tmp.path(), &["generate", "--config", "typo.toml"]), Some(2));
    write(tmp.path(), "tiny.toml", TINY);
    assert_eq!(
        code(tmp.path(), &["predict", "--config", "tiny.toml", "--horizon", "0"]),
        Some(2)
    );
}

#[test]
fn missing_input_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "tiny.toml", TINY);
    assert_eq!(code(tmp.path(), &["train", "--config", "tiny.toml", "--out", "empty"]), Some(3));
    assert_eq!(code(tmp.path(), &["train", "--config", "missing.toml"]), Some(3));
}

#[test]
fn unstable_time_step_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "unstable.toml",
        "[pde]\nkind = \"burgers1d\"\ngrid = [32]\ndt = 1.0\nn_steps = 400\nsample_every = 1\n",
    );
    let out = fst(tmp.path(), &["generate", "--config", "unstable.toml", "--out", "run"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!tmp.path().join("run/trajectory.fsta").exists());
}

#[test]
fn incompatible_inputs_exit_5() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_run(tmp.path());
    // A trajectory on another grid cannot feed this checkpoint.
    write(tmp.path(), "other.toml", &TINY.replace("grid = [32]", "grid = [16]"));
    ok(tmp.path(), &["generate", "--config", "other.toml", "--out", "other"]);
    assert_eq!(
        code(
            tmp.path(),
            &[
                "predict",
                "--config",
                "tiny.toml",
                "--out",
                "run",
                "--trajectory",
                "other/trajectory.fsta"
            ]
        ),
        Some(5)
    );
    // A reference that ends before the forecast does.
    write(tmp.path(), "short.toml", &TINY.replace("n_steps = 600", "n_steps = 500"));
    ok(tmp.path(), &["generate", "--config", "short.toml", "--out", "short"]);
    assert_eq!(
        code(
            tmp.path(),
            &[
                "evaluate",
                "--config",
                "tiny.toml",
                "--out",
                "run",
                "--reference",
                "short/trajectory.fsta"
            ]
        ),
        Some(5)
    );
}

#[test]
fn default_trajectories_have_expected_sampling() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "ns.toml", "[pde]\nkind = \"ns2d\"\n");
    write(tmp.path(), "burgers.toml", "[pde]\nkind = \"burgers1d\"\n");
    ok(tmp.path(), &["generate", "--config", "ns.toml", "--out", "ns"]);
    ok(tmp.path(), &["generate", "--config", "burgers.toml", "--out", "burgers"]);

    let (h, ns) = read_trajectory(&tmp.path().join("ns/trajectory.fsta")).unwrap();
    assert_eq!(ns.len(), 2001);
    assert_eq!(h.grid, vec![32, 32]);
    assert!((ns.times[2000] - 200.0).abs() < 1e-9);
    let (h, b) = read_trajectory(&tmp.path().join("burgers/trajectory.fsta")).unwrap();
    assert_eq!(b.len(), 551);
    assert_eq!(h.grid, vec![256]);
    assert!((b.times[550] - 5.5).abs() < 1e-9);
}

#[test]
fn pipeline_writes_artifacts_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_run(tmp.path());
    ok(tmp.path(), &["evaluate", "--config", "tiny.toml", "--out", "run"]);
    let run = tmp.path().join("run");
    for f in [
        "trajectory.fsta",
        "checkpoint_mse.fsta",
        "loss_mse.csv",
        "timing_mse.csv",
        "loss_mse.svg",
        "prediction_mse.fsta",
        "mse_curve_mse.csv",
        "mse_curve_mse.svg",
        "slice_mse_t0.2.svg",
        "slice_mse_t0.5.svg",
        "metrics.csv",
        "mse_comparison.svg",
        "manifest.generate.toml",
        "manifest.train.mse.toml",
        "manifest.predict.mse.toml",
        "manifest.evaluate.toml",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let loss = std::fs::read_to_string(run.join("loss_mse.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,loss,lr"));
    assert_eq!(loss.lines().count(), 21);

    let manifest: toml::Value = std::fs::read_to_string(run.join("manifest.predict.mse.toml"))
        .unwrap()
        .parse()
        .unwrap();
    let inputs = manifest["inputs"].as_table().unwrap();
    assert_eq!(inputs["checkpoint"]["file"].as_str(), Some("checkpoint_mse.fsta"));
    assert_eq!(inputs["trajectory"]["sha256"].as_str().map(str::len), Some(64));
    assert!(!std::fs::read_to_string(run.join("manifest.predict.mse.toml"))
        .unwrap()
        .contains(tmp.path().to_str().unwrap()));

    let (_, pred) = read_trajectory(&run.join("prediction_mse.fsta")).unwrap();
    assert_eq!(pred.len(), 20);
    assert!((pred.times[0] - 0.41).abs() < 1e-9);
}

#[test]
fn horizon_limits_the_forecast() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_run(tmp.path());
    ok(tmp.path(), &["predict", "--config", "tiny.toml", "--out", "run", "--horizon", "1"]);
    let (_, pred) = read_trajectory(&tmp.path().join("run/prediction_mse.fsta")).unwrap();
    assert_eq!(pred.len(), 1);
}

#[test]
fn reference_against_itself_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "tiny.toml", TINY);
    ok(tmp.path(), &["generate", "--config", "tiny.toml", "--out", "run"]);
    ok(
        tmp.path(),
        &["evaluate", "--config", "tiny.toml", "--out", "run", "--pred", "run/trajectory.fsta"],
    );
    let csv = std::fs::read_to_string(tmp.path().join("run/metrics.csv")).unwrap();
    let mut rows = csv.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    let mse = header.iter().position(|h| *h == "mse").unwrap();
    let mut n = 0;
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[mse].parse::<f64>().unwrap(), 0.0, "{row}");
        n += 1;
    }
    assert_eq!(n, 61);
}

#[test]
fn strict_architecture_drops_residuals() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "tiny.toml", TINY);
    ok(tmp.path(), &["generate", "--config", "tiny.toml", "--out", "run"]);
    ok(
        tmp.path(),
        &["train", "--config", "tiny.toml", "--out", "run", "--strict-paper-arch", "true"],
    );
    let (ck, _) = read_checkpoint(&tmp.path().join("run/checkpoint_mse.fsta")).unwrap();
    assert!(!ck.residual);
    ok(tmp.path(), &["train", "--config", "tiny.toml", "--out", "run", "--seed", "3"]);
    let (ck, _) = read_checkpoint(&tmp.path().join("run/checkpoint_mse.fsta")).unwrap();
    assert!(ck.residual);
}

#[test]
fn export_writes_physical_fields() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "tiny.toml", TINY);
    ok(tmp.path(), &["generate", "--config", "tiny.toml", "--out", "run"]);
    ok(
        tmp.path(),
        &[
            "export",
            "--config",
            "tiny.toml",
            "--out",
            "run",
            "--input",
            "run/trajectory.fsta",
            "--times",
            "0,0.3",
        ],
    );
    let csv = std::fs::read_to_string(tmp.path().join("run/trajectory_t0.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "x,u");
    assert_eq!(rows.len(), 33);
    // u(x, 0) = -sin(x) on the default [0, 2π) domain.
    let f: Vec<f64> = rows[9].split(',').map(|v| v.parse().unwrap()).collect();
    assert!((f[1] + f[0].sin()).abs() < 1e-12);
    assert!(tmp.path().join("run/trajectory_t0.3.csv").exists());
}

#[test]
fn version_flag_reports_build_version() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["--version"]);
    assert!(out.starts_with("fst v"), "{out}");
}
