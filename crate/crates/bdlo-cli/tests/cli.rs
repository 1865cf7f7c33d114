//! End-to-end tests of the `bdlo` binary: every subcommand is exercised
//! through the filesystem against small synthetic scenarios, and the
//! relative ordering of the evaluation ablations is checked on a
//! calibrated branched-harness dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bdlo_sim::io::{load_dataset, load_params};
use tempfile::TempDir;

/// Three-branch harness: a spine with two limbs, 13 vertices total.
const TOPOLOGY: &str = "bdlo-topology v1
branch spine parent 6
branch limb-a child 4 at 2
branch limb-b child 3 at 4
";

const TRUE_PARAMS: &str = "bdlo-params v1
branch spine mass 0.02 bend 0.001 0.001 twist 0.001 inertia-scale 1
branch limb-a mass 0.02 bend 0.001 0.001 twist 0.001 inertia-scale 1
branch limb-b mass 0.02 bend 0.001 0.001 twist 0.001 inertia-scale 1
";

/// Bend and twist doubled relative to [`TRUE_PARAMS`]; the initial guess
/// for identification and the model of the `--no-sysid` ablation.
const STIFF_PARAMS: &str = "bdlo-params v1
branch spine mass 0.02 bend 0.002 0.002 twist 0.002 inertia-scale 1
branch limb-a mass 0.02 bend 0.002 0.002 twist 0.002 inertia-scale 1
branch limb-b mass 0.02 bend 0.002 0.002 twist 0.002 inertia-scale 1
";

/// Root pin held at its rest position; the scene moves under gravity.
const HOLD_MOTION: &str = "bdlo-motion v1
pin 0 0
at 0 0 0 0 hold
";

/// Root pin raised 5 cm over the first half second, then held.
const SWEEP_MOTION: &str = "bdlo-motion v1
pin 0 0
at 0 0 0 0 linear
at 0.5 0 0 0.05 hold
";

fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, content).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdlo"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Value of a `key value` stdout report line.
fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no `{key}` line in:\n{stdout}"))
}

fn num(stdout: &str, key: &str) -> f64 {
    field(stdout, key).parse().unwrap()
}

/// A gravity-driven swing: the root is held while the branches sag from
/// the straight rest shape. Loose default constraint slack keeps the
/// motion force-dominated, so the material parameters are observable.
fn swing_config(out_stem: &str, params_file: &str, horizon: usize) -> String {
    format!(
        "topology = \"harness.topo\"\n\
         parameters = \"{params_file}\"\n\
         motion = \"hold.motion\"\n\
         horizon = {horizon}\n\
         trajectory-out = \"{out_stem}.traj\"\n\
         inputs-out = \"{out_stem}.inputs\"\n\
         \n\
         [step]\n\
         dt = 0.01\n"
    )
}

/// The ablation scenario: the root is dragged upward under damping with a
/// tight constraint slack, so every constraint class does visible work.
fn sweep_config(out_stem: &str, params_file: &str) -> String {
    format!(
        "topology = \"harness.topo\"\n\
         parameters = \"{params_file}\"\n\
         motion = \"sweep.motion\"\n\
         horizon = 60\n\
         trajectory-out = \"{out_stem}.traj\"\n\
         inputs-out = \"{out_stem}.inputs\"\n\
         \n\
         [step]\n\
         dt = 0.01\n\
         damping = 0.98\n\
         epsilon = 0.0005\n"
    )
}

/// Fixture directory with the harness files every scenario shares.
fn fixture() -> TempDir {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "harness.topo", TOPOLOGY);
    write(dir.path(), "true.params", TRUE_PARAMS);
    write(dir.path(), "stiff.params", STIFF_PARAMS);
    write(dir.path(), "hold.motion", HOLD_MOTION);
    write(dir.path(), "sweep.motion", SWEEP_MOTION);
    dir
}

fn path_str(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_a_loadable_dataset() {
    let dir = fixture();
    write(dir.path(), "run.toml", &swing_config("run", "true.params", 30));
    let out = run_ok(&["simulate", "--config", &path_str(&dir, "run.toml")]);
    assert_eq!(field(&out, "frames"), "31");

    let ds = load_dataset(
        &dir.path().join("run.traj"),
        &dir.path().join("run.inputs"),
    )
    .unwrap();
    assert_eq!(ds.frames.len(), 31);
    assert_eq!(ds.step_count(), 30);
    assert_eq!(ds.dt, 0.01);
    assert_eq!(ds.frames[0].len(), 3);
    assert_eq!(ds.frames[0][0].len(), 6);
    // The scene actually moved under gravity.
    let sag = (ds.frames[30][0][5] - ds.frames[0][0][5]).norm();
    assert!(sag > 1e-3, "free end never sagged ({sag})");
}

#[test]
fn simulate_without_gravity_keeps_the_pinned_scene_at_rest() {
    let dir = fixture();
    let config = format!(
        "{}\ngravity = [0.0, 0.0, 0.0]\n",
        swing_config("still", "true.params", 20).trim_end()
    );
    write(dir.path(), "still.toml", &config);
    run_ok(&["simulate", "--config", &path_str(&dir, "still.toml")]);
    let ds = load_dataset(
        &dir.path().join("still.traj"),
        &dir.path().join("still.inputs"),
    )
    .unwrap();
    for (t, frame) in ds.frames.iter().enumerate() {
        for (b, xb) in frame.iter().enumerate() {
            for (i, x) in xb.iter().enumerate() {
                let drift = (x - ds.frames[0][b][i]).norm();
                assert!(
                    drift < 1e-12,
                    "frame {t} branch {b} vertex {i} drifted by {drift}"
                );
            }
        }
    }
}

#[test]
fn simulate_is_deterministic() {
    let dir = fixture();
    write(dir.path(), "a.toml", &swing_config("a", "true.params", 25));
    write(dir.path(), "b.toml", &swing_config("b", "true.params", 25));
    run_ok(&["simulate", "--config", &path_str(&dir, "a.toml")]);
    run_ok(&["simulate", "--config", &path_str(&dir, "b.toml")]);
    assert_eq!(
        fs::read(dir.path().join("a.traj")).unwrap(),
        fs::read(dir.path().join("b.traj")).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join("a.inputs")).unwrap(),
        fs::read(dir.path().join("b.inputs")).unwrap()
    );
}

#[test]
fn evaluation_of_self_consistent_data_reports_zero_error() {
    let dir = fixture();
    write(dir.path(), "gt.toml", &swing_config("gt", "true.params", 40));
    run_ok(&["simulate", "--config", &path_str(&dir, "gt.toml")]);
    let out = run_ok(&[
        "evaluate",
        "--config",
        &path_str(&dir, "gt.toml"),
        "--trajectory",
        &path_str(&dir, "gt.traj"),
        "--inputs",
        &path_str(&dir, "gt.inputs"),
        "--fitted-params",
        &path_str(&dir, "true.params"),
    ]);
    assert_eq!(field(&out, "configuration"), "full");
    assert_eq!(field(&out, "horizon"), "40");
    // The rollout replays the generating model exactly.
    assert!(num(&out, "rmse") < 1e-12, "rmse {}", field(&out, "rmse"));
}

/// Each ablation removes one ingredient of the full model; the rollout
/// error against the calibrated dataset must grow down the ladder. Error
/// values for this scenario sit near 0 / 0 / 0.015 / 0.092 / 0.36 / 0.49,
/// so the strict links are asserted with a wide margin.
#[test]
fn ablation_ladder_orders_the_model_ingredients() {
    let dir = fixture();
    write(dir.path(), "gt.toml", &sweep_config("gt", "true.params"));
    write(dir.path(), "eval.toml", &sweep_config("eval", "stiff.params"));
    run_ok(&["simulate", "--config", &path_str(&dir, "gt.toml")]);

    let config = path_str(&dir, "eval.toml");
    let traj = path_str(&dir, "gt.traj");
    let inputs = path_str(&dir, "gt.inputs");
    let params = path_str(&dir, "true.params");
    let eval = |flags: &[&str]| -> f64 {
        let mut args = vec![
            "evaluate",
            "--config",
            config.as_str(),
            "--trajectory",
            traj.as_str(),
            "--inputs",
            inputs.as_str(),
            "--fitted-params",
            params.as_str(),
        ];
        args.extend_from_slice(flags);
        num(&run_ok(&args), "rmse")
    };

    let full = eval(&[]);
    let no_residual = eval(&["--no-residual"]);
    let no_sysid = eval(&["--no-sysid"]);
    let no_orient = eval(&["--no-orient"]);
    let no_attach = eval(&["--no-attach"]);
    let no_inext = eval(&["--no-inext"]);

    // Without a checkpoint the full and no-residual arms run the same
    // physics, and both replay the generating model exactly.
    assert!(full < 1e-12, "full {full}");
    assert!(no_residual <= full + 1e-12, "no-residual {no_residual}");
    // Falling back to the stiff parameters costs real error...
    assert!(
        no_sysid > 5e-3 && no_sysid < 5e-2,
        "no-sysid out of the calibrated band: {no_sysid}"
    );
    // ...and each disabled constraint class costs strictly more.
    assert!(
        no_orient > 2.0 * no_sysid,
        "no-orient {no_orient} vs no-sysid {no_sysid}"
    );
    assert!(
        no_attach > 1.5 * no_orient,
        "no-attach {no_attach} vs no-orient {no_orient}"
    );
    assert!(
        no_inext > 1.1 * no_attach,
        "no-inext {no_inext} vs no-attach {no_attach}"
    );
}

#[test]
fn identify_descends_from_perturbed_stiffness() {
    let dir = fixture();
    write(dir.path(), "gt.toml", &swing_config("gt", "true.params", 80));
    write(dir.path(), "fit.toml", &swing_config("fit", "stiff.params", 80));
    run_ok(&["simulate", "--config", &path_str(&dir, "gt.toml")]);
    let out = run_ok(&[
        "identify",
        "--config",
        &path_str(&dir, "fit.toml"),
        "--trajectory",
        &path_str(&dir, "gt.traj"),
        "--inputs",
        &path_str(&dir, "gt.inputs"),
        "--out",
        &path_str(&dir, "fitted.params"),
        "--max-iterations",
        "15",
    ]);
    let initial = num(&out, "initial-rmse");
    let final_ = num(&out, "final-rmse");
    assert!(
        initial > 5e-3,
        "perturbed start should show real error: {initial}"
    );
    assert!(
        final_ < initial / 3.0,
        "descent too shallow: {initial} -> {final_}"
    );

    let fitted = load_params(&dir.path().join("fitted.params")).unwrap();
    assert_eq!(fitted.len(), 3);
    // The fit moved the stiffnesses off the perturbed initial guess.
    assert!(fitted.iter().any(|e| (e.bend.0 - 0.002).abs() > 1e-4));
}

#[test]
fn identify_at_the_generating_parameters_converges_immediately() {
    let dir = fixture();
    write(dir.path(), "gt.toml", &swing_config("gt", "true.params", 60));
    run_ok(&["simulate", "--config", &path_str(&dir, "gt.toml")]);
    // Windows shorter than the dataset force mid-trajectory restarts,
    // which must replay the rollout's frame bookkeeping to sit at the
    // optimum.
    let out = run_ok(&[
        "identify",
        "--config",
        &path_str(&dir, "gt.toml"),
        "--trajectory",
        &path_str(&dir, "gt.traj"),
        "--inputs",
        &path_str(&dir, "gt.inputs"),
        "--out",
        &path_str(&dir, "refit.params"),
        "--horizon",
        "25",
    ]);
    assert!(num(&out, "initial-rmse") < 1e-9);
    assert_eq!(field(&out, "iterations"), "0");
    assert_eq!(field(&out, "converged"), "true");
}

#[test]
fn trained_checkpoint_flows_through_evaluation() {
    let dir = fixture();
    write(dir.path(), "gt.toml", &swing_config("gt", "true.params", 50));
    write(dir.path(), "fit.toml", &swing_config("fit", "stiff.params", 50));
    run_ok(&["simulate", "--config", &path_str(&dir, "gt.toml")]);
    // Train against the stiff model, so the residual sees real one-step
    // error to fit.
    let out = run_ok(&[
        "train-residual",
        "--config",
        &path_str(&dir, "fit.toml"),
        "--trajectory",
        &path_str(&dir, "gt.traj"),
        "--inputs",
        &path_str(&dir, "gt.inputs"),
        "--out",
        &path_str(&dir, "net.ckpt"),
        "--epochs",
        "50",
    ]);
    let initial = num(&out, "initial-loss");
    let final_ = num(&out, "final-loss");
    assert!(initial > 0.0, "model mismatch must show up: {initial}");
    assert!(final_ <= initial, "training rose: {initial} -> {final_}");

    let eval = run_ok(&[
        "evaluate",
        "--config",
        &path_str(&dir, "fit.toml"),
        "--trajectory",
        &path_str(&dir, "gt.traj"),
        "--inputs",
        &path_str(&dir, "gt.inputs"),
        "--checkpoint",
        &path_str(&dir, "net.ckpt"),
        "--no-sysid",
    ]);
    let rmse = num(&eval, "rmse");
    assert!(rmse.is_finite(), "rmse {rmse}");
}

#[test]
fn schema_errors_exit_with_code_two_and_cite_the_line() {
    let dir = fixture();
    write(
        dir.path(),
        "bad.topo",
        "bdlo-topology v1\nbranch spine parent 6\nbranch limb child NOPE at 2\n",
    );
    let config = swing_config("x", "true.params", 10).replace("harness.topo", "bad.topo");
    write(dir.path(), "bad.toml", &config);
    let out = run(&["simulate", "--config", &path_str(&dir, "bad.toml")]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("bad.topo:3"),
        "no file/line in error: {stderr}"
    );
}

#[test]
fn numeric_failures_exit_with_code_three() {
    let dir = fixture();
    let config = swing_config("boom", "true.params", 20).replace("dt = 0.01", "dt = 50.0");
    write(dir.path(), "boom.toml", &config);
    let out = run(&["simulate", "--config", &path_str(&dir, "boom.toml")]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gradcheck_passes_on_random_rods() {
    let out = run_ok(&["gradcheck", "--rods", "5", "--max-vertices", "6"]);
    assert_eq!(field(&out, "rods"), "5");
    assert!(num(&out, "max-theta-gradient-error") < 1e-6);
    assert!(num(&out, "max-force-error") < 1e-4);
    assert!(out.contains("gradcheck ok"));
}

#[test]
fn bench_smoke_emits_the_comparison_table() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = run_ok(&[
        "bench",
        "--children-max",
        "2",
        "--steps",
        "5",
        "--repeats",
        "3",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.contains("children,sequential_ns,batched_ns,ratio"));
    assert!(out.contains("theta_mode,median_ns"));
    let written = fs::read_to_string(&csv).unwrap();
    assert!(written.starts_with("children,sequential_ns,batched_ns,ratio"));
    assert!(written.contains("theta_speedup,"));
}
