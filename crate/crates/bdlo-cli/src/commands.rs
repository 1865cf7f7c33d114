//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bdlo_sim::dynamics::{
    deft_step, BatchedStepper, BdloState, GraspSpec, Pin, StepConfig, VelocityCorrector,
};
use bdlo_sim::io;
use bdlo_sim::residual::{train, ResidualNet, TrainOptions};
use bdlo_sim::rod::{
    bishop_frames, default_seed, optimize_theta, theta_gradient, total_energy, vertex_forces,
    BranchMaterial, MaterialParams, ThetaGradientMode, ThetaOptions, UniformBranchMaterial,
};
use bdlo_sim::sysid::{identify, IdentifyOptions, ParamSpec, ParamVector};
use bdlo_sim::{BdloTopology, BranchSpec, SimError};

use crate::config::Workspace;

// ---------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------

pub fn simulate(config_path: &Path) -> Result<()> {
    let ws = Workspace::load(config_path)?;
    let script = ws.motion()?;
    let traj_out = ws
        .config
        .trajectory_out
        .as_ref()
        .context("simulate needs 'trajectory-out' in the config")?;
    let inputs_out = ws
        .config
        .inputs_out
        .as_ref()
        .context("simulate needs 'inputs-out' in the config")?;
    let traj_out = ws.config.resolve(&ws.dir, traj_out);
    let inputs_out = ws.config.resolve(&ws.dir, inputs_out);

    let mut ds = io::generate_synthetic(
        &ws.topo,
        &ws.params,
        &ws.rest,
        script,
        ws.config.horizon,
        ws.config.noise_sigma,
        ws.config.seed,
        &ws.step,
    )?;
    ds.train_fraction = ws.config.train_split;
    io::save_dataset(&ds, &traj_out, &inputs_out)?;
    println!("frames {}", ds.frames.len());
    println!("wrote-trajectory {}", traj_out.display());
    println!("wrote-inputs {}", inputs_out.display());
    Ok(())
}

// ---------------------------------------------------------------------
// identify
// ---------------------------------------------------------------------

pub struct IdentifyArgs {
    pub trajectory: PathBuf,
    pub inputs: PathBuf,
    pub out: PathBuf,
    pub horizon: Option<usize>,
    pub max_iterations: Option<usize>,
    pub fit_mass: bool,
    pub fit_inertia: bool,
}

pub fn identify_cmd(config_path: &Path, args: &IdentifyArgs) -> Result<()> {
    let ws = Workspace::load(config_path)?;
    let script = ws.motion()?;
    let ds = io::load_dataset(&args.trajectory, &args.inputs)?;
    ds.validate_against(&ws.topo)?;
    let grasp = script.grasp();

    let spec = ParamSpec {
        mass: args.fit_mass,
        inertia: args.fit_inertia,
        ..ParamSpec::default()
    };
    let init = ParamVector::from_params(&ws.params, spec);
    let opts = IdentifyOptions {
        horizon: args.horizon.unwrap_or(ws.config.horizon),
        max_iterations: args.max_iterations.unwrap_or_else(|| IdentifyOptions::default().max_iterations),
        ..IdentifyOptions::default()
    };
    let (fitted_pv, report) = identify(
        &init,
        &ws.params,
        &ws.topo,
        &grasp,
        &ds.frames,
        ds.step_inputs(),
        &ws.step,
        &opts,
    )?;
    let fitted = fitted_pv.apply(&ws.params)?;
    let entries = io::entries_from_params(&ws.topo, &ws.entries, &fitted, &ws.params)?;
    io::save_params(&entries, &args.out)?;

    println!("initial-rmse {}", report.initial_loss);
    println!("final-rmse {}", report.final_loss);
    println!("iterations {}", report.iterations);
    println!("converged {}", report.converged);
    println!("wrote-params {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------
// train-residual
// ---------------------------------------------------------------------

pub struct TrainArgs {
    pub trajectory: PathBuf,
    pub inputs: PathBuf,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub net_seed: u64,
}

pub fn train_residual(config_path: &Path, args: &TrainArgs) -> Result<()> {
    let ws = Workspace::load(config_path)?;
    let script = ws.motion()?;
    let ds = io::load_dataset(&args.trajectory, &args.inputs)?;
    ds.validate_against(&ws.topo)?;
    let grasp = script.grasp();

    let defaults = TrainOptions::default();
    let opts = TrainOptions {
        epochs: args.epochs.unwrap_or(defaults.epochs),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        ..defaults
    };
    let mut net = ResidualNet::new(&ws.topo, args.net_seed);
    let report = train(
        &mut net,
        &ws.topo,
        &ws.params,
        &grasp,
        &ds.frames,
        ds.step_inputs(),
        &ws.step,
        &opts,
    )?;
    io::save_checkpoint(&net, &ws.topo, &args.out)?;

    println!("initial-loss {}", report.initial_loss);
    println!("final-loss {}", report.final_loss);
    println!("epochs {}", report.epochs_run);
    println!("wrote-checkpoint {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------

pub struct EvaluateArgs {
    pub trajectory: PathBuf,
    pub inputs: PathBuf,
    pub fitted_params: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub horizon: Option<usize>,
    pub no_inext: bool,
    pub no_attach: bool,
    pub no_orient: bool,
    pub no_residual: bool,
    pub no_sysid: bool,
}

impl EvaluateArgs {
    fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_residual {
            parts.push("no-residual");
        }
        if self.no_sysid {
            parts.push("no-sysid");
        }
        if self.no_orient {
            parts.push("no-orient");
        }
        if self.no_attach {
            parts.push("no-attach");
        }
        if self.no_inext {
            parts.push("no-inext");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

pub fn evaluate(config_path: &Path, args: &EvaluateArgs) -> Result<()> {
    let ws = Workspace::load(config_path)?;
    let script = ws.motion()?;
    let ds = io::load_dataset(&args.trajectory, &args.inputs)?;
    ds.validate_against(&ws.topo)?;
    let grasp = script.grasp();

    // Parameters: the fitted file when given and not ablated away.
    let params = match (&args.fitted_params, args.no_sysid) {
        (Some(p), false) => {
            let entries = io::load_params(p)?;
            io::material_from_entries(&ws.topo, &ws.rest, &entries)?
        }
        _ => ws.params.clone(),
    };

    // Residual corrector: the checkpoint when given and not ablated away.
    let net = match (&args.checkpoint, args.no_residual) {
        (Some(p), false) => Some(io::load_checkpoint(p, &ws.topo)?),
        _ => None,
    };
    let corrector: Option<&dyn VelocityCorrector> =
        net.as_ref().map(|n| n as &dyn VelocityCorrector);

    let mut cfg = ws.step.clone();
    cfg.use_residual = corrector.is_some();
    cfg.constraints.enabled.inextensibility = !args.no_inext;
    cfg.constraints.enabled.attachment = !args.no_attach;
    cfg.constraints.enabled.orientation = !args.no_orient;

    let horizon = args
        .horizon
        .unwrap_or(ws.config.horizon)
        .min(ds.step_count());
    if horizon == 0 {
        bail!("dataset has no steps to evaluate");
    }

    let mut state = BdloState::at_rest(&ws.topo, &ds.frames[0])?;
    let mut stepper = BatchedStepper::new(&ws.topo);
    let mut predicted = Vec::with_capacity(horizon + 1);
    predicted.push(ds.frames[0].clone());
    let mut diverged_at = None;
    for (t, targets) in ds.step_inputs()[..horizon].iter().enumerate() {
        let outcome = stepper.step(
            &mut state,
            &grasp,
            targets,
            &ws.topo,
            &params,
            &cfg,
            corrector,
        );
        match outcome {
            Ok(_) => predicted.push(state.x.clone()),
            Err(
                SimError::Numeric(_) | SimError::Geometry(_) | SimError::NonConvergence { .. },
            ) => {
                diverged_at = Some(t);
                break;
            }
            Err(other) => return Err(other.into()),
        }
    }

    println!("configuration {}", args.label());
    println!("horizon {horizon}");
    match diverged_at {
        Some(t) => {
            println!("diverged-at {t}");
            println!("rmse inf");
        }
        None => {
            let e = io::rmse(&predicted, &ds.frames, horizon)?;
            println!("rmse {e}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------

pub struct GradcheckArgs {
    pub rods: usize,
    pub max_vertices: usize,
    pub seed: u64,
    pub theta_tolerance: f64,
    pub force_tolerance: f64,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        GradcheckArgs {
            rods: 100,
            max_vertices: 8,
            seed: 2024,
            theta_tolerance: 1e-6,
            force_tolerance: 1e-4,
        }
    }
}

fn random_rod(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    let mut x = vec![Vector3::zeros()];
    let mut dir = Vector3::x();
    for _ in 0..n - 1 {
        let jitter = Vector3::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        );
        dir = (dir + jitter).normalize();
        let last = *x.last().unwrap();
        x.push(last + dir * rng.gen_range(0.6..1.4));
    }
    x
}

fn random_material(rng: &mut ChaCha8Rng, rest: &[Vector3<f64>]) -> Result<BranchMaterial> {
    let spec = UniformBranchMaterial {
        mass_per_vertex: rng.gen_range(0.01..0.05),
        bend_stiffness: (rng.gen_range(1e-4..1e-2), rng.gen_range(1e-4..1e-2)),
        twist_stiffness: rng.gen_range(1e-4..1e-2),
        inertia_scale: 1.0,
    };
    Ok(BranchMaterial::uniform(rest, &spec)?)
}

/// Verify the closed-form twist-angle gradient and vertex forces against
/// central finite differences of the energy on random bent, twisted,
/// anisotropic rods.
pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.rods == 0 || args.max_vertices < 3 {
        bail!("gradcheck needs at least 1 rod and 3 vertices");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst_theta = 0.0f64;
    let mut worst_force = 0.0f64;
    for _ in 0..args.rods {
        let n = rng.gen_range(3..=args.max_vertices);
        let x = random_rod(&mut rng, n);
        let rest = random_rod(&mut rng, n);
        let mat = random_material(&mut rng, &rest)?;
        let theta: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let seed = default_seed(&(x[1] - x[0]).normalize());

        // Twist-angle gradient against finite differences of the energy.
        let frames = bishop_frames(&x, &seed)?;
        let g = theta_gradient(&x, &frames, &theta, &mat)?;
        let h = 1e-6;
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        for j in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let fd = (total_energy(&x, &seed, &tp, &mat)? - total_energy(&x, &seed, &tm, &mat)?)
                / (2.0 * h);
            worst_theta = worst_theta.max((g[j] - fd).abs() / scale);
        }

        // Vertex forces against finite differences through the frames.
        let f = vertex_forces(&x, &seed, &theta, &mat)?;
        let scale = f
            .iter()
            .fold(0.0f64, |m, v| m.max(v.norm()))
            .max(1e-9);
        for i in 0..n {
            for c in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i][c] += h;
                xm[i][c] -= h;
                let fd = -(total_energy(&xp, &seed, &theta, &mat)?
                    - total_energy(&xm, &seed, &theta, &mat)?)
                    / (2.0 * h);
                worst_force = worst_force.max((f[i][c] - fd).abs() / scale);
            }
        }
    }
    println!("rods {}", args.rods);
    println!("max-theta-gradient-error {worst_theta}");
    println!("max-force-error {worst_force}");
    if worst_theta > args.theta_tolerance || worst_force > args.force_tolerance {
        return Err(SimError::Numeric(format!(
            "gradient check failed: theta {worst_theta} (tolerance {}), force {worst_force} (tolerance {})",
            args.theta_tolerance, args.force_tolerance
        ))
        .into());
    }
    println!("gradcheck ok");
    Ok(())
}

// ---------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------

pub struct BenchArgs {
    pub children_max: usize,
    pub steps: usize,
    pub repeats: usize,
    pub csv: Option<PathBuf>,
}

impl Default for BenchArgs {
    fn default() -> Self {
        BenchArgs {
            children_max: 8,
            steps: 50,
            repeats: 30,
            csv: None,
        }
    }
}

fn bench_topology(children: usize) -> Result<(BdloTopology, Vec<Vec<Vector3<f64>>>)> {
    let mut specs = vec![BranchSpec::parent("trunk", 12)];
    for k in 0..children {
        specs.push(BranchSpec::child(format!("limb-{k}"), 4, 1 + k));
    }
    let topo = BdloTopology::build(specs)?;
    let rest = io::canonical_rest(&topo, 0.05);
    Ok((topo, rest))
}

fn median_ns(mut samples: Vec<u128>) -> u128 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Median wall time per step of the one-branch-at-a-time path and the
/// buffered whole-structure path, per child count, plus the analytic and
/// finite-difference twist-solve timings.
pub fn bench(args: &BenchArgs) -> Result<()> {
    if args.children_max == 0 || args.steps == 0 || args.repeats == 0 {
        bail!("bench needs positive child count, steps, and repeats");
    }
    let mut lines = vec!["children,sequential_ns,batched_ns,ratio".to_string()];
    for children in 1..=args.children_max {
        let (topo, rest) = bench_topology(children)?;
        let params = MaterialParams::uniform(&topo, &rest, &[UniformBranchMaterial::default()])?;
        let grasp = GraspSpec {
            pins: vec![Pin { branch: 0, vertex: 0 }],
            clamps: vec![],
        };
        let targets = vec![rest[0][0]];
        let cfg = StepConfig::default();

        let mut state = BdloState::at_rest(&topo, &rest)?;
        let mut sequential = Vec::with_capacity(args.steps);
        for _ in 0..args.steps {
            let start = Instant::now();
            deft_step(&mut state, &grasp, &targets, &topo, &params, &cfg, None)?;
            sequential.push(start.elapsed().as_nanos());
        }

        let mut state = BdloState::at_rest(&topo, &rest)?;
        let mut stepper = BatchedStepper::new(&topo);
        let mut batched = Vec::with_capacity(args.steps);
        for _ in 0..args.steps {
            let start = Instant::now();
            stepper.step(&mut state, &grasp, &targets, &topo, &params, &cfg, None)?;
            batched.push(start.elapsed().as_nanos());
        }

        let seq = median_ns(sequential);
        let bat = median_ns(batched);
        lines.push(format!(
            "{children},{seq},{bat},{:.4}",
            seq as f64 / bat as f64
        ));
    }

    // Twist solve: closed-form gradient vs the finite-difference reference.
    lines.push("theta_mode,median_ns".to_string());
    let n = 20;
    let x: Vec<Vector3<f64>> = (0..n)
        .map(|i| {
            let s = i as f64 * 0.05;
            Vector3::new(s, 0.02 * (s * 8.0).sin(), 0.02 * (s * 8.0).cos())
        })
        .collect();
    let rest: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::new(i as f64 * 0.05, 0.0, 0.0)).collect();
    let mat = BranchMaterial::uniform(&rest, &UniformBranchMaterial::default())?;
    let seed = default_seed(&(x[1] - x[0]).normalize());
    let theta0 = vec![0.0; n - 1];
    let mut medians = Vec::new();
    for mode in [ThetaGradientMode::Analytic, ThetaGradientMode::FiniteDifference] {
        let opts = ThetaOptions {
            gradient_mode: mode,
            ..ThetaOptions::default()
        };
        let mut samples = Vec::with_capacity(args.repeats);
        for _ in 0..args.repeats {
            let start = Instant::now();
            let solve = optimize_theta(&x, &seed, &theta0, &[], &mat, &opts)?;
            std::hint::black_box(solve.energy);
            samples.push(start.elapsed().as_nanos());
        }
        let label = match mode {
            ThetaGradientMode::Analytic => "analytic",
            ThetaGradientMode::FiniteDifference => "finite-difference",
        };
        let med = median_ns(samples);
        medians.push(med);
        lines.push(format!("{label},{med}"));
    }
    lines.push(format!(
        "theta_speedup,{:.4}",
        medians[1] as f64 / medians[0] as f64
    ));

    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(csv) = &args.csv {
        std::fs::write(csv, &text)
            .with_context(|| format!("cannot write {}", csv.display()))?;
        println!("wrote-csv {}", csv.display());
    }
    Ok(())
}
