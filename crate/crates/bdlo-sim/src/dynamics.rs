//! The per-step simulation pipeline: grasp association, quasi-static twist
//! minimization, semi-implicit Euler integration with an optional learned
//! velocity residual, constraint enforcement, and the closing velocity
//! update.
//!
//! Each step runs, in order: pinned vertices snap to their targets; twist
//! angles are re-optimized against the current geometry (warm-started from
//! the previous step); elastic forces and gravity update the velocities;
//! positions advance by the corrected velocities; edge orientation
//! accumulators absorb the rotation each edge underwent; the constraint
//! sweep projects the positions; and the output velocity is the realized
//! displacement over the time step, so constraint corrections feed back
//! into momentum.
//!
//! Two drivers expose the pipeline. [`deft_step`] processes branches
//! independently through the convenience rod operations, rebuilding frames
//! for each stage — the straightforward path. [`BatchedStepper`] holds
//! preallocated workspaces and shares one frame computation across the
//! twist solve and the force evaluation, amortizing per-branch setup across
//! steps. Both run the same arithmetic on the same values and produce
//! bitwise-identical states.

use nalgebra::Vector3;

use crate::constraints::{enforce, ConstraintReport, EnforceOptions, OrientationTracker};
use crate::error::{SimError, SimResult};
use crate::rod::{
    bishop_frames_into, default_seed, material_frames, optimize_theta, orthonormal_seed,
    parallel_transport, vertex_forces, vertex_forces_with_frames, BendSetup, BranchMaterial,
    FrameSet, MaterialParams, ThetaClamp, ThetaOptions,
};
use crate::tolerances::MIN_EDGE_LENGTH;
use crate::topology::BdloTopology;

/// One pinned vertex: a grasp holds it exactly at an externally supplied
/// target each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pin {
    pub branch: usize,
    pub vertex: usize,
}

/// A twist-angle boundary value imposed by a grasp on one edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeClamp {
    pub branch: usize,
    pub edge: usize,
    pub theta: f64,
}

/// Which vertices the grippers hold and which edge twists they dictate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraspSpec {
    pub pins: Vec<Pin>,
    pub clamps: Vec<EdgeClamp>,
}

impl GraspSpec {
    pub fn free() -> Self {
        GraspSpec::default()
    }

    pub fn validate(&self, topo: &BdloTopology) -> SimResult<()> {
        let mut seen = std::collections::HashSet::new();
        for pin in &self.pins {
            if pin.branch >= topo.branch_count()
                || pin.vertex >= topo.branch(pin.branch).vertex_count
            {
                return Err(SimError::Params(format!(
                    "pin references vertex {} of branch {}, which does not exist",
                    pin.vertex, pin.branch
                )));
            }
            if !seen.insert((pin.branch, pin.vertex)) {
                return Err(SimError::Params(format!(
                    "vertex {} of branch {} is pinned twice",
                    pin.vertex, pin.branch
                )));
            }
        }
        for clamp in &self.clamps {
            if clamp.branch >= topo.branch_count()
                || clamp.edge >= topo.branch(clamp.branch).edge_count()
            {
                return Err(SimError::Params(format!(
                    "twist clamp references edge {} of branch {}, which does not exist",
                    clamp.edge, clamp.branch
                )));
            }
            if !clamp.theta.is_finite() {
                return Err(SimError::Params("twist clamp angle must be finite".into()));
            }
        }
        Ok(())
    }

    /// Per-branch pinned-vertex mask.
    pub fn pinned_mask(&self, topo: &BdloTopology) -> Vec<Vec<bool>> {
        let mut mask: Vec<Vec<bool>> = topo
            .branches()
            .iter()
            .map(|b| vec![false; b.vertex_count])
            .collect();
        for pin in &self.pins {
            mask[pin.branch][pin.vertex] = true;
        }
        mask
    }

    /// Twist clamps for one branch in the solver's form.
    fn clamps_for(&self, branch: usize) -> Vec<ThetaClamp> {
        self.clamps
            .iter()
            .filter(|c| c.branch == branch)
            .map(|c| ThetaClamp {
                edge: c.edge,
                angle: c.theta,
            })
            .collect()
    }
}

/// Full configuration of one simulation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    /// Time step in seconds.
    pub dt: f64,
    /// External acceleration applied to every free vertex (m/s²).
    pub gravity: Vector3<f64>,
    /// Velocity retention factor per step; 1.0 keeps the integrator
    /// undamped, values below 1 bleed energy for settling experiments.
    pub damping: f64,
    /// Whether the supplied velocity corrector is consulted.
    pub use_residual: bool,
    pub constraints: EnforceOptions,
    pub theta: ThetaOptions,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            dt: 0.01,
            gravity: Vector3::new(0.0, 0.0, -9.81),
            damping: 1.0,
            use_residual: false,
            constraints: EnforceOptions::default(),
            theta: ThetaOptions::default(),
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> SimResult<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(SimError::Params(format!(
                "time step must be positive and finite, got {}",
                self.dt
            )));
        }
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return Err(SimError::Params("gravity must be finite".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SimError::Params(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.constraints.epsilon >= 0.0) {
            return Err(SimError::Params(format!(
                "orientation slack must be non-negative, got {}",
                self.constraints.epsilon
            )));
        }
        let k = &self.constraints.kappa;
        if !(k.inextensibility > 0.0 && k.attachment > 0.0 && k.orientation > 0.0) {
            return Err(SimError::Params(
                "constraint thresholds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Additive per-vertex velocity correction consulted during integration,
/// evaluated on the post-grasp positions and the pre-step velocities.
pub trait VelocityCorrector {
    fn correct(
        &self,
        x: &[Vec<Vector3<f64>>],
        v: &[Vec<Vector3<f64>>],
        topo: &BdloTopology,
        params: &MaterialParams,
    ) -> SimResult<Vec<Vec<Vector3<f64>>>>;
}

/// Simulation state of one branched object: per-branch positions,
/// velocities, twist angles, the per-branch reference-frame seed carried
/// between steps, and the per-edge orientation accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct BdloState {
    pub x: Vec<Vec<Vector3<f64>>>,
    pub v: Vec<Vec<Vector3<f64>>>,
    pub theta: Vec<Vec<f64>>,
    pub seeds: Vec<Vector3<f64>>,
    pub tracker: OrientationTracker,
}

impl BdloState {
    /// State at rest in the given shape: zero velocities, zero twist,
    /// default reference seeds, identity orientations.
    pub fn at_rest(topo: &BdloTopology, positions: &[Vec<Vector3<f64>>]) -> SimResult<Self> {
        if positions.len() != topo.branch_count() {
            return Err(SimError::Shape(format!(
                "{} position branches for a {}-branch topology",
                positions.len(),
                topo.branch_count()
            )));
        }
        let mut seeds = Vec::with_capacity(topo.branch_count());
        for (b, xb) in positions.iter().enumerate() {
            let n = topo.branch(b).vertex_count;
            if xb.len() != n {
                return Err(SimError::Shape(format!(
                    "branch '{}' has {} positions for {n} vertices",
                    topo.branch(b).id,
                    xb.len()
                )));
            }
            let first = xb[1] - xb[0];
            let len = first.norm();
            if len < MIN_EDGE_LENGTH {
                return Err(SimError::Geometry(format!(
                    "branch '{}' starts with a zero-length edge",
                    topo.branch(b).id
                )));
            }
            seeds.push(default_seed(&(first / len)));
        }
        Ok(BdloState {
            v: positions
                .iter()
                .map(|xb| vec![Vector3::zeros(); xb.len()])
                .collect(),
            theta: topo
                .branches()
                .iter()
                .map(|b| vec![0.0; b.edge_count()])
                .collect(),
            x: positions.to_vec(),
            seeds,
            tracker: OrientationTracker::identity(topo),
        })
    }

    pub fn validate(&self, topo: &BdloTopology) -> SimResult<()> {
        let nb = topo.branch_count();
        if self.x.len() != nb
            || self.v.len() != nb
            || self.theta.len() != nb
            || self.seeds.len() != nb
            || self.tracker.branch_count() != nb
        {
            return Err(SimError::Shape(format!(
                "state arrays cover {}/{}/{}/{} branches for a {nb}-branch topology",
                self.x.len(),
                self.v.len(),
                self.theta.len(),
                self.seeds.len()
            )));
        }
        for b in 0..nb {
            let n = topo.branch(b).vertex_count;
            if self.x[b].len() != n
                || self.v[b].len() != n
                || self.theta[b].len() != n - 1
                || self.tracker.edge_count(b) != n - 1
            {
                return Err(SimError::Shape(format!(
                    "branch '{}' state sizes do not match its {n} vertices",
                    topo.branch(b).id
                )));
            }
        }
        Ok(())
    }
}

/// Diagnostics from one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub constraints: ConstraintReport,
    /// Worst twist-solve iteration count across branches.
    pub theta_iterations: usize,
    /// Worst remaining twist-gradient norm across branches.
    pub theta_gradient_norm: f64,
}

/// Snap pinned vertices to their targets. `targets` is aligned with
/// `grasp.pins`.
pub fn apply_grasp(
    state: &mut BdloState,
    grasp: &GraspSpec,
    targets: &[Vector3<f64>],
) -> SimResult<()> {
    if targets.len() != grasp.pins.len() {
        return Err(SimError::Shape(format!(
            "{} grasp targets for {} pins",
            targets.len(),
            grasp.pins.len()
        )));
    }
    for (pin, target) in grasp.pins.iter().zip(targets) {
        if !target.iter().all(|c| c.is_finite()) {
            return Err(SimError::Numeric(format!(
                "non-finite grasp target for vertex {} of branch {}",
                pin.vertex, pin.branch
            )));
        }
        state.x[pin.branch][pin.vertex] = *target;
    }
    Ok(())
}

fn evaluate_residual(
    state: &BdloState,
    topo: &BdloTopology,
    params: &MaterialParams,
    cfg: &StepConfig,
    corrector: Option<&dyn VelocityCorrector>,
) -> SimResult<Option<Vec<Vec<Vector3<f64>>>>> {
    if !cfg.use_residual {
        return Ok(None);
    }
    let corrector = corrector.ok_or_else(|| {
        SimError::Params("configuration enables the residual but no corrector was supplied".into())
    })?;
    Ok(Some(corrector.correct(&state.x, &state.v, topo, params)?))
}

/// Semi-implicit Euler on one branch's free vertices: velocities absorb the
/// mass-weighted elastic force and gravity, positions advance by the
/// (residual-corrected) velocities.
fn integrate_branch(
    x: &mut [Vector3<f64>],
    v: &mut [Vector3<f64>],
    force: &[Vector3<f64>],
    residual: Option<&[Vector3<f64>]>,
    mat: &BranchMaterial,
    pinned: &[bool],
    cfg: &StepConfig,
) -> SimResult<()> {
    for i in 0..x.len() {
        if pinned[i] {
            continue;
        }
        let minv = mat.mass[i].try_inverse().ok_or_else(|| {
            SimError::Numeric(format!("singular mass matrix at vertex {i}"))
        })?;
        let vel = v[i] * cfg.damping + (minv * force[i] + cfg.gravity) * cfg.dt;
        let r = residual.map(|r| r[i]).unwrap_or_else(Vector3::zeros);
        v[i] = vel;
        x[i] += (vel + r) * cfg.dt;
    }
    Ok(())
}

/// Shared tail of the step: fold per-edge rotations into the orientation
/// accumulators, run the constraint sweep, derive the output velocities
/// from realized displacement, and carry each branch's reference seed to
/// its new first tangent.
/// Compose the rotation each edge underwent between two position sets
/// into the tracker.
fn track_edge_rotations(
    tracker: &mut OrientationTracker,
    topo: &BdloTopology,
    before_x: &[Vec<Vector3<f64>>],
    after_x: &[Vec<Vector3<f64>>],
) -> SimResult<()> {
    for b in 0..topo.branch_count() {
        for e in 0..topo.branch(b).edge_count() {
            let before = before_x[b][e + 1] - before_x[b][e];
            let after = after_x[b][e + 1] - after_x[b][e];
            let lb = before.norm();
            let la = after.norm();
            if lb < MIN_EDGE_LENGTH || la < MIN_EDGE_LENGTH {
                return Err(SimError::Geometry(format!(
                    "edge {e} of branch {b} collapsed during integration"
                )));
            }
            let delta = (before / lb).cross(&(after / la));
            if delta != Vector3::zeros() {
                tracker.apply_delta(b, e, &delta);
            }
        }
    }
    Ok(())
}

/// Carry a branch's reference seed across a step: parallel transport from
/// the old first tangent to the new one, then re-orthonormalize.
fn advance_seed(
    seed: &Vector3<f64>,
    old_first: &Vector3<f64>,
    new_first: &Vector3<f64>,
    branch: usize,
) -> SimResult<Vector3<f64>> {
    let lo = old_first.norm();
    let ln = new_first.norm();
    if lo < MIN_EDGE_LENGTH || ln < MIN_EDGE_LENGTH {
        return Err(SimError::Geometry(format!(
            "branch {branch} first edge collapsed across the step"
        )));
    }
    let transported = parallel_transport(seed, &(old_first / lo), &(new_first / ln))?;
    orthonormal_seed(&transported, &(new_first / ln))
}

fn finish_step(
    state: &mut BdloState,
    entry_x: &[Vec<Vector3<f64>>],
    pinned: &[Vec<bool>],
    topo: &BdloTopology,
    params: &MaterialParams,
    cfg: &StepConfig,
) -> SimResult<ConstraintReport> {
    // The constraint sweep reads and refines a working copy of the
    // orientation accumulators: integration rotations go in up front so
    // the junction gap measure reflects the current geometry, and each
    // applied orientation correction updates it in place so the sweep
    // contracts.
    let entry_tracker = state.tracker.clone();
    track_edge_rotations(&mut state.tracker, topo, entry_x, &state.x)?;

    let report = enforce(
        &mut state.x,
        pinned,
        topo,
        params,
        &mut state.tracker,
        &cfg.constraints,
    )?;

    // The realized displacement over the step defines the output velocity,
    // so constraint corrections carry into momentum.
    for b in 0..topo.branch_count() {
        for i in 0..state.x[b].len() {
            state.v[b][i] = (state.x[b][i] - entry_x[b][i]) / cfg.dt;
        }
    }

    // The step's committed orientation update is the net rotation each
    // edge underwent from entry to final positions — integration,
    // attachment pulls, and orientation corrections alike. This keeps the
    // accumulators a function of the realized motion alone, so they can
    // be reconstructed exactly from a recorded trajectory.
    state.tracker = entry_tracker;
    track_edge_rotations(&mut state.tracker, topo, entry_x, &state.x)?;

    for b in 0..topo.branch_count() {
        let old_first = entry_x[b][1] - entry_x[b][0];
        let new_first = state.x[b][1] - state.x[b][0];
        state.seeds[b] = advance_seed(&state.seeds[b], &old_first, &new_first, b)?;
    }
    Ok(report)
}

/// Reconstruction of the gauge bookkeeping — per-branch reference seeds
/// and per-edge orientation history — that a recursive rollout from a
/// recorded trajectory's first frame would carry.
///
/// A trajectory stores positions only, but replaying the model against it
/// (teacher-forced training, windowed parameter fitting) needs the hidden
/// frame state too. Both committed gauge updates — the seed transport and
/// the net per-edge rotation — read nothing but each step's entry and
/// exit positions, so the replayed gauge matches the rollout's bit for
/// bit.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeReplay {
    seeds: Vec<Vector3<f64>>,
    tracker: OrientationTracker,
}

impl GaugeReplay {
    /// Gauge state at a trajectory's first frame: the default seeds and
    /// identity orientations a rollout starts from.
    pub fn start(topo: &BdloTopology, first: &[Vec<Vector3<f64>>]) -> SimResult<Self> {
        let state = BdloState::at_rest(topo, first)?;
        Ok(GaugeReplay {
            seeds: state.seeds,
            tracker: state.tracker,
        })
    }

    /// Advance across one recorded step.
    pub fn advance(
        &mut self,
        topo: &BdloTopology,
        prev: &[Vec<Vector3<f64>>],
        next: &[Vec<Vector3<f64>>],
    ) -> SimResult<()> {
        track_edge_rotations(&mut self.tracker, topo, prev, next)?;
        for b in 0..topo.branch_count() {
            let old_first = prev[b][1] - prev[b][0];
            let new_first = next[b][1] - next[b][0];
            self.seeds[b] = advance_seed(&self.seeds[b], &old_first, &new_first, b)?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> &[Vector3<f64>] {
        &self.seeds
    }

    pub fn tracker(&self) -> &OrientationTracker {
        &self.tracker
    }

    /// Install the replayed gauge into a state assembled from positions.
    pub fn apply_to(&self, state: &mut BdloState) {
        state.seeds.clone_from(&self.seeds);
        state.tracker = self.tracker.clone();
    }
}

/// Replay the gauge along a whole trajectory: element `t` is the gauge at
/// frame `t` of a rollout that started at frame 0.
pub fn replay_gauges(
    topo: &BdloTopology,
    frames: &[Vec<Vec<Vector3<f64>>>],
) -> SimResult<Vec<GaugeReplay>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let mut current = GaugeReplay::start(topo, first)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(current.clone());
    for w in frames.windows(2) {
        current.advance(topo, &w[0], &w[1])?;
        out.push(current.clone());
    }
    Ok(out)
}

/// Advance the state by one step, processing each branch independently
/// through the convenience rod operations. `targets` holds the
/// pinned-vertex positions for this step, aligned with `grasp.pins`; the
/// corrector is consulted only when `cfg.use_residual` is set.
pub fn deft_step(
    state: &mut BdloState,
    grasp: &GraspSpec,
    targets: &[Vector3<f64>],
    topo: &BdloTopology,
    params: &MaterialParams,
    cfg: &StepConfig,
    corrector: Option<&dyn VelocityCorrector>,
) -> SimResult<StepReport> {
    cfg.validate()?;
    state.validate(topo)?;
    grasp.validate(topo)?;

    let entry_x = state.x.clone();
    apply_grasp(state, grasp, targets)?;
    let pinned = grasp.pinned_mask(topo);
    let residual = evaluate_residual(state, topo, params, cfg, corrector)?;

    let mut theta_iterations = 0usize;
    let mut theta_gradient_norm = 0.0f64;
    for b in 0..topo.branch_count() {
        let mat = &params.branches[b];
        let clamps = grasp.clamps_for(b);
        let solve = optimize_theta(
            &state.x[b],
            &state.seeds[b],
            &state.theta[b],
            &clamps,
            mat,
            &cfg.theta,
        )?;
        state.theta[b] = solve.theta;
        theta_iterations = theta_iterations.max(solve.iterations);
        theta_gradient_norm = theta_gradient_norm.max(solve.gradient_norm);

        let force = vertex_forces(&state.x[b], &state.seeds[b], &state.theta[b], mat)?;
        integrate_branch(
            &mut state.x[b],
            &mut state.v[b],
            &force,
            residual.as_ref().map(|r| r[b].as_slice()),
            mat,
            &pinned[b],
            cfg,
        )?;
    }

    let constraints = finish_step(state, &entry_x, &pinned, topo, params, cfg)?;
    Ok(StepReport {
        constraints,
        theta_iterations,
        theta_gradient_norm,
    })
}

/// Step driver holding preallocated per-branch workspaces: frames are
/// computed once per branch and shared between the twist solve and the
/// force evaluation, and buffers persist across steps. Runs the same
/// arithmetic as [`deft_step`] and produces bitwise-identical states.
#[derive(Debug, Default)]
pub struct BatchedStepper {
    frames: Vec<FrameSet>,
    setup: BendSetup,
    force: Vec<Vec<Vector3<f64>>>,
    entry_x: Vec<Vec<Vector3<f64>>>,
}

impl BatchedStepper {
    pub fn new(topo: &BdloTopology) -> Self {
        BatchedStepper {
            frames: topo
                .branches()
                .iter()
                .map(|b| {
                    let mut f = FrameSet::default();
                    f.resize(b.edge_count());
                    f
                })
                .collect(),
            setup: BendSetup::default(),
            force: topo
                .branches()
                .iter()
                .map(|b| vec![Vector3::zeros(); b.vertex_count])
                .collect(),
            entry_x: topo
                .branches()
                .iter()
                .map(|b| Vec::with_capacity(b.vertex_count))
                .collect(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        state: &mut BdloState,
        grasp: &GraspSpec,
        targets: &[Vector3<f64>],
        topo: &BdloTopology,
        params: &MaterialParams,
        cfg: &StepConfig,
        corrector: Option<&dyn VelocityCorrector>,
    ) -> SimResult<StepReport> {
        cfg.validate()?;
        state.validate(topo)?;
        grasp.validate(topo)?;
        if self.frames.len() != topo.branch_count() {
            return Err(SimError::Shape(format!(
                "stepper built for {} branches, topology has {}",
                self.frames.len(),
                topo.branch_count()
            )));
        }

        for (b, entry) in self.entry_x.iter_mut().enumerate() {
            entry.clear();
            entry.extend_from_slice(&state.x[b]);
        }
        apply_grasp(state, grasp, targets)?;
        let pinned = grasp.pinned_mask(topo);
        let residual = evaluate_residual(state, topo, params, cfg, corrector)?;

        let mut theta_iterations = 0usize;
        let mut theta_gradient_norm = 0.0f64;
        for b in 0..topo.branch_count() {
            let mat = &params.branches[b];
            let frames = &mut self.frames[b];
            bishop_frames_into(&state.x[b], &state.seeds[b], frames)?;
            self.setup.compute(&state.x[b], frames)?;
            let clamps = grasp.clamps_for(b);
            let solve =
                crate::rod::solve_with_setup(&self.setup, &state.theta[b], &clamps, mat, &cfg.theta)?;
            state.theta[b] = solve.theta;
            theta_iterations = theta_iterations.max(solve.iterations);
            theta_gradient_norm = theta_gradient_norm.max(solve.gradient_norm);

            material_frames(frames, &state.theta[b])?;
            vertex_forces_with_frames(&state.x[b], frames, mat, &mut self.force[b])?;
            integrate_branch(
                &mut state.x[b],
                &mut state.v[b],
                &self.force[b],
                residual.as_ref().map(|r| r[b].as_slice()),
                mat,
                &pinned[b],
                cfg,
            )?;
        }

        let constraints = finish_step(state, &self.entry_x, &pinned, topo, params, cfg)?;
        Ok(StepReport {
            constraints,
            theta_iterations,
            theta_gradient_norm,
        })
    }
}

/// Recursive rollout through a reused [`BatchedStepper`]: one step per
/// entry of `inputs`, calling `on_step` after each with the step index
/// (0-based), the new state, and its report.
#[allow(clippy::too_many_arguments)]
pub fn rollout_with(
    state: &mut BdloState,
    grasp: &GraspSpec,
    inputs: &[Vec<Vector3<f64>>],
    topo: &BdloTopology,
    params: &MaterialParams,
    cfg: &StepConfig,
    corrector: Option<&dyn VelocityCorrector>,
    mut on_step: impl FnMut(usize, &BdloState, &StepReport) -> SimResult<()>,
) -> SimResult<()> {
    let mut stepper = BatchedStepper::new(topo);
    for (t, targets) in inputs.iter().enumerate() {
        let report = stepper.step(state, grasp, targets, topo, params, cfg, corrector)?;
        on_step(t, state, &report)?;
    }
    Ok(())
}

/// Rollout collecting every intermediate state (the initial state is not
/// included; entry `t` is the state after step `t`).
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    state_0: &BdloState,
    grasp: &GraspSpec,
    inputs: &[Vec<Vector3<f64>>],
    topo: &BdloTopology,
    params: &MaterialParams,
    cfg: &StepConfig,
    corrector: Option<&dyn VelocityCorrector>,
) -> SimResult<(Vec<BdloState>, Vec<StepReport>)> {
    let mut state = state_0.clone();
    let mut states = Vec::with_capacity(inputs.len());
    let mut reports = Vec::with_capacity(inputs.len());
    rollout_with(
        &mut state,
        grasp,
        inputs,
        topo,
        params,
        cfg,
        corrector,
        |_, s, r| {
            states.push(s.clone());
            reports.push(*r);
            Ok(())
        },
    )?;
    Ok((states, reports))
}
