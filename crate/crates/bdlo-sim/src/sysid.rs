//! Gradient-based material-parameter identification. The outer problem
//! minimizes recursive rollout error over a packed log-space parameter
//! vector (per-branch mass scale, bend-stiffness eigenvalues, twist
//! stiffness, inertia scale); every inner step re-solves the quasi-static
//! twist problem with its analytic gradient. The outer gradient is taken
//! by central finite differences over the packed vector — the parameter
//! dimension is tiny, and the probes are independent rollouts evaluated
//! in parallel.
//!
//! Log-space packing keeps every unpacked quantity positive and every
//! reconstructed stiffness matrix symmetric positive definite, for any
//! real packed vector. Parameters are shared per branch: one scale or
//! value covers all vertices/edges of a branch. Rest lengths and rest
//! curvature are taken from the dataset's first frame and are not
//! identified; with mass enabled alongside the stiffnesses the problem
//! has a joint-scaling degeneracy, so the default identifies bending and
//! twist against a fixed mass.

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;

use crate::dynamics::{
    replay_gauges, BatchedStepper, BdloState, GaugeReplay, GraspSpec, StepConfig,
};
use crate::error::{SimError, SimResult};
use crate::rod::MaterialParams;
use crate::topology::BdloTopology;

/// Which parameter groups the packed vector carries, per branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSpec {
    /// Scale factor on the branch's mass (and, proportionally, inertia).
    pub mass: bool,
    /// The two bend-stiffness eigenvalues, shared across the branch.
    pub bend: bool,
    /// The twist stiffness, shared across the branch.
    pub twist: bool,
    /// Extra scale factor on the branch's inertia.
    pub inertia: bool,
}

impl Default for ParamSpec {
    /// Bending and twist only: identifying mass alongside them is
    /// degenerate (scaling mass, B, and β together leaves the dynamics
    /// unchanged), so mass stays fixed unless explicitly enabled.
    fn default() -> Self {
        ParamSpec {
            mass: false,
            bend: true,
            twist: true,
            inertia: false,
        }
    }
}

impl ParamSpec {
    pub fn group_count(&self) -> usize {
        [self.mass, self.bend, self.twist, self.inertia]
            .iter()
            .filter(|&&g| g)
            .count()
    }

    /// Packed scalars per branch (bend contributes two eigenvalues).
    pub fn dims_per_branch(&self) -> usize {
        self.group_count() + usize::from(self.bend)
    }
}

/// Log-space packed parameter vector. Per branch, in order, the enabled
/// entries of `[log mass-scale, log b1, log b2, log β, log
/// inertia-scale]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    spec: ParamSpec,
    branch_count: usize,
    packed: Vec<f64>,
}

impl ParamVector {
    /// The identity vector for a base parameter set: unit scales, and
    /// the base's per-branch mean bend eigenvalues and twist stiffness.
    pub fn from_params(base: &MaterialParams, spec: ParamSpec) -> Self {
        Self::measure(base, base, spec)
    }

    /// Pack `current` relative to `base`: scale groups as the ratio of
    /// mean mass (or inertia) traces, value groups as the per-branch
    /// means of the bend-stiffness diagonal and twist stiffness.
    pub fn measure(current: &MaterialParams, base: &MaterialParams, spec: ParamSpec) -> Self {
        let mut packed = Vec::with_capacity(current.branches.len() * spec.dims_per_branch());
        for (cur, bas) in current.branches.iter().zip(&base.branches) {
            let trace_mean = |mats: &[nalgebra::Matrix3<f64>]| {
                mats.iter().map(|m| m.trace()).sum::<f64>() / mats.len() as f64
            };
            let mass_scale = trace_mean(&cur.mass) / trace_mean(&bas.mass);
            if spec.mass {
                packed.push(mass_scale.ln());
            }
            if spec.bend {
                let n = cur.bend_stiffness.len() as f64;
                let b1 = cur.bend_stiffness.iter().map(|b| b[(0, 0)]).sum::<f64>() / n;
                let b2 = cur.bend_stiffness.iter().map(|b| b[(1, 1)]).sum::<f64>() / n;
                packed.push(b1.ln());
                packed.push(b2.ln());
            }
            if spec.twist {
                let n = cur.twist_stiffness.len() as f64;
                packed.push((cur.twist_stiffness.iter().sum::<f64>() / n).ln());
            }
            if spec.inertia {
                // Inertia scale beyond what the mass scale already implies.
                let ratio = trace_mean(&cur.inertia) / trace_mean(&bas.inertia);
                packed.push((ratio / mass_scale).ln());
            }
        }
        ParamVector {
            spec,
            branch_count: current.branches.len(),
            packed,
        }
    }

    pub fn spec(&self) -> ParamSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.packed.len()
    }

    pub fn packed(&self) -> &[f64] {
        &self.packed
    }

    pub fn set_packed(&mut self, packed: Vec<f64>) -> SimResult<()> {
        if packed.len() != self.packed.len() {
            return Err(SimError::Shape(format!(
                "{} packed entries for a {}-dimensional parameter vector",
                packed.len(),
                self.packed.len()
            )));
        }
        if !packed.iter().all(|p| p.is_finite()) {
            return Err(SimError::Params("packed parameters must be finite".into()));
        }
        self.packed = packed;
        Ok(())
    }

    /// Materialize onto a base parameter set: scales multiply the base
    /// branch-wide, values replace every edge's entry. The result is
    /// positive/SPD for any real packed vector.
    pub fn apply(&self, base: &MaterialParams) -> SimResult<MaterialParams> {
        if base.branches.len() != self.branch_count {
            return Err(SimError::Shape(format!(
                "parameter vector packs {} branches, base has {}",
                self.branch_count,
                base.branches.len()
            )));
        }
        let mut out = base.clone();
        let mut k = 0;
        for mat in &mut out.branches {
            if self.spec.mass {
                let s = self.packed[k].exp();
                k += 1;
                for m in &mut mat.mass {
                    *m *= s;
                }
                for i in &mut mat.inertia {
                    *i *= s;
                }
            }
            if self.spec.bend {
                let b1 = self.packed[k].exp();
                let b2 = self.packed[k + 1].exp();
                k += 2;
                for b in &mut mat.bend_stiffness {
                    *b = Matrix2::new(b1, 0.0, 0.0, b2);
                }
            }
            if self.spec.twist {
                let beta = self.packed[k].exp();
                k += 1;
                for b in &mut mat.twist_stiffness {
                    *b = beta;
                }
            }
            if self.spec.inertia {
                let s = self.packed[k].exp();
                k += 1;
                for i in &mut mat.inertia {
                    *i *= s;
                }
            }
        }
        Ok(out)
    }
}

/// One contiguous stretch of ground truth: `frames` holds H+1 recorded
/// position frames, `inputs` the H grasp-target rows that advanced them,
/// and `prev` the frame preceding `frames[0]` when one exists (it seeds
/// the initial velocity by backward differences; without it the window
/// starts at rest). `start` optionally carries the gauge state (reference
/// seeds and orientation history) a rollout of the full trajectory would
/// hold at `frames[0]`; without it the window starts from the default
/// gauge.
#[derive(Debug, Clone, Copy)]
pub struct FitWindow<'a> {
    pub prev: Option<&'a [Vec<Vector3<f64>>]>,
    pub frames: &'a [Vec<Vec<Vector3<f64>>>],
    pub inputs: &'a [Vec<Vector3<f64>>],
    pub start: Option<&'a GaugeReplay>,
}

/// Root-mean-square per-vertex position error of the recursive rollout
/// from the window's first frame against its remaining frames.
pub fn rollout_loss(
    params: &MaterialParams,
    topo: &BdloTopology,
    grasp: &GraspSpec,
    window: &FitWindow,
    cfg: &StepConfig,
) -> SimResult<f64> {
    if window.frames.len() < 2 {
        return Err(SimError::Params(format!(
            "fit window needs at least 2 frames, got {}",
            window.frames.len()
        )));
    }
    if window.inputs.len() != window.frames.len() - 1 {
        return Err(SimError::Shape(format!(
            "{} input rows for {} window frames",
            window.inputs.len(),
            window.frames.len()
        )));
    }
    let mut state = BdloState::at_rest(topo, &window.frames[0])?;
    if let Some(prev) = window.prev {
        for b in 0..topo.branch_count() {
            for i in 0..state.v[b].len() {
                state.v[b][i] = (window.frames[0][b][i] - prev[b][i]) / cfg.dt;
            }
        }
    }
    if let Some(gauge) = window.start {
        gauge.apply_to(&mut state);
    }
    let mut stepper = BatchedStepper::new(topo);
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for t in 0..window.inputs.len() {
        stepper
            .step(
                &mut state,
                grasp,
                &window.inputs[t],
                topo,
                params,
                cfg,
                None,
            )
            .map_err(|e| annotate_step(e, t))?;
        let gt = &window.frames[t + 1];
        for b in 0..topo.branch_count() {
            for i in 0..gt[b].len() {
                sq_sum += (state.x[b][i] - gt[b][i]).norm_squared();
                count += 1;
            }
        }
    }
    Ok((sq_sum / count as f64).sqrt())
}

/// Attach the failing step index to a rollout error, keeping the
/// non-convergence variant intact for callers that branch on it.
fn annotate_step(e: SimError, t: usize) -> SimError {
    match e {
        SimError::NonConvergence {
            context,
            residual,
            iterations,
        } => SimError::NonConvergence {
            context: format!("rollout step {t}: {context}"),
            residual,
            iterations,
        },
        other => SimError::Numeric(format!("rollout failed at step {t}: {other}")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyOptions {
    /// Window length in steps; ground truth is split into consecutive
    /// windows of this horizon.
    pub horizon: usize,
    /// Central finite-difference step in log-parameter space.
    pub fd_step: f64,
    /// Relative loss improvement below which an iteration counts as
    /// stalled.
    pub tolerance: f64,
    /// Consecutive stalled iterations before giving up.
    pub patience: usize,
    pub max_iterations: usize,
    /// Initial line-search step along the negative gradient.
    pub initial_step: f64,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        IdentifyOptions {
            horizon: 100,
            fd_step: 1e-3,
            tolerance: 1e-6,
            patience: 10,
            max_iterations: 60,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Rollout RMSE (m) at the initial parameters.
    pub initial_loss: f64,
    /// Rollout RMSE (m) at the returned parameters.
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best loss seen after each iteration; non-increasing.
    pub loss_trajectory: Vec<f64>,
    /// Packed parameters at each accepted iterate.
    pub parameter_trajectory: Vec<Vec<f64>>,
    /// Per-dimension relative change of the natural-space parameters,
    /// `|exp(Δlog) − 1|`.
    pub relative_change: Vec<f64>,
}

/// Split a trajectory into consecutive fit windows of `horizon` steps,
/// each opening with the gauge the full-trajectory rollout holds at its
/// first frame when `gauges` are supplied.
fn split_windows<'a>(
    frames: &'a [Vec<Vec<Vector3<f64>>>],
    inputs: &'a [Vec<Vector3<f64>>],
    gauges: Option<&'a [GaugeReplay]>,
    horizon: usize,
) -> Vec<FitWindow<'a>> {
    let mut windows = Vec::new();
    let total = inputs.len();
    let mut start = 0;
    while start < total {
        let end = (start + horizon).min(total);
        windows.push(FitWindow {
            prev: if start > 0 {
                Some(&frames[start - 1])
            } else {
                None
            },
            frames: &frames[start..=end],
            inputs: &inputs[start..end],
            start: gauges.map(|g| &g[start]),
        });
        start = end;
    }
    windows
}

/// Mean rollout RMSE over the windows; a simulator failure in any window
/// surfaces unless `lenient`, in which case it reads as infinite loss
/// (used to reject line-search candidates).
fn mean_loss(
    pv: &ParamVector,
    base: &MaterialParams,
    topo: &BdloTopology,
    grasp: &GraspSpec,
    windows: &[FitWindow],
    cfg: &StepConfig,
    lenient: bool,
) -> SimResult<f64> {
    let params = pv.apply(base)?;
    let mut sum = 0.0;
    for w in windows {
        match rollout_loss(&params, topo, grasp, w, cfg) {
            Ok(l) => sum += l,
            Err(_) if lenient => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        }
    }
    Ok(sum / windows.len() as f64)
}

/// Identify material parameters by descending the windowed rollout RMSE.
/// The gradient is taken by central finite differences over the packed
/// log-space vector (probes run in parallel; accumulation order is
/// fixed), followed by a backtracking line search. Returns the best-seen
/// parameters; `converged` reports whether the loop exited through the
/// gradient/improvement tolerances rather than the patience or iteration
/// budget.
#[allow(clippy::too_many_arguments)]
pub fn identify(
    init: &ParamVector,
    base: &MaterialParams,
    topo: &BdloTopology,
    grasp: &GraspSpec,
    frames: &[Vec<Vec<Vector3<f64>>>],
    inputs: &[Vec<Vector3<f64>>],
    cfg: &StepConfig,
    opts: &IdentifyOptions,
) -> SimResult<(ParamVector, FitReport)> {
    if frames.len() < 2 || inputs.len() != frames.len() - 1 {
        return Err(SimError::Shape(format!(
            "{} frames with {} input rows; expected one input per transition",
            frames.len(),
            inputs.len()
        )));
    }
    if opts.horizon == 0 || opts.fd_step <= 0.0 || opts.initial_step <= 0.0 {
        return Err(SimError::Params(
            "identification options must be positive".into(),
        ));
    }
    // Later windows open mid-motion; replay the gauge bookkeeping from
    // the recorded frames so each window starts from the state a rollout
    // of the whole trajectory would carry, not a freshly defaulted one.
    let gauges = replay_gauges(topo, frames)?;
    let windows = split_windows(frames, inputs, Some(&gauges), opts.horizon);

    let mut best = init.clone();
    let mut best_loss = mean_loss(&best, base, topo, grasp, &windows, cfg, false)?;
    let initial_loss = best_loss;
    let mut report = FitReport {
        initial_loss,
        final_loss: best_loss,
        iterations: 0,
        converged: false,
        loss_trajectory: vec![best_loss],
        parameter_trajectory: vec![best.packed().to_vec()],
        relative_change: vec![0.0; init.dim()],
    };

    let mut step = opts.initial_step;
    let mut stalled = 0usize;
    // Numerically-zero loss: nothing left to identify.
    const LOSS_FLOOR: f64 = 1e-12;
    const GRAD_FLOOR: f64 = 1e-9;

    for _ in 0..opts.max_iterations {
        if best_loss <= LOSS_FLOOR {
            report.converged = true;
            break;
        }
        let h = opts.fd_step;
        let grad: Vec<f64> = (0..best.dim())
            .into_par_iter()
            .map(|i| -> SimResult<f64> {
                let mut plus = best.clone();
                let mut p = plus.packed().to_vec();
                p[i] += h;
                plus.set_packed(p)?;
                let mut minus = best.clone();
                let mut m = minus.packed().to_vec();
                m[i] -= h;
                minus.set_packed(m)?;
                let lp = mean_loss(&plus, base, topo, grasp, &windows, cfg, false)?;
                let lm = mean_loss(&minus, base, topo, grasp, &windows, cfg, false)?;
                Ok((lp - lm) / (2.0 * h))
            })
            .collect::<SimResult<Vec<f64>>>()?;
        report.iterations += 1;

        let grad_norm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if grad_norm < GRAD_FLOOR {
            report.converged = true;
            break;
        }

        // Backtracking line search along the negative gradient.
        let mut accepted = false;
        let mut t = step;
        for _ in 0..20 {
            let mut cand = best.clone();
            let packed: Vec<f64> = cand
                .packed()
                .iter()
                .zip(&grad)
                .map(|(p, g)| p - t * g)
                .collect();
            cand.set_packed(packed)?;
            let loss = mean_loss(&cand, base, topo, grasp, &windows, cfg, true)?;
            if loss < best_loss {
                let improvement = (best_loss - loss) / best_loss;
                best = cand;
                best_loss = loss;
                step = (t * 1.5).min(opts.initial_step * 16.0);
                accepted = true;
                report.parameter_trajectory.push(best.packed().to_vec());
                if improvement < opts.tolerance {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                break;
            }
            t *= 0.5;
        }
        report.loss_trajectory.push(best_loss);
        if !accepted {
            stalled += 1;
            step *= 0.5;
        }
        if stalled >= opts.patience {
            break;
        }
    }

    report.final_loss = best_loss;
    report.relative_change = best
        .packed()
        .iter()
        .zip(init.packed())
        .map(|(f, i)| ((f - i).exp() - 1.0).abs())
        .collect();
    Ok((best, report))
}
