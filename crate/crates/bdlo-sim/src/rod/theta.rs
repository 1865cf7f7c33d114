//! Per-edge twist angles: analytic energy gradient and the quasi-static
//! solve that drives the gradient to zero at fixed vertex positions.

use nalgebra::Vector3;

use crate::error::{SimError, SimResult};
use crate::rod::{bishop_frames, BendSetup, BranchMaterial, FrameSet};
use crate::tolerances::{THETA_FD_STEP, THETA_MAX_ITERATIONS, THETA_TOLERANCE};

/// How the twist solve obtains its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThetaGradientMode {
    /// Closed-form gradient.
    #[default]
    Analytic,
    /// Central finite differences of the energy; retained as a slower
    /// reference path.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaOptions {
    /// Convergence threshold on the infinity norm of the free-edge gradient.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub gradient_mode: ThetaGradientMode,
}

impl Default for ThetaOptions {
    fn default() -> Self {
        ThetaOptions {
            tolerance: THETA_TOLERANCE,
            max_iterations: THETA_MAX_ITERATIONS,
            gradient_mode: ThetaGradientMode::Analytic,
        }
    }
}

/// A twist angle held fixed during the solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaClamp {
    pub edge: usize,
    pub angle: f64,
}

/// Result of the quasi-static twist solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSolve {
    pub theta: Vec<f64>,
    pub energy: f64,
    /// Infinity norm of the free-edge gradient at the returned angles.
    pub gradient_norm: f64,
    /// Accepted descent steps.
    pub iterations: usize,
}

/// Gradient of the total (bending plus twisting) energy with respect to
/// every twist angle. Only the reference pair of `frames` is read; material
/// curvature at `theta` is formed by planar rotation, so the result is
/// consistent with `theta` by construction.
pub fn theta_gradient(
    x: &[Vector3<f64>],
    frames: &FrameSet,
    theta: &[f64],
    mat: &BranchMaterial,
) -> SimResult<Vec<f64>> {
    if x.len() != mat.vertex_count() || theta.len() != mat.edge_count() {
        return Err(SimError::Shape(format!(
            "{} vertices / {} angles against material with {} vertices",
            x.len(),
            theta.len(),
            mat.vertex_count()
        )));
    }
    let mut setup = BendSetup::default();
    setup.compute(x, frames)?;
    let mut g = vec![0.0; theta.len()];
    gradient_into(&setup, theta, mat, &mut g);
    Ok(g)
}

fn gradient_into(setup: &BendSetup, theta: &[f64], mat: &BranchMaterial, out: &mut [f64]) {
    let edges = theta.len();
    for j in 0..edges {
        let mut g = setup.bend_theta_gradient(j, theta[j], mat);
        if j >= 1 {
            g += mat.twist_stiffness[j] * (theta[j] - theta[j - 1]);
        }
        if j + 1 < edges {
            g -= mat.twist_stiffness[j + 1] * (theta[j + 1] - theta[j]);
        }
        out[j] = g;
    }
}

/// Minimizes the total energy over the non-clamped twist angles by damped
/// Newton steps on the tridiagonal Hessian, falling back to steepest descent
/// whenever the Hessian is not positive definite. Edge 0 is always clamped
/// (to 0 unless a clamp provides a value); every accepted step strictly
/// decreases the energy.
pub fn optimize_theta(
    x: &[Vector3<f64>],
    b1_seed: &Vector3<f64>,
    theta_init: &[f64],
    clamps: &[ThetaClamp],
    mat: &BranchMaterial,
    options: &ThetaOptions,
) -> SimResult<ThetaSolve> {
    let frames = bishop_frames(x, b1_seed)?;
    let mut setup = BendSetup::default();
    setup.compute(x, &frames)?;
    solve_with_setup(&setup, theta_init, clamps, mat, options)
}

pub(crate) fn solve_with_setup(
    setup: &BendSetup,
    theta_init: &[f64],
    clamps: &[ThetaClamp],
    mat: &BranchMaterial,
    options: &ThetaOptions,
) -> SimResult<ThetaSolve> {
    let edges = mat.edge_count();
    if theta_init.len() != edges {
        return Err(SimError::Shape(format!(
            "{} initial angles for {} edges",
            theta_init.len(),
            edges
        )));
    }
    if !(options.tolerance > 0.0) {
        return Err(SimError::Params(format!(
            "twist solve tolerance must be positive, got {}",
            options.tolerance
        )));
    }
    let mut clamped = vec![false; edges];
    let mut theta = theta_init.to_vec();
    // Edge 0 is the twist datum: clamped to zero unless a clamp overrides.
    clamped[0] = true;
    theta[0] = 0.0;
    for c in clamps {
        if c.edge >= edges {
            return Err(SimError::Shape(format!(
                "clamp on edge {} of a {edges}-edge branch",
                c.edge
            )));
        }
        if clamped[c.edge] && c.edge != 0 {
            return Err(SimError::Params(format!("edge {} clamped twice", c.edge)));
        }
        clamped[c.edge] = true;
        theta[c.edge] = c.angle;
    }
    let free: Vec<usize> = (0..edges).filter(|&j| !clamped[j]).collect();

    let mut energy = setup.total_energy(&theta, mat);
    if free.is_empty() {
        return Ok(ThetaSolve {
            theta,
            energy,
            gradient_norm: 0.0,
            iterations: 0,
        });
    }

    let mut grad = vec![0.0; free.len()];
    let mut trial = theta.clone();
    let mut iterations = 0;
    loop {
        match options.gradient_mode {
            ThetaGradientMode::Analytic => {
                for (f, &j) in free.iter().enumerate() {
                    let mut g = setup.bend_theta_gradient(j, theta[j], mat);
                    if j >= 1 {
                        g += mat.twist_stiffness[j] * (theta[j] - theta[j - 1]);
                    }
                    if j + 1 < edges {
                        g -= mat.twist_stiffness[j + 1] * (theta[j + 1] - theta[j]);
                    }
                    grad[f] = g;
                }
            }
            ThetaGradientMode::FiniteDifference => {
                for (f, &j) in free.iter().enumerate() {
                    let saved = trial[j];
                    trial[j] = saved + THETA_FD_STEP;
                    let hi = setup.total_energy(&trial, mat);
                    trial[j] = saved - THETA_FD_STEP;
                    let lo = setup.total_energy(&trial, mat);
                    trial[j] = saved;
                    grad[f] = (hi - lo) / (2.0 * THETA_FD_STEP);
                }
            }
        }
        let gradient_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gradient_norm <= options.tolerance {
            return Ok(ThetaSolve {
                theta,
                energy,
                gradient_norm,
                iterations,
            });
        }
        if iterations >= options.max_iterations {
            return Err(SimError::NonConvergence {
                context: "quasi-static twist solve".into(),
                residual: gradient_norm,
                iterations,
            });
        }

        // Tridiagonal Hessian over the free edges: bending is diagonal in
        // the angles, twisting couples consecutive edges.
        let k = free.len();
        let mut diag = vec![0.0; k];
        let mut off = vec![0.0; k.saturating_sub(1)];
        for (f, &j) in free.iter().enumerate() {
            let mut h = setup.bend_theta_curvature(j, theta[j], mat);
            if j >= 1 {
                h += mat.twist_stiffness[j];
            }
            if j + 1 < edges {
                h += mat.twist_stiffness[j + 1];
            }
            diag[f] = h;
            if f + 1 < k && free[f + 1] == j + 1 {
                off[f] = -mat.twist_stiffness[j + 1];
            }
        }
        // Newton direction when the Hessian is positive definite;
        // otherwise re-solve with a growing diagonal shift until the
        // system is positive definite and the step points downhill (a
        // large shift recovers scaled steepest descent, so a descent
        // direction always exists). The shift keeps the system
        // tridiagonal.
        let scale = diag.iter().fold(0.0f64, |m, d| m.max(d.abs())).max(1e-12);
        let mut lambda = 0.0;
        let mut chosen = None;
        for _ in 0..40 {
            let shifted: Vec<f64> = diag.iter().map(|d| d + lambda).collect();
            if let Some(d) = solve_tridiagonal(&shifted, &off, &grad) {
                let dot: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
                if dot < 0.0 {
                    chosen = Some((d, dot));
                    break;
                }
            }
            lambda = if lambda == 0.0 { 1e-6 * scale } else { lambda * 10.0 };
        }
        let (direction, directional): (Vec<f64>, f64) = chosen.unwrap_or_else(|| {
            let d: Vec<f64> = grad.iter().map(|g| -g).collect();
            let dot = -grad.iter().map(|g| g * g).sum::<f64>();
            (d, dot)
        });

        // Armijo backtracking; accepted steps strictly decrease the energy.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for (f, &j) in free.iter().enumerate() {
                trial[j] = theta[j] + step * direction[f];
            }
            let trial_energy = setup.total_energy(&trial, mat);
            if trial_energy <= energy + 1e-4 * step * directional {
                theta.copy_from_slice(&trial);
                energy = trial_energy;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(SimError::NonConvergence {
                context: "twist solve line search stalled".into(),
                residual: gradient_norm,
                iterations,
            });
        }
        iterations += 1;
    }
}

/// Thomas solve of `H d = -g` for symmetric tridiagonal `H`; `None` when a
/// pivot is not strictly positive, i.e. `H` is not positive definite.
fn solve_tridiagonal(diag: &[f64], off: &[f64], g: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv <= 0.0 || !piv.is_finite() {
        return None;
    }
    if n > 1 {
        c[0] = off[0] / piv;
    }
    d[0] = -g[0] / piv;
    for i in 1..n {
        piv = diag[i] - off[i - 1] * c[i - 1];
        if piv <= 0.0 || !piv.is_finite() {
            return None;
        }
        if i < n - 1 {
            c[i] = off[i] / piv;
        }
        d[i] = (-g[i] - off[i - 1] * d[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Some(d)
}
