//! Bending and twisting energies of one branch.

use nalgebra::{Vector2, Vector3};

use crate::error::{SimError, SimResult};
use crate::rod::{BranchMaterial, FrameSet};
use crate::tolerances::MIN_EDGE_LENGTH;

/// Curvature binormal at the vertex between two consecutive edges:
/// `2 (e_prev x e_next) / (|e_prev||e_next| + e_prev . e_next)`.
pub fn curvature_binormal(
    e_prev: &Vector3<f64>,
    e_next: &Vector3<f64>,
) -> SimResult<Vector3<f64>> {
    let scale = e_prev.norm() * e_next.norm();
    if scale < MIN_EDGE_LENGTH * MIN_EDGE_LENGTH {
        return Err(SimError::Geometry(
            "curvature binormal of a zero-length edge is undefined".into(),
        ));
    }
    let denom = scale + e_prev.dot(e_next);
    if !denom.is_finite() || denom <= 1e-12 * scale {
        return Err(SimError::Geometry(
            "curvature binormal is undefined for antiparallel edges".into(),
        ));
    }
    Ok(e_prev.cross(e_next) * (2.0 / denom))
}

/// Components of the curvature binormal in a material frame.
pub fn material_curvature(
    kb: &Vector3<f64>,
    m1: &Vector3<f64>,
    m2: &Vector3<f64>,
) -> Vector2<f64> {
    Vector2::new(kb.dot(m1), kb.dot(m2))
}

/// Quarter-turn matrix applied to a 2-vector: `J v = (v_y, -v_x)`.
#[inline]
pub(crate) fn j_rot(v: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(v.y, -v.x)
}

fn check_branch_shape(
    x: &[Vector3<f64>],
    frames: &FrameSet,
    mat: &BranchMaterial,
) -> SimResult<()> {
    if x.len() != mat.vertex_count() || frames.edge_count() != mat.edge_count() {
        return Err(SimError::Shape(format!(
            "{} vertices / {} framed edges against material with {} vertices",
            x.len(),
            frames.edge_count(),
            mat.vertex_count()
        )));
    }
    Ok(())
}

/// Bending energy: for every interior vertex `i` and each adjacent edge `j`,
/// `1/2 (w(i,j) - rest(i,j))^T B_j (w(i,j) - rest(i,j))` with `w(i,j)` the
/// material curvature of the binormal at `i` in the frame of edge `j`.
pub fn bend_energy(
    x: &[Vector3<f64>],
    frames: &FrameSet,
    mat: &BranchMaterial,
) -> SimResult<f64> {
    check_branch_shape(x, frames, mat)?;
    let mut energy = 0.0;
    for i in 1..x.len() - 1 {
        let kb = curvature_binormal(&(x[i] - x[i - 1]), &(x[i + 1] - x[i]))?;
        for which in 0..2 {
            let j = i - 1 + which;
            let omega = material_curvature(&kb, &frames.m1[j], &frames.m2[j]);
            let d = omega - mat.rest_curvature_at(i, which);
            energy += 0.5 * d.dot(&(mat.bend_stiffness[j] * d));
        }
    }
    Ok(energy)
}

/// Twisting energy: `sum_i 1/2 beta_i (theta_i - theta_{i-1})^2` over edges
/// `i >= 1`. The angle of edge 0 is a boundary value, so every difference is
/// well defined.
pub fn twist_energy(theta: &[f64], mat: &BranchMaterial) -> SimResult<f64> {
    if theta.len() != mat.edge_count() {
        return Err(SimError::Shape(format!(
            "{} twist angles for {} edges",
            theta.len(),
            mat.edge_count()
        )));
    }
    let mut energy = 0.0;
    for i in 1..theta.len() {
        let d = theta[i] - theta[i - 1];
        energy += 0.5 * mat.twist_stiffness[i] * d * d;
    }
    Ok(energy)
}

/// Bending plus twisting energy at the given configuration and twist angles.
pub fn total_energy(
    x: &[Vector3<f64>],
    b1_seed: &Vector3<f64>,
    theta: &[f64],
    mat: &BranchMaterial,
) -> SimResult<f64> {
    let frames = crate::rod::framed_with_twist(x, b1_seed, theta)?;
    Ok(bend_energy(x, &frames, mat)? + twist_energy(theta, mat)?)
}

/// Curvature binormals resolved in the twist-free reference frames, from
/// which material curvature at any twist angle follows by a planar rotation.
/// Shared by the twist solve so that repeated energy/gradient evaluations
/// avoid re-transporting frames.
#[derive(Debug, Clone, Default)]
pub(crate) struct BendSetup {
    /// `a[i - 1][w]` holds the binormal at interior vertex `i` resolved in
    /// the reference pair of edge `i - 1 + w`.
    a: Vec<[Vector2<f64>; 2]>,
}

impl BendSetup {
    pub fn compute(
        &mut self,
        x: &[Vector3<f64>],
        frames: &FrameSet,
    ) -> SimResult<()> {
        self.a.clear();
        self.a.reserve(x.len().saturating_sub(2));
        for i in 1..x.len() - 1 {
            let kb = curvature_binormal(&(x[i] - x[i - 1]), &(x[i + 1] - x[i]))?;
            self.a.push([
                material_curvature(&kb, &frames.b1[i - 1], &frames.b2[i - 1]),
                material_curvature(&kb, &frames.b1[i], &frames.b2[i]),
            ]);
        }
        Ok(())
    }

    /// Material curvature at interior vertex `i` in the frame of edge
    /// `i - 1 + which`, at twist angle `theta_j` of that edge.
    #[inline]
    pub fn omega(&self, i: usize, which: usize, theta_j: f64) -> Vector2<f64> {
        let a = self.a[i - 1][which];
        let (s, c) = theta_j.sin_cos();
        Vector2::new(a.x * c + a.y * s, -a.x * s + a.y * c)
    }

    pub fn bend_energy(&self, theta: &[f64], mat: &BranchMaterial) -> f64 {
        let mut energy = 0.0;
        for i in 1..=self.a.len() {
            for which in 0..2 {
                let j = i - 1 + which;
                let d = self.omega(i, which, theta[j]) - mat.rest_curvature_at(i, which);
                energy += 0.5 * d.dot(&(mat.bend_stiffness[j] * d));
            }
        }
        energy
    }

    pub fn total_energy(&self, theta: &[f64], mat: &BranchMaterial) -> f64 {
        let mut energy = self.bend_energy(theta, mat);
        for i in 1..theta.len() {
            let d = theta[i] - theta[i - 1];
            energy += 0.5 * mat.twist_stiffness[i] * d * d;
        }
        energy
    }

    /// Bending contribution to `dP/d theta_j`:
    /// `sum_k (w(k,j) - rest(k,j))^T B_j J w(k,j)` over the at most two
    /// interior vertices `k` adjacent to edge `j`.
    pub fn bend_theta_gradient(&self, j: usize, theta_j: f64, mat: &BranchMaterial) -> f64 {
        let n_interior = self.a.len();
        let mut g = 0.0;
        // Pair (k = j, which = 1) requires 1 <= j <= n_interior.
        if j >= 1 && j <= n_interior {
            let omega = self.omega(j, 1, theta_j);
            let d = omega - mat.rest_curvature_at(j, 1);
            g += (mat.bend_stiffness[j] * d).dot(&j_rot(&omega));
        }
        // Pair (k = j + 1, which = 0) requires j + 1 <= n_interior.
        if j + 1 <= n_interior {
            let omega = self.omega(j + 1, 0, theta_j);
            let d = omega - mat.rest_curvature_at(j + 1, 0);
            g += (mat.bend_stiffness[j] * d).dot(&j_rot(&omega));
        }
        g
    }

    /// Second derivative of the bending energy with respect to `theta_j`
    /// (the bending Hessian is diagonal in the twist angles).
    pub fn bend_theta_curvature(&self, j: usize, theta_j: f64, mat: &BranchMaterial) -> f64 {
        let n_interior = self.a.len();
        let mut h = 0.0;
        let mut add = |i: usize, which: usize| {
            let omega = self.omega(i, which, theta_j);
            let jw = j_rot(&omega);
            let d = omega - mat.rest_curvature_at(i, which);
            h += jw.dot(&(mat.bend_stiffness[j] * jw)) - d.dot(&(mat.bend_stiffness[j] * omega));
        };
        if j >= 1 && j <= n_interior {
            add(j, 1);
        }
        if j + 1 <= n_interior {
            add(j + 1, 0);
        }
        h
    }
}
