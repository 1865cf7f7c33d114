//! Discrete elastic-rod model of one branch: edge frames, bending and
//! twisting energies, the quasi-static twist solve, and analytic vertex
//! forces.
//!
//! A branch with `n` vertices has `n - 1` edges and `n - 2` interior
//! vertices. Edge `i` runs from vertex `i` to vertex `i + 1`; the curvature
//! binormal at interior vertex `i` couples edges `i - 1` and `i`. The twist
//! angle of edge 0 is a clamped boundary value (zero unless a grasp dictates
//! otherwise), which also fixes the overall twist gauge.

mod energy;
mod forces;
mod frames;
mod theta;

pub use energy::{bend_energy, curvature_binormal, material_curvature, total_energy, twist_energy};
pub use forces::vertex_forces;
pub use frames::{
    bishop_frames, default_seed, framed_with_twist, material_frames, orthonormal_seed,
    parallel_transport, FrameSet,
};
pub use theta::{
    optimize_theta, theta_gradient, ThetaClamp, ThetaGradientMode, ThetaOptions, ThetaSolve,
};

pub(crate) use energy::BendSetup;
pub(crate) use forces::vertex_forces_with_frames;
pub(crate) use frames::bishop_frames_into;
pub(crate) use theta::solve_with_setup;

/// Shared fixtures for tests across the crate.
#[cfg(test)]
pub(crate) mod testutil {
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Random rod with bounded turning angles so frames and curvature stay
    /// far from their singularities.
    pub(crate) fn random_rod(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
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
}

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{SimError, SimResult};
use crate::tolerances::{MIN_EDGE_LENGTH, SPD_SYMMETRY_TOL};
use crate::topology::BdloTopology;

/// Material description of one branch.
///
/// Masses are per vertex; rotational inertia, bending stiffness, and
/// twisting stiffness are per edge; rest curvatures are per interior vertex,
/// one pair per adjacent edge. Mass and inertia are full SPD matrices with
/// scalar-times-identity as the common case.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchMaterial {
    pub mass: Vec<Matrix3<f64>>,
    pub inertia: Vec<Matrix3<f64>>,
    pub bend_stiffness: Vec<Matrix2<f64>>,
    pub twist_stiffness: Vec<f64>,
    /// `rest_curvature[i - 1][w]` is the rest-state material curvature at
    /// interior vertex `i` measured in the frame of edge `i - 1 + w`.
    pub rest_curvature: Vec<[Vector2<f64>; 2]>,
    pub rest_length: Vec<f64>,
}

/// Uniform per-branch material with derived per-edge inertia.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformBranchMaterial {
    pub mass_per_vertex: f64,
    /// Diagonal entries of the bending stiffness matrix.
    pub bend_stiffness: (f64, f64),
    pub twist_stiffness: f64,
    /// Multiplier on the slender-rod inertia `m_edge * len^2 / 12` derived
    /// from mass and rest length.
    pub inertia_scale: f64,
}

impl Default for UniformBranchMaterial {
    fn default() -> Self {
        UniformBranchMaterial {
            mass_per_vertex: 0.02,
            bend_stiffness: (1e-3, 1e-3),
            twist_stiffness: 1e-3,
            inertia_scale: 1.0,
        }
    }
}

impl BranchMaterial {
    /// Uniform material over a rest shape. Rest lengths and rest curvatures
    /// are measured from `rest_x` at zero twist with the default seed.
    pub fn uniform(rest_x: &[Vector3<f64>], spec: &UniformBranchMaterial) -> SimResult<Self> {
        if spec.mass_per_vertex <= 0.0
            || spec.bend_stiffness.0 <= 0.0
            || spec.bend_stiffness.1 <= 0.0
            || spec.twist_stiffness <= 0.0
            || spec.inertia_scale <= 0.0
        {
            return Err(SimError::Params(
                "uniform material requires strictly positive mass, stiffness, and inertia scale"
                    .into(),
            ));
        }
        let n = rest_x.len();
        if n < 3 {
            return Err(SimError::Shape(format!(
                "a branch needs at least 3 vertices, got {n}"
            )));
        }
        let edges = n - 1;
        let frames = frames::bishop_frames(rest_x, &frames::default_seed(&(rest_x[1] - rest_x[0]).normalize()))?;
        let mut rest_length = Vec::with_capacity(edges);
        for i in 0..edges {
            rest_length.push((rest_x[i + 1] - rest_x[i]).norm());
        }
        let mut rest_curvature = Vec::with_capacity(n - 2);
        for i in 1..n - 1 {
            let kb = energy::curvature_binormal(&(rest_x[i] - rest_x[i - 1]), &(rest_x[i + 1] - rest_x[i]))?;
            rest_curvature.push([
                energy::material_curvature(&kb, &frames.m1[i - 1], &frames.m2[i - 1]),
                energy::material_curvature(&kb, &frames.m1[i], &frames.m2[i]),
            ]);
        }
        let mass = vec![Matrix3::identity() * spec.mass_per_vertex; n];
        let inertia = rest_length
            .iter()
            .map(|len| {
                Matrix3::identity() * (spec.inertia_scale * spec.mass_per_vertex * len * len / 12.0)
            })
            .collect();
        let bend = Matrix2::from_diagonal(&Vector2::new(
            spec.bend_stiffness.0,
            spec.bend_stiffness.1,
        ));
        Ok(BranchMaterial {
            mass,
            inertia,
            bend_stiffness: vec![bend; edges],
            twist_stiffness: vec![spec.twist_stiffness; edges],
            rest_curvature,
            rest_length,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.mass.len()
    }

    pub fn edge_count(&self) -> usize {
        self.rest_length.len()
    }

    /// Rest-state material curvature at interior vertex `i` in the frame of
    /// edge `i - 1 + which`.
    pub fn rest_curvature_at(&self, i: usize, which: usize) -> Vector2<f64> {
        self.rest_curvature[i - 1][which]
    }

    pub fn validate(&self) -> SimResult<()> {
        let n = self.vertex_count();
        let edges = self.edge_count();
        if n < 3 {
            return Err(SimError::Shape(format!("{n} vertices in branch material")));
        }
        if self.mass.len() != n
            || self.inertia.len() != edges
            || self.bend_stiffness.len() != edges
            || self.twist_stiffness.len() != edges
            || self.rest_curvature.len() != n - 2
            || self.rest_length.len() != edges
        {
            return Err(SimError::Shape(format!(
                "inconsistent material array lengths for {n} vertices: {} masses, {} inertias, \
                 {} bend, {} twist, {} rest curvatures, {} rest lengths",
                self.mass.len(),
                self.inertia.len(),
                self.bend_stiffness.len(),
                self.twist_stiffness.len(),
                self.rest_curvature.len(),
                self.rest_length.len()
            )));
        }
        for (i, m) in self.mass.iter().enumerate() {
            check_spd3(m, &format!("mass matrix of vertex {i}"))?;
        }
        for (i, m) in self.inertia.iter().enumerate() {
            check_spd3(m, &format!("inertia matrix of edge {i}"))?;
        }
        for (i, b) in self.bend_stiffness.iter().enumerate() {
            check_spd2(b, &format!("bending stiffness of edge {i}"))?;
        }
        for (i, &beta) in self.twist_stiffness.iter().enumerate() {
            if !(beta > 0.0) || !beta.is_finite() {
                return Err(SimError::Params(format!(
                    "twisting stiffness of edge {i} must be positive and finite, got {beta}"
                )));
            }
        }
        for (i, &len) in self.rest_length.iter().enumerate() {
            if !(len > MIN_EDGE_LENGTH) || !len.is_finite() {
                return Err(SimError::Params(format!(
                    "rest length of edge {i} must be positive, got {len}"
                )));
            }
        }
        Ok(())
    }
}

/// Material description of a whole object, one entry per branch in topology
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialParams {
    pub branches: Vec<BranchMaterial>,
}

impl MaterialParams {
    /// Uniform materials measured from a rest shape. `specs` holds either a
    /// single entry applied to every branch or one entry per branch.
    pub fn uniform(
        topo: &BdloTopology,
        rest_positions: &[Vec<Vector3<f64>>],
        specs: &[UniformBranchMaterial],
    ) -> SimResult<Self> {
        if rest_positions.len() != topo.branch_count() {
            return Err(SimError::Shape(format!(
                "{} rest branches for {} topology branches",
                rest_positions.len(),
                topo.branch_count()
            )));
        }
        if specs.len() != 1 && specs.len() != topo.branch_count() {
            return Err(SimError::Shape(format!(
                "{} material specs for {} branches (need 1 or one per branch)",
                specs.len(),
                topo.branch_count()
            )));
        }
        let mut branches = Vec::with_capacity(topo.branch_count());
        for (b, rest) in rest_positions.iter().enumerate() {
            if rest.len() != topo.branch(b).vertex_count {
                return Err(SimError::Shape(format!(
                    "branch '{}' rest shape has {} vertices, topology says {}",
                    topo.branch(b).id,
                    rest.len(),
                    topo.branch(b).vertex_count
                )));
            }
            let spec = if specs.len() == 1 { &specs[0] } else { &specs[b] };
            branches.push(BranchMaterial::uniform(rest, spec)?);
        }
        Ok(MaterialParams { branches })
    }

    pub fn validate(&self, topo: &BdloTopology) -> SimResult<()> {
        if self.branches.len() != topo.branch_count() {
            return Err(SimError::Shape(format!(
                "{} material branches for {} topology branches",
                self.branches.len(),
                topo.branch_count()
            )));
        }
        for (b, mat) in self.branches.iter().enumerate() {
            mat.validate()?;
            if mat.vertex_count() != topo.branch(b).vertex_count {
                return Err(SimError::Shape(format!(
                    "branch '{}' material has {} vertices, topology says {}",
                    topo.branch(b).id,
                    mat.vertex_count(),
                    topo.branch(b).vertex_count
                )));
            }
        }
        Ok(())
    }
}

fn check_spd3(m: &Matrix3<f64>, what: &str) -> SimResult<()> {
    let scale = m.norm().max(1e-300);
    if (m - m.transpose()).norm() > SPD_SYMMETRY_TOL * scale {
        return Err(SimError::Params(format!("{what} is not symmetric")));
    }
    if !m.iter().all(|v| v.is_finite()) || nalgebra::Cholesky::new(*m).is_none() {
        return Err(SimError::Params(format!("{what} is not positive definite")));
    }
    Ok(())
}

fn check_spd2(m: &Matrix2<f64>, what: &str) -> SimResult<()> {
    let scale = m.norm().max(1e-300);
    if (m - m.transpose()).norm() > SPD_SYMMETRY_TOL * scale {
        return Err(SimError::Params(format!("{what} is not symmetric")));
    }
    if !m.iter().all(|v| v.is_finite()) || nalgebra::Cholesky::new(*m).is_none() {
        return Err(SimError::Params(format!("{what} is not positive definite")));
    }
    Ok(())
}
