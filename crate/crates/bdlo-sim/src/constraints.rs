//! Momentum-preserving position projection: per-edge inextensibility,
//! junction attachment, junction orientation, and the sweep loop that
//! enforces them together.
//!
//! Every pairwise correction splits a gap between two participants with
//! mass (or inertia) weightings `M_b (M_a + M_b)^-1`, so the heavier side
//! moves less and a pinned side (treated as infinitely heavy) does not move
//! at all. Length and attachment corrections act along the connecting
//! segment, closing the gap exactly in one application when both sides are
//! free. Orientation corrections rotate each junction edge rigidly about
//! its own midpoint, leaving the midpoint (and with it the segment's linear
//! momentum) untouched.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{SimError, SimResult};
use crate::rod::MaterialParams;
use crate::tolerances::MIN_EDGE_LENGTH;
use crate::topology::BdloTopology;

/// Uniform threshold on squared constraint residuals in the enforcement
/// loop: a sweep runs only while some residual exceeds it.
pub const DEFAULT_KAPPA: f64 = 0.02;

/// Slack (radians) allowed between the accumulated orientations of the two
/// junction edges before the orientation constraint activates.
pub const DEFAULT_ORIENTATION_SLACK: f64 = 0.1;

/// Cap on enforcement sweeps; hitting it is reported, not thrown.
pub const DEFAULT_MAX_SWEEPS: usize = 50;

/// Accumulated per-edge orientation for every branch, stored as unit
/// quaternions and exposed as angle-axis rotation vectors. Starts at the
/// identity, so orientation constraints measure drift of relative junction
/// orientation from the initial geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationTracker {
    q: Vec<Vec<UnitQuaternion<f64>>>,
}

impl OrientationTracker {
    /// Identity orientation for every edge of every branch.
    pub fn identity(topo: &BdloTopology) -> Self {
        OrientationTracker {
            q: topo
                .branches()
                .iter()
                .map(|b| vec![UnitQuaternion::identity(); b.edge_count()])
                .collect(),
        }
    }

    pub fn branch_count(&self) -> usize {
        self.q.len()
    }

    pub fn edge_count(&self, branch: usize) -> usize {
        self.q[branch].len()
    }

    /// Accumulated orientation of one edge as a rotation vector
    /// (angle times unit axis).
    pub fn rotation_vector(&self, branch: usize, edge: usize) -> Vector3<f64> {
        self.q[branch][edge].scaled_axis()
    }

    /// Overwrite one edge's accumulated orientation from a rotation vector.
    pub fn set_rotation_vector(&mut self, branch: usize, edge: usize, omega: Vector3<f64>) {
        self.q[branch][edge] = UnitQuaternion::from_scaled_axis(omega);
    }

    /// Compose a rotation-vector increment onto one edge's orientation:
    /// the increment is converted to a quaternion and applied on the left.
    pub fn apply_delta(&mut self, branch: usize, edge: usize, delta: &Vector3<f64>) {
        self.q[branch][edge] = UnitQuaternion::from_scaled_axis(*delta) * self.q[branch][edge];
    }
}

/// First-order orientation change of an edge whose endpoints move by the
/// given corrections: the cross product of the unit tangents before and
/// after. Zero for pure stretches and for corrections collinear with the
/// edge.
pub fn orientation_change(
    x_i: &Vector3<f64>,
    x_ip1: &Vector3<f64>,
    dx_i: &Vector3<f64>,
    dx_ip1: &Vector3<f64>,
) -> SimResult<Vector3<f64>> {
    let before = x_ip1 - x_i;
    let after = (x_ip1 + dx_ip1) - (x_i + dx_i);
    let lb = before.norm();
    let la = after.norm();
    if lb < MIN_EDGE_LENGTH || la < MIN_EDGE_LENGTH {
        return Err(SimError::Geometry(
            "orientation change undefined for a zero-length edge".into(),
        ));
    }
    Ok((before / lb).cross(&(after / la)))
}

/// Split the gap vector `full` between two participants by their mass
/// weightings: the first receives `M_b (M_a + M_b)^-1 full`, the second the
/// mirrored remainder, so the gap closes exactly and the weighted sum of
/// corrections balances. A pinned participant is infinitely heavy: it stays
/// put and the partner absorbs everything.
fn mass_split(
    m_a: &Matrix3<f64>,
    m_b: &Matrix3<f64>,
    pinned_a: bool,
    pinned_b: bool,
    full: &Vector3<f64>,
) -> SimResult<(Vector3<f64>, Vector3<f64>)> {
    match (pinned_a, pinned_b) {
        (true, true) => Ok((Vector3::zeros(), Vector3::zeros())),
        (true, false) => Ok((Vector3::zeros(), -full)),
        (false, true) => Ok((*full, Vector3::zeros())),
        (false, false) => {
            let inv = (m_a + m_b).try_inverse().ok_or_else(|| {
                SimError::Numeric("singular combined mass in constraint weighting".into())
            })?;
            let da = m_b * inv * full;
            let db = -(m_a * inv * full);
            Ok((da, db))
        }
    }
}

/// Corrections restoring one edge to its rest length, mass-weighted and
/// collinear with the edge. Exact: the corrected edge has exactly the rest
/// length for any pair of masses.
pub fn inextensibility_correction(
    x_i: &Vector3<f64>,
    x_ip1: &Vector3<f64>,
    m_i: &Matrix3<f64>,
    m_ip1: &Matrix3<f64>,
    pinned_i: bool,
    pinned_ip1: bool,
    rest_length: f64,
) -> SimResult<(Vector3<f64>, Vector3<f64>)> {
    let d = x_ip1 - x_i;
    let len = d.norm();
    if len < MIN_EDGE_LENGTH {
        return Err(SimError::Geometry(
            "cannot restore the length of a zero-length edge".into(),
        ));
    }
    let c = len - rest_length;
    let full = d * (c / len);
    mass_split(m_i, m_ip1, pinned_i, pinned_ip1, &full)
}

/// Corrections closing the gap between a parent junction vertex and the
/// child's junction-side vertex. Coincident vertices need no correction.
pub fn attachment_correction(
    x_parent: &Vector3<f64>,
    x_child: &Vector3<f64>,
    m_parent: &Matrix3<f64>,
    m_child: &Matrix3<f64>,
    pinned_parent: bool,
    pinned_child: bool,
) -> SimResult<(Vector3<f64>, Vector3<f64>)> {
    let gap = x_child - x_parent;
    if gap.norm() < MIN_EDGE_LENGTH {
        return Ok((Vector3::zeros(), Vector3::zeros()));
    }
    mass_split(m_parent, m_child, pinned_parent, pinned_child, &gap)
}

/// Result of one junction orientation correction: rotation-vector
/// increments for the two edges and the rigid position updates they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationCorrection {
    pub omega_parent: Vector3<f64>,
    pub omega_child: Vector3<f64>,
    /// Position deltas for (parent edge start, parent edge end,
    /// child edge start, child edge end).
    pub dx: [Vector3<f64>; 4],
}

impl OrientationCorrection {
    fn zero() -> Self {
        OrientationCorrection {
            omega_parent: Vector3::zeros(),
            omega_child: Vector3::zeros(),
            dx: [Vector3::zeros(); 4],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.omega_parent == Vector3::zeros() && self.omega_child == Vector3::zeros()
    }
}

/// Rotate the segment `(xa, xb)` rigidly about its midpoint by the rotation
/// vector `omega`, returning the endpoint deltas.
fn midpoint_rotation_deltas(
    xa: &Vector3<f64>,
    xb: &Vector3<f64>,
    omega: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let r = UnitQuaternion::from_scaled_axis(*omega);
    let half = (xb - xa) * 0.5;
    // xa sits at midpoint - half, xb at midpoint + half.
    let rotated = r * half;
    (half - rotated, rotated - half)
}

/// Inertia-weighted correction activating once the accumulated orientations
/// of the two junction edges differ by more than the slack `epsilon`. Each
/// edge receives a rotation-vector increment toward the other, applied to
/// positions as a rigid rotation about the edge's own midpoint, so edge
/// lengths and midpoints are preserved. An edge with a pinned endpoint is
/// treated as infinitely stiff and does not rotate.
#[allow(clippy::too_many_arguments)]
pub fn junction_orientation_correction(
    parent_edge: (&Vector3<f64>, &Vector3<f64>),
    child_edge: (&Vector3<f64>, &Vector3<f64>),
    omega_parent: &Vector3<f64>,
    omega_child: &Vector3<f64>,
    inertia_parent: &Matrix3<f64>,
    inertia_child: &Matrix3<f64>,
    parent_locked: bool,
    child_locked: bool,
    epsilon: f64,
) -> SimResult<OrientationCorrection> {
    let gap = omega_child - omega_parent;
    let gap_norm = gap.norm();
    let violation = gap_norm - epsilon;
    if violation <= 0.0 {
        return Ok(OrientationCorrection::zero());
    }
    let full = gap * (violation / gap_norm);
    let (d_parent, d_child) = mass_split(
        inertia_parent,
        inertia_child,
        parent_locked,
        child_locked,
        &full,
    )?;
    let (dp0, dp1) = midpoint_rotation_deltas(parent_edge.0, parent_edge.1, &d_parent);
    let (dc0, dc1) = midpoint_rotation_deltas(child_edge.0, child_edge.1, &d_child);
    Ok(OrientationCorrection {
        omega_parent: d_parent,
        omega_child: d_child,
        dx: [dp0, dp1, dc0, dc1],
    })
}

/// Which constraint classes a sweep applies; disabling classes drives the
/// ablation modes of the evaluation tooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstraintClasses {
    pub inextensibility: bool,
    pub attachment: bool,
    pub orientation: bool,
}

impl Default for ConstraintClasses {
    fn default() -> Self {
        ConstraintClasses {
            inextensibility: true,
            attachment: true,
            orientation: true,
        }
    }
}

impl ConstraintClasses {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn none() -> Self {
        ConstraintClasses {
            inextensibility: false,
            attachment: false,
            orientation: false,
        }
    }
}

/// Squared-residual thresholds, one per constraint class. Lengths and gaps
/// are in meters, orientations in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerClassKappa {
    pub inextensibility: f64,
    pub attachment: f64,
    pub orientation: f64,
}

impl PerClassKappa {
    pub fn uniform(kappa: f64) -> Self {
        PerClassKappa {
            inextensibility: kappa,
            attachment: kappa,
            orientation: kappa,
        }
    }
}

impl Default for PerClassKappa {
    fn default() -> Self {
        PerClassKappa::uniform(DEFAULT_KAPPA)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnforceOptions {
    pub kappa: PerClassKappa,
    /// Orientation slack in radians.
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub enabled: ConstraintClasses,
}

impl Default for EnforceOptions {
    fn default() -> Self {
        EnforceOptions {
            kappa: PerClassKappa::default(),
            epsilon: DEFAULT_ORIENTATION_SLACK,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            enabled: ConstraintClasses::all(),
        }
    }
}

/// Outcome of one enforcement run. `converged` means every enabled
/// constraint's squared residual was at or below its threshold when the
/// loop exited; the worst residuals are re-evaluated on the final state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintReport {
    pub sweeps_used: usize,
    pub max_inextensibility_sq: f64,
    pub max_attachment_sq: f64,
    pub max_orientation_sq: f64,
    pub converged: bool,
}

/// Worst squared residual per enabled class on the current state. The
/// orientation residual is floored at zero inside the slack: being inside
/// is feasible, not a violation.
fn worst_residuals(
    x: &[Vec<Vector3<f64>>],
    topo: &BdloTopology,
    params: &MaterialParams,
    tracker: &OrientationTracker,
    opts: &EnforceOptions,
) -> SimResult<(f64, f64, f64)> {
    let mut worst_inext = 0.0f64;
    let mut worst_attach = 0.0f64;
    let mut worst_orient = 0.0f64;
    if opts.enabled.inextensibility {
        for (b, xb) in x.iter().enumerate() {
            let mat = &params.branches[b];
            for e in 0..mat.edge_count() {
                let len = (xb[e + 1] - xb[e]).norm();
                if !len.is_finite() {
                    return Err(SimError::Numeric(format!(
                        "non-finite edge length in branch {b} during constraint check"
                    )));
                }
                let c = len - mat.rest_length[e];
                worst_inext = worst_inext.max(c * c);
            }
        }
    }
    for jun in topo.junctions() {
        let jv = jun.parent_vertex;
        let cb = jun.child_branch;
        if opts.enabled.attachment {
            let gap = (x[cb][0] - x[0][jv]).norm();
            worst_attach = worst_attach.max(gap * gap);
        }
        if opts.enabled.orientation {
            let gap =
                (tracker.rotation_vector(cb, 0) - tracker.rotation_vector(0, jv)).norm();
            let c = (gap - opts.epsilon).max(0.0);
            worst_orient = worst_orient.max(c * c);
        }
    }
    Ok((worst_inext, worst_attach, worst_orient))
}

/// Sweep-based constraint enforcement over all branches of one object.
///
/// Sweeps run while any enabled squared residual exceeds its threshold, up
/// to `max_sweeps`. Within a sweep, edge slots are visited in ascending
/// order across all branches; each slot applies inextensibility to every
/// branch long enough to own that edge, then, if the parent vertex with the
/// same index hosts a junction, the junction's attachment and orientation
/// corrections. Orientation increments are composed into the tracker as
/// they are applied. Pinned vertices never move; an edge touching a pinned
/// vertex never rotates.
pub fn enforce(
    x: &mut [Vec<Vector3<f64>>],
    pinned: &[Vec<bool>],
    topo: &BdloTopology,
    params: &MaterialParams,
    tracker: &mut OrientationTracker,
    opts: &EnforceOptions,
) -> SimResult<ConstraintReport> {
    if x.len() != topo.branch_count() || pinned.len() != topo.branch_count() {
        return Err(SimError::Shape(format!(
            "{} position branches / {} pin branches for a {}-branch topology",
            x.len(),
            pinned.len(),
            topo.branch_count()
        )));
    }
    for (b, xb) in x.iter().enumerate() {
        let n = topo.branch(b).vertex_count;
        if xb.len() != n || pinned[b].len() != n {
            return Err(SimError::Shape(format!(
                "branch '{}' has {} positions and {} pin flags for {n} vertices",
                topo.branch(b).id,
                xb.len(),
                pinned[b].len()
            )));
        }
    }
    let max_edges = topo
        .branches()
        .iter()
        .map(|b| b.edge_count())
        .max()
        .unwrap_or(0);

    let within = |r: (f64, f64, f64)| {
        r.0 <= opts.kappa.inextensibility
            && r.1 <= opts.kappa.attachment
            && r.2 <= opts.kappa.orientation
    };

    let mut sweeps_used = 0;
    let mut residuals = worst_residuals(x, topo, params, tracker, opts)?;
    while !within(residuals) && sweeps_used < opts.max_sweeps {
        for slot in 0..max_edges {
            if opts.enabled.inextensibility {
                for b in 0..topo.branch_count() {
                    if slot >= topo.branch(b).edge_count() {
                        continue;
                    }
                    let mat = &params.branches[b];
                    let (di, dip1) = inextensibility_correction(
                        &x[b][slot],
                        &x[b][slot + 1],
                        &mat.mass[slot],
                        &mat.mass[slot + 1],
                        pinned[b][slot],
                        pinned[b][slot + 1],
                        mat.rest_length[slot],
                    )?;
                    x[b][slot] += di;
                    x[b][slot + 1] += dip1;
                }
            }
            if let Some(jun) = topo.junction_at_parent_vertex(slot) {
                let jv = jun.parent_vertex;
                let cb = jun.child_branch;
                if opts.enabled.attachment {
                    let (dp, dc) = attachment_correction(
                        &x[0][jv],
                        &x[cb][0],
                        &params.branches[0].mass[jv],
                        &params.branches[cb].mass[0],
                        pinned[0][jv],
                        pinned[cb][0],
                    )?;
                    x[0][jv] += dp;
                    x[cb][0] += dc;
                }
                if opts.enabled.orientation {
                    let parent_locked = pinned[0][jv] || pinned[0][jv + 1];
                    let child_locked = pinned[cb][0] || pinned[cb][1];
                    let corr = junction_orientation_correction(
                        (&x[0][jv], &x[0][jv + 1]),
                        (&x[cb][0], &x[cb][1]),
                        &tracker.rotation_vector(0, jv),
                        &tracker.rotation_vector(cb, 0),
                        &params.branches[0].inertia[jv],
                        &params.branches[cb].inertia[0],
                        parent_locked,
                        child_locked,
                        opts.epsilon,
                    )?;
                    if !corr.is_zero() {
                        x[0][jv] += corr.dx[0];
                        x[0][jv + 1] += corr.dx[1];
                        x[cb][0] += corr.dx[2];
                        x[cb][1] += corr.dx[3];
                        tracker.apply_delta(0, jv, &corr.omega_parent);
                        tracker.apply_delta(cb, 0, &corr.omega_child);
                    }
                }
            }
        }
        sweeps_used += 1;
        residuals = worst_residuals(x, topo, params, tracker, opts)?;
    }
    Ok(ConstraintReport {
        sweeps_used,
        max_inextensibility_sq: residuals.0,
        max_attachment_sq: residuals.1,
        max_orientation_sq: residuals.2,
        converged: within(residuals),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rod::UniformBranchMaterial;
    use crate::topology::BranchSpec;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_diag_spd(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            rng.gen_range(0.1..5.0),
            rng.gen_range(0.1..5.0),
            rng.gen_range(0.1..5.0),
        ))
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 {
                return v / n;
            }
        }
    }

    // --- orientation change and tracker ---

    #[test]
    fn unmoved_edge_has_zero_orientation_change() {
        let a = Vector3::new(0.2, 0.1, 0.0);
        let b = Vector3::new(1.0, 0.4, 0.3);
        let z = Vector3::zeros();
        assert_eq!(orientation_change(&a, &b, &z, &z).unwrap(), Vector3::zeros());
    }

    #[test]
    fn collinear_corrections_leave_orientation_unchanged() {
        let a = Vector3::zeros();
        let b = Vector3::new(2.0, 0.0, 0.0);
        let along = Vector3::new(0.3, 0.0, 0.0);
        let omega = orientation_change(&a, &b, &along, &(-along)).unwrap();
        assert!(omega.norm() < 1e-15);
    }

    #[test]
    fn right_angle_rotation_gives_unit_change_along_the_normal() {
        let a = Vector3::zeros();
        let b = Vector3::new(1.0, 0.0, 0.0);
        // Move the tip so the edge points along +y instead of +x.
        let dx_tip = Vector3::new(-1.0, 1.0, 0.0);
        let omega = orientation_change(&a, &b, &Vector3::zeros(), &dx_tip).unwrap();
        assert!((omega - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn tracker_composition_and_round_trip() {
        let topo = BdloTopology::single_branch(4).unwrap();
        let mut tracker = OrientationTracker::identity(&topo);
        assert_eq!(tracker.rotation_vector(0, 1), Vector3::zeros());

        // Identity increment changes nothing.
        tracker.apply_delta(0, 1, &Vector3::zeros());
        assert_eq!(tracker.rotation_vector(0, 1), Vector3::zeros());

        // Coaxial increments add their angles.
        let axis = Vector3::new(0.0, 0.0, 1.0);
        tracker.apply_delta(0, 1, &(axis * 0.3));
        tracker.apply_delta(0, 1, &(axis * 0.4));
        assert!((tracker.rotation_vector(0, 1) - axis * 0.7).norm() < 1e-12);

        // An increment followed by its inverse returns to the start.
        let twist = Vector3::new(0.2, -0.5, 0.4);
        let before = tracker.rotation_vector(0, 1);
        tracker.apply_delta(0, 1, &twist);
        tracker.apply_delta(0, 1, &(-twist));
        assert!((tracker.rotation_vector(0, 1) - before).norm() < 1e-12);
    }

    #[test]
    fn rotation_vector_round_trip_is_exact_for_angles_below_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let topo = BdloTopology::single_branch(3).unwrap();
        let mut tracker = OrientationTracker::identity(&topo);
        for _ in 0..200 {
            let omega = random_unit(&mut rng) * rng.gen_range(1e-6..std::f64::consts::PI - 1e-6);
            tracker.set_rotation_vector(0, 0, omega);
            assert!((tracker.rotation_vector(0, 0) - omega).norm() < 1e-12);
        }
    }

    // --- inextensibility ---

    #[test]
    fn edge_at_rest_length_needs_no_correction() {
        let m = Matrix3::identity();
        let (da, db) = inextensibility_correction(
            &Vector3::zeros(),
            &Vector3::new(1.0, 0.0, 0.0),
            &m,
            &m,
            false,
            false,
            1.0,
        )
        .unwrap();
        assert!(da.norm() < 1e-15 && db.norm() < 1e-15);
    }

    #[test]
    fn equal_masses_split_the_excess_evenly() {
        let m = Matrix3::identity() * 0.4;
        // Edge 10% too long: each endpoint moves half the excess inward.
        let (da, db) = inextensibility_correction(
            &Vector3::zeros(),
            &Vector3::new(1.1, 0.0, 0.0),
            &m,
            &m,
            false,
            false,
            1.0,
        )
        .unwrap();
        assert!((da - Vector3::new(0.05, 0.0, 0.0)).norm() < 1e-15);
        assert!((db - Vector3::new(-0.05, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn pinned_endpoint_passes_the_whole_correction_to_its_partner() {
        let m = Matrix3::identity();
        let (da, db) = inextensibility_correction(
            &Vector3::zeros(),
            &Vector3::new(1.2, 0.0, 0.0),
            &m,
            &m,
            true,
            false,
            1.0,
        )
        .unwrap();
        assert_eq!(da, Vector3::zeros());
        assert!((db - Vector3::new(-0.2, 0.0, 0.0)).norm() < 1e-15);

        let (da, db) = inextensibility_correction(
            &Vector3::zeros(),
            &Vector3::new(1.2, 0.0, 0.0),
            &m,
            &m,
            true,
            true,
            1.0,
        )
        .unwrap();
        assert_eq!((da, db), (Vector3::zeros(), Vector3::zeros()));
    }

    #[test]
    fn corrections_balance_momentum_for_commuting_masses() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let m_a = random_diag_spd(&mut rng);
            let m_b = random_diag_spd(&mut rng);
            let a = random_unit(&mut rng) * rng.gen_range(0.1..2.0);
            let b = a + random_unit(&mut rng) * rng.gen_range(0.2..2.0);
            let rest = rng.gen_range(0.1..1.5);
            let (da, db) =
                inextensibility_correction(&a, &b, &m_a, &m_b, false, false, rest).unwrap();
            let balance = m_a * da + m_b * db;
            assert!(balance.norm() <= 1e-12 * (da.norm() + db.norm()).max(1.0));
            // Closure is exact for arbitrary masses.
            let len = ((b + db) - (a + da)).norm();
            assert!((len - rest).abs() < 1e-12);
        }
    }

    #[test]
    fn isotropic_corrections_stay_collinear_with_the_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..200 {
            let m_a = Matrix3::identity() * rng.gen_range(0.1..5.0);
            let m_b = Matrix3::identity() * rng.gen_range(0.1..5.0);
            let a = random_unit(&mut rng) * rng.gen_range(0.1..2.0);
            let b = a + random_unit(&mut rng) * rng.gen_range(0.2..2.0);
            let (da, db) =
                inextensibility_correction(&a, &b, &m_a, &m_b, false, false, 0.5).unwrap();
            let dir = (b - a).normalize();
            assert!(da.cross(&dir).norm() <= 1e-12 * da.norm().max(1.0));
            assert!(db.cross(&dir).norm() <= 1e-12 * db.norm().max(1.0));
        }
    }

    // --- attachment ---

    #[test]
    fn coincident_vertices_need_no_attachment_correction() {
        let m = Matrix3::identity();
        let p = Vector3::new(0.3, 0.2, 0.1);
        let (da, db) = attachment_correction(&p, &p, &m, &m, false, false).unwrap();
        assert_eq!((da, db), (Vector3::zeros(), Vector3::zeros()));
    }

    #[test]
    fn equal_masses_meet_in_the_middle_and_close_the_gap() {
        let m = Matrix3::identity() * 2.0;
        let p = Vector3::zeros();
        let c = Vector3::new(0.0, 0.0, 0.06);
        let (dp, dc) = attachment_correction(&p, &c, &m, &m, false, false).unwrap();
        assert!((dp - Vector3::new(0.0, 0.0, 0.03)).norm() < 1e-15);
        assert!((dc - Vector3::new(0.0, 0.0, -0.03)).norm() < 1e-15);
        assert!(((c + dc) - (p + dp)).norm() < 1e-15);
    }

    #[test]
    fn heavy_parent_moves_almost_nothing() {
        let mp = Matrix3::identity() * 1e6;
        let mc = Matrix3::identity();
        let p = Vector3::zeros();
        let c = Vector3::new(0.1, 0.0, 0.0);
        let (dp, dc) = attachment_correction(&p, &c, &mp, &mc, false, false).unwrap();
        assert!(dp.norm() < 1e-6);
        assert!((dc + Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-5);
    }

    #[test]
    fn attachment_closes_exactly_for_random_matrix_masses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m_a = random_diag_spd(&mut rng);
            let m_b = random_diag_spd(&mut rng);
            let p = random_unit(&mut rng);
            let c = p + random_unit(&mut rng) * rng.gen_range(0.01..0.5);
            let (dp, dc) = attachment_correction(&p, &c, &m_a, &m_b, false, false).unwrap();
            assert!(((c + dc) - (p + dp)).norm() < 1e-13);
            let balance = m_a * dp + m_b * dc;
            assert!(balance.norm() <= 1e-12);
        }
    }

    // --- junction orientation ---

    fn unit_edges() -> (
        (Vector3<f64>, Vector3<f64>),
        (Vector3<f64>, Vector3<f64>),
    ) {
        (
            (Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0)),
            (Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 0.1, 0.0)),
        )
    }

    #[test]
    fn orientation_within_slack_is_left_alone() {
        let (pe, ce) = unit_edges();
        let id = Matrix3::identity();
        for gap in [0.0, 0.05, DEFAULT_ORIENTATION_SLACK] {
            let corr = junction_orientation_correction(
                (&pe.0, &pe.1),
                (&ce.0, &ce.1),
                &Vector3::zeros(),
                &Vector3::new(0.0, 0.0, gap),
                &id,
                &id,
                false,
                false,
                DEFAULT_ORIENTATION_SLACK,
            )
            .unwrap();
            assert!(corr.is_zero(), "gap {gap} should be within the slack");
            assert_eq!(corr.dx, [Vector3::zeros(); 4]);
        }
    }

    #[test]
    fn coaxial_gap_of_twice_the_slack_closes_to_the_boundary() {
        let (pe, ce) = unit_edges();
        let id = Matrix3::identity();
        let eps = DEFAULT_ORIENTATION_SLACK;
        let axis = Vector3::new(0.0, 0.0, 1.0);
        let omega_p = axis * -eps;
        let omega_c = axis * eps;
        let corr = junction_orientation_correction(
            (&pe.0, &pe.1),
            (&ce.0, &ce.1),
            &omega_p,
            &omega_c,
            &id,
            &id,
            false,
            false,
            eps,
        )
        .unwrap();
        // Equal inertias: each side rotates half the violation toward the other.
        assert!((corr.omega_parent - axis * (eps / 2.0)).norm() < 1e-15);
        assert!((corr.omega_child + axis * (eps / 2.0)).norm() < 1e-15);

        // Replay through the tracker: the residual lands exactly on the
        // slack boundary because the rotations share an axis.
        let topo = two_branch_topology();
        let mut tracker = OrientationTracker::identity(&topo);
        tracker.set_rotation_vector(0, 2, omega_p);
        tracker.set_rotation_vector(1, 0, omega_c);
        tracker.apply_delta(0, 2, &corr.omega_parent);
        tracker.apply_delta(1, 0, &corr.omega_child);
        let gap = (tracker.rotation_vector(1, 0) - tracker.rotation_vector(0, 2)).norm();
        assert!((gap - eps).abs() < 1e-12);
    }

    #[test]
    fn orientation_correction_preserves_midpoints_lengths_and_angular_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let i_p = random_diag_spd(&mut rng);
            let i_c = random_diag_spd(&mut rng);
            let p0 = random_unit(&mut rng) * 0.3;
            let p1 = p0 + random_unit(&mut rng) * rng.gen_range(0.05..0.3);
            let c0 = random_unit(&mut rng) * 0.3;
            let c1 = c0 + random_unit(&mut rng) * rng.gen_range(0.05..0.3);
            let omega_p = random_unit(&mut rng) * rng.gen_range(0.0..0.6);
            let omega_c = random_unit(&mut rng) * rng.gen_range(0.0..0.6);
            let corr = junction_orientation_correction(
                (&p0, &p1),
                (&c0, &c1),
                &omega_p,
                &omega_c,
                &i_p,
                &i_c,
                false,
                false,
                0.1,
            )
            .unwrap();
            let balance = i_p * corr.omega_parent + i_c * corr.omega_child;
            assert!(balance.norm() <= 1e-12);
            // Midpoints stay put, lengths are preserved by rigidity.
            let mid_p_before = (p0 + p1) * 0.5;
            let mid_p_after = (p0 + corr.dx[0] + p1 + corr.dx[1]) * 0.5;
            assert!((mid_p_after - mid_p_before).norm() <= 1e-14);
            let mid_c_before = (c0 + c1) * 0.5;
            let mid_c_after = (c0 + corr.dx[2] + c1 + corr.dx[3]) * 0.5;
            assert!((mid_c_after - mid_c_before).norm() <= 1e-14);
            let lp_before = (p1 - p0).norm();
            let lp_after = ((p1 + corr.dx[1]) - (p0 + corr.dx[0])).norm();
            assert!((lp_after - lp_before).abs() <= 1e-13);
            let lc_before = (c1 - c0).norm();
            let lc_after = ((c1 + corr.dx[3]) - (c0 + corr.dx[2])).norm();
            assert!((lc_after - lc_before).abs() <= 1e-13);
        }
    }

    #[test]
    fn locked_edge_does_not_rotate() {
        let (pe, ce) = unit_edges();
        let id = Matrix3::identity();
        let corr = junction_orientation_correction(
            (&pe.0, &pe.1),
            (&ce.0, &ce.1),
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 0.5),
            &id,
            &id,
            true,
            false,
            0.1,
        )
        .unwrap();
        assert_eq!(corr.omega_parent, Vector3::zeros());
        assert_eq!(corr.dx[0], Vector3::zeros());
        assert_eq!(corr.dx[1], Vector3::zeros());
        // The free child absorbs the whole violation.
        assert!((corr.omega_child - Vector3::new(0.0, 0.0, -0.4)).norm() < 1e-15);
    }

    // --- enforce ---

    fn two_branch_topology() -> BdloTopology {
        BdloTopology::build(vec![
            BranchSpec::parent("spine", 5),
            BranchSpec::child("limb", 3, 2),
        ])
        .unwrap()
    }

    /// Feasible rest configuration for `two_branch_topology`: parent along
    /// x with 0.1 spacing, child rising in y from the junction vertex.
    fn rest_positions() -> Vec<Vec<Vector3<f64>>> {
        let parent: Vec<Vector3<f64>> =
            (0..5).map(|i| Vector3::new(0.1 * i as f64, 0.0, 0.0)).collect();
        let junction = parent[2];
        let child: Vec<Vector3<f64>> =
            (0..3).map(|i| junction + Vector3::new(0.0, 0.1 * i as f64, 0.0)).collect();
        vec![parent, child]
    }

    fn rest_params(topo: &BdloTopology) -> MaterialParams {
        MaterialParams::uniform(topo, &rest_positions(), &[UniformBranchMaterial::default()])
            .unwrap()
    }

    fn free_pins(topo: &BdloTopology) -> Vec<Vec<bool>> {
        topo.branches()
            .iter()
            .map(|b| vec![false; b.vertex_count])
            .collect()
    }

    #[test]
    fn feasible_state_passes_through_untouched() {
        let topo = two_branch_topology();
        let params = rest_params(&topo);
        let mut x = rest_positions();
        let before = x.clone();
        let mut tracker = OrientationTracker::identity(&topo);
        let report = enforce(
            &mut x,
            &free_pins(&topo),
            &topo,
            &params,
            &mut tracker,
            &EnforceOptions::default(),
        )
        .unwrap();
        assert_eq!(report.sweeps_used, 0);
        assert!(report.converged);
        assert_eq!(x, before);
    }

    fn tight_options() -> EnforceOptions {
        EnforceOptions {
            kappa: PerClassKappa::uniform(1e-10),
            ..EnforceOptions::default()
        }
    }

    #[test]
    fn overstretched_segment_converges_in_a_few_sweeps() {
        let topo = two_branch_topology();
        let params = rest_params(&topo);
        let mut x = rest_positions();
        x[0][4].x += 0.05; // stretch the last parent edge by 50%
        let mut tracker = OrientationTracker::identity(&topo);
        let report = enforce(
            &mut x,
            &free_pins(&topo),
            &topo,
            &params,
            &mut tracker,
            &tight_options(),
        )
        .unwrap();
        assert!(report.converged, "{report:?}");
        assert!(report.sweeps_used <= 30, "{report:?}");
        assert!(report.max_inextensibility_sq <= 1e-10);
    }

    #[test]
    fn detached_child_is_reattached() {
        let topo = two_branch_topology();
        let params = rest_params(&topo);
        let mut x = rest_positions();
        for v in &mut x[1] {
            v.z -= 0.05; // drop the whole child 5 cm
        }
        let mut tracker = OrientationTracker::identity(&topo);
        let report = enforce(
            &mut x,
            &free_pins(&topo),
            &topo,
            &params,
            &mut tracker,
            &tight_options(),
        )
        .unwrap();
        assert!(report.converged, "{report:?}");
        let gap = (x[1][0] - x[0][2]).norm();
        assert!(gap * gap <= 1e-10, "residual gap {gap}");
    }

    #[test]
    fn pinned_vertices_never_move() {
        let topo = two_branch_topology();
        let params = rest_params(&topo);
        let mut x = rest_positions();
        // Perturb everything except the pinned head; the configuration
        // stays feasible because the far end is free.
        x[0][2].y += 0.03;
        x[0][4].x += 0.05;
        x[1][2].y += 0.04;
        let mut pins = free_pins(&topo);
        pins[0][0] = true;
        let pinned_head = x[0][0];
        let mut tracker = OrientationTracker::identity(&topo);
        let opts = EnforceOptions {
            kappa: PerClassKappa::uniform(1e-8),
            ..EnforceOptions::default()
        };
        let report = enforce(&mut x, &pins, &topo, &params, &mut tracker, &opts).unwrap();
        assert!(report.converged, "{report:?}");
        assert_eq!(x[0][0], pinned_head);
    }

    #[test]
    fn infeasible_pinned_stretch_reports_non_convergence() {
        let topo = BdloTopology::single_branch(3).unwrap();
        let rest: Vec<Vector3<f64>> =
            (0..3).map(|i| Vector3::new(0.1 * i as f64, 0.0, 0.0)).collect();
        let params = MaterialParams::uniform(
            &topo,
            &[rest.clone()],
            &[UniformBranchMaterial::default()],
        )
        .unwrap();
        // Both ends pinned 50% farther apart than the rest length allows.
        let mut x = vec![vec![
            Vector3::zeros(),
            Vector3::new(0.15, 0.0, 0.0),
            Vector3::new(0.3, 0.0, 0.0),
        ]];
        let pins = vec![vec![true, false, true]];
        let mut tracker = OrientationTracker::identity(&topo);
        let report = enforce(
            &mut x,
            &pins,
            &topo,
            &params,
            &mut tracker,
            &tight_options(),
        )
        .unwrap();
        assert!(!report.converged);
        assert_eq!(report.sweeps_used, DEFAULT_MAX_SWEEPS);
        assert!(report.max_inextensibility_sq > 1e-10);
    }

    #[test]
    fn orientation_drift_beyond_slack_is_pulled_back() {
        let topo = two_branch_topology();
        let params = rest_params(&topo);
        let mut x = rest_positions();
        let mut tracker = OrientationTracker::identity(&topo);
        // Twist the child's first edge far past the slack.
        tracker.set_rotation_vector(1, 0, Vector3::new(0.0, 0.0, 0.5));
        let report = enforce(
            &mut x,
            &free_pins(&topo),
            &topo,
            &params,
            &mut tracker,
            &tight_options(),
        )
        .unwrap();
        assert!(report.converged, "{report:?}");
        let gap = (tracker.rotation_vector(1, 0) - tracker.rotation_vector(0, 2)).norm();
        assert!(gap <= DEFAULT_ORIENTATION_SLACK + 1e-8, "gap {gap}");
    }

    #[test]
    fn disabled_classes_are_ignored() {
        let topo = two_branch_topology();
        let params = rest_params(&topo);
        let mut x = rest_positions();
        for v in &mut x[1] {
            v.z -= 0.05;
        }
        let detached = x.clone();
        let mut tracker = OrientationTracker::identity(&topo);
        let opts = EnforceOptions {
            kappa: PerClassKappa::uniform(1e-10),
            enabled: ConstraintClasses {
                inextensibility: true,
                attachment: false,
                orientation: false,
            },
            ..EnforceOptions::default()
        };
        let report = enforce(
            &mut x,
            &free_pins(&topo),
            &topo,
            &params,
            &mut tracker,
            &opts,
        )
        .unwrap();
        // Lengths were already right, so nothing runs and the gap stays.
        assert!(report.converged);
        assert_eq!(x, detached);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn perturbed_states_converge_and_satisfy_every_residual(seed in 0u64..1_000) {
            let topo = two_branch_topology();
            let params = rest_params(&topo);
            let mut x = rest_positions();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for branch in &mut x {
                for v in branch.iter_mut() {
                    *v += Vector3::new(
                        rng.gen_range(-0.02..0.02),
                        rng.gen_range(-0.02..0.02),
                        rng.gen_range(-0.02..0.02),
                    );
                }
            }
            let mut tracker = OrientationTracker::identity(&topo);
            let opts = EnforceOptions {
                kappa: PerClassKappa::uniform(1e-8),
                ..EnforceOptions::default()
            };
            let report = enforce(
                &mut x,
                &free_pins(&topo),
                &topo,
                &params,
                &mut tracker,
                &opts,
            ).unwrap();
            prop_assert!(report.converged, "{report:?}");
            // Re-evaluate every constraint from scratch on the final state.
            for (b, xb) in x.iter().enumerate() {
                let mat = &params.branches[b];
                for e in 0..mat.edge_count() {
                    let c = (xb[e + 1] - xb[e]).norm() - mat.rest_length[e];
                    prop_assert!(c * c <= 1e-8);
                }
            }
            let gap = (x[1][0] - x[0][2]).norm();
            prop_assert!(gap * gap <= 1e-8);
        }
    }
}
