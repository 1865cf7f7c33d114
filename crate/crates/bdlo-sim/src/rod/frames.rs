//! Edge frames along a chain: tangents, the twist-free Bishop pair obtained
//! by parallel transport, and the material pair obtained by rotating the
//! Bishop pair through the per-edge twist angle.

use nalgebra::Vector3;

use crate::error::{SimError, SimResult};
use crate::tolerances::{
    ANTIPARALLEL_MARGIN, MIN_EDGE_LENGTH, SEED_PERPENDICULAR_MIN, TRANSPORT_PARALLEL_EPS,
};

/// Per-edge orthonormal frames of one branch.
///
/// `b1`/`b2` form the twist-free reference pair; `m1`/`m2` are the material
/// pair at the current twist angles. All five columns are unit length and
/// mutually orthogonal per edge.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameSet {
    pub tangent: Vec<Vector3<f64>>,
    pub b1: Vec<Vector3<f64>>,
    pub b2: Vec<Vector3<f64>>,
    pub m1: Vec<Vector3<f64>>,
    pub m2: Vec<Vector3<f64>>,
}

impl FrameSet {
    pub fn edge_count(&self) -> usize {
        self.tangent.len()
    }

    pub(crate) fn resize(&mut self, edges: usize) {
        self.tangent.resize(edges, Vector3::zeros());
        self.b1.resize(edges, Vector3::zeros());
        self.b2.resize(edges, Vector3::zeros());
        self.m1.resize(edges, Vector3::zeros());
        self.m2.resize(edges, Vector3::zeros());
    }
}

/// Applies the minimal rotation taking unit vector `from` to unit vector
/// `to`. Identity when the tangents are (nearly) parallel; fails when they
/// are antiparallel, where the minimal rotation is undefined.
pub fn parallel_transport(
    v: &Vector3<f64>,
    from: &Vector3<f64>,
    to: &Vector3<f64>,
) -> SimResult<Vector3<f64>> {
    let axis = from.cross(to);
    let cos = from.dot(to);
    if axis.norm_squared() < TRANSPORT_PARALLEL_EPS {
        if cos > 0.0 {
            return Ok(*v);
        }
        return Err(SimError::Geometry(
            "parallel transport between antiparallel tangents is undefined".into(),
        ));
    }
    if 1.0 + cos < ANTIPARALLEL_MARGIN {
        return Err(SimError::Geometry(
            "parallel transport between antiparallel tangents is undefined".into(),
        ));
    }
    // Rodrigues rotation with sin/cos folded into the unnormalized axis.
    Ok(v + axis.cross(v) + axis.cross(&axis.cross(v)) / (1.0 + cos))
}

/// Projects `seed` into the plane perpendicular to `tangent` and normalizes
/// it. Fails when the seed is (nearly) parallel to the tangent.
pub fn orthonormal_seed(seed: &Vector3<f64>, tangent: &Vector3<f64>) -> SimResult<Vector3<f64>> {
    let perp = seed - tangent * seed.dot(tangent);
    let norm = perp.norm();
    if !norm.is_finite() || norm < SEED_PERPENDICULAR_MIN {
        return Err(SimError::Geometry(
            "twist seed is parallel to the first edge; no frame plane is defined".into(),
        ));
    }
    Ok(perp / norm)
}

/// Deterministic default twist seed: the coordinate axis least aligned with
/// the unit tangent, projected into the perpendicular plane. The tangent
/// must be normalized; the closed-form force and gradient routines assume a
/// seed perpendicular to the unit first tangent.
pub fn default_seed(tangent: &Vector3<f64>) -> Vector3<f64> {
    let abs = tangent.map(f64::abs);
    let axis = if abs.x <= abs.y && abs.x <= abs.z {
        Vector3::x()
    } else if abs.y <= abs.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    orthonormal_seed(&axis, tangent).expect("a coordinate axis is never parallel to a unit vector's least-aligned axis")
}

/// Computes unit tangents and the twist-free reference pair by parallel
/// transport of the (projected) seed along the chain. The material pair is
/// initialized at zero twist, i.e. equal to the reference pair.
pub fn bishop_frames(x: &[Vector3<f64>], b1_seed: &Vector3<f64>) -> SimResult<FrameSet> {
    let mut frames = FrameSet::default();
    bishop_frames_into(x, b1_seed, &mut frames)?;
    Ok(frames)
}

pub(crate) fn bishop_frames_into(
    x: &[Vector3<f64>],
    b1_seed: &Vector3<f64>,
    frames: &mut FrameSet,
) -> SimResult<()> {
    if x.len() < 2 {
        return Err(SimError::Shape(format!(
            "need at least 2 vertices for edge frames, got {}",
            x.len()
        )));
    }
    let edges = x.len() - 1;
    frames.resize(edges);
    for i in 0..edges {
        let e = x[i + 1] - x[i];
        let len = e.norm();
        if !len.is_finite() || len < MIN_EDGE_LENGTH {
            return Err(SimError::Geometry(format!(
                "edge {i} has degenerate length {len:.3e}"
            )));
        }
        frames.tangent[i] = e / len;
    }
    let mut b1 = orthonormal_seed(b1_seed, &frames.tangent[0])?;
    for i in 0..edges {
        if i > 0 {
            b1 = parallel_transport(&b1, &frames.tangent[i - 1], &frames.tangent[i]).map_err(
                |_| {
                    SimError::Geometry(format!(
                        "edges {} and {} are antiparallel; parallel transport is undefined",
                        i - 1,
                        i
                    ))
                },
            )?;
            // Re-orthonormalize to stop roundoff drifting over long chains.
            let t = frames.tangent[i];
            b1 -= t * b1.dot(&t);
            b1 /= b1.norm();
        }
        frames.b1[i] = b1;
        frames.b2[i] = frames.tangent[i].cross(&b1);
        frames.m1[i] = frames.b1[i];
        frames.m2[i] = frames.b2[i];
    }
    Ok(())
}

/// Rotates the reference pair through the per-edge twist angles to produce
/// the material pair.
pub fn material_frames(frames: &mut FrameSet, theta: &[f64]) -> SimResult<()> {
    if theta.len() != frames.edge_count() {
        return Err(SimError::Shape(format!(
            "{} twist angles for {} edges",
            theta.len(),
            frames.edge_count()
        )));
    }
    for i in 0..theta.len() {
        let (sin, cos) = theta[i].sin_cos();
        frames.m1[i] = frames.b1[i] * cos + frames.b2[i] * sin;
        frames.m2[i] = -frames.b1[i] * sin + frames.b2[i] * cos;
    }
    Ok(())
}

/// Frames with the material pair already rotated to `theta`.
pub fn framed_with_twist(
    x: &[Vector3<f64>],
    b1_seed: &Vector3<f64>,
    theta: &[f64],
) -> SimResult<FrameSet> {
    let mut frames = bishop_frames(x, b1_seed)?;
    material_frames(&mut frames, theta)?;
    Ok(frames)
}
