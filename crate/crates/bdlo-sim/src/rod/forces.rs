//! Analytic elastic forces on the vertices of one branch at fixed twist
//! angles.
//!
//! The bending energy depends on vertex positions through two routes: the
//! curvature binormal at each interior vertex, and the reference frames,
//! which twist when the chain moves because they are defined by parallel
//! transport. The frame route reduces to a scalar twist rate per transport
//! step, `h_k = -(kb_k / 2) . (de_{k-1}/|e_{k-1}| + de_k/|e_k|)`, weighted
//! by the bending gradient with respect to the twist angle of every edge at
//! or past the step. The twisting energy depends only on the angles, so it
//! contributes no force here.

use nalgebra::Vector3;

use crate::error::{SimError, SimResult};
use crate::rod::energy::{curvature_binormal, j_rot, material_curvature};
use crate::rod::{framed_with_twist, BranchMaterial};

/// Force `-dP/dx` on every vertex at fixed twist angles. The seed is
/// projected against the first tangent exactly as in the frame computation,
/// so the result matches finite differences of the energy evaluated through
/// the same frames.
pub fn vertex_forces(
    x: &[Vector3<f64>],
    b1_seed: &Vector3<f64>,
    theta: &[f64],
    mat: &BranchMaterial,
) -> SimResult<Vec<Vector3<f64>>> {
    if theta.len() != mat.edge_count() {
        return Err(SimError::Shape(format!(
            "{} angles against material with {} edges",
            theta.len(),
            mat.edge_count()
        )));
    }
    let frames = framed_with_twist(x, b1_seed, theta)?;
    let mut out = vec![Vector3::zeros(); x.len()];
    vertex_forces_with_frames(x, &frames, mat, &mut out)?;
    Ok(out)
}

/// Same force computation against material frames the caller already holds,
/// writing into a reusable buffer.
pub(crate) fn vertex_forces_with_frames(
    x: &[Vector3<f64>],
    frames: &crate::rod::FrameSet,
    mat: &BranchMaterial,
    out: &mut [Vector3<f64>],
) -> SimResult<()> {
    let n = x.len();
    if n != mat.vertex_count() || frames.edge_count() != mat.edge_count() || out.len() != n {
        return Err(SimError::Shape(format!(
            "{n} vertices / {} framed edges / {} outputs against material with {} vertices",
            frames.edge_count(),
            out.len(),
            mat.vertex_count()
        )));
    }
    let edges = n - 1;
    let mut e = Vec::with_capacity(edges);
    let mut len = Vec::with_capacity(edges);
    for i in 0..edges {
        let v = x[i + 1] - x[i];
        len.push(v.norm());
        e.push(v);
    }

    // dP/de per edge, both routes accumulated.
    let mut grad_e = vec![Vector3::zeros(); edges];
    // Bending gradient with respect to each edge's twist angle; its suffix
    // sums weight the frame route.
    let mut g_theta = vec![0.0; edges];
    let mut kb_at = vec![Vector3::zeros(); n.saturating_sub(2)];

    for i in 1..n - 1 {
        let kb = curvature_binormal(&e[i - 1], &e[i])?;
        kb_at[i - 1] = kb;
        let denom = len[i - 1] * len[i] + e[i - 1].dot(&e[i]);
        // Combined dP/d(kb) over the two adjacent frames.
        let mut u = Vector3::zeros();
        for which in 0..2 {
            let j = i - 1 + which;
            let omega = material_curvature(&kb, &frames.m1[j], &frames.m2[j]);
            let d = omega - mat.rest_curvature_at(i, which);
            let c = mat.bend_stiffness[j] * d;
            u += frames.m1[j] * c.x + frames.m2[j] * c.y;
            g_theta[j] += c.dot(&j_rot(&omega));
        }
        let u_dot_kb = u.dot(&kb);
        grad_e[i - 1] += (e[i].cross(&u) * 2.0
            - (e[i - 1] * (len[i] / len[i - 1]) + e[i]) * u_dot_kb)
            / denom;
        grad_e[i] += (u.cross(&e[i - 1]) * 2.0
            - (e[i] * (len[i - 1] / len[i]) + e[i - 1]) * u_dot_kb)
            / denom;
    }

    // Frame route: the transport step at interior vertex k twists every
    // frame from edge k onward, so h_k carries the suffix sum of g_theta.
    let mut suffix = 0.0;
    for k in (1..=n.saturating_sub(2)).rev() {
        suffix += g_theta[k];
        let kb = kb_at[k - 1];
        grad_e[k - 1] -= kb * (suffix / (2.0 * len[k - 1]));
        grad_e[k] -= kb * (suffix / (2.0 * len[k]));
    }

    for m in 0..n {
        let mut g = Vector3::zeros();
        if m >= 1 {
            g += grad_e[m - 1];
        }
        if m < edges {
            g -= grad_e[m];
        }
        out[m] = -g;
        if !out[m].iter().all(|v| v.is_finite()) {
            return Err(SimError::Numeric(format!(
                "non-finite elastic force at vertex {m}"
            )));
        }
    }
    Ok(())
}
