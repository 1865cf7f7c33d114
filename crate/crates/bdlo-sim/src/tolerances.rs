//! Numeric guards and solver limits used throughout the engine, collected in
//! one place so every threshold has a name and a documented meaning.

/// Edges at or below this length are degenerate; frames and curvature are
/// undefined there.
pub const MIN_EDGE_LENGTH: f64 = 1e-12;

/// Squared cross-product norm below which two tangents are treated as
/// parallel and parallel transport is the identity.
pub const TRANSPORT_PARALLEL_EPS: f64 = 1e-12;

/// Threshold on `1 + dot` below which two tangents are antiparallel and the
/// minimal rotation between them is undefined.
pub const ANTIPARALLEL_MARGIN: f64 = 1e-12;

/// Minimum norm of the twist-seed component perpendicular to the first
/// tangent; below this the seed cannot be projected into the frame plane.
pub const SEED_PERPENDICULAR_MIN: f64 = 1e-9;

/// Orthonormality defect allowed in a frame set (checked in tests and debug
/// assertions).
pub const FRAME_ORTHONORMALITY_TOL: f64 = 1e-9;

/// Convergence tolerance on the infinity norm of the free-edge twist-energy
/// gradient.
pub const THETA_TOLERANCE: f64 = 1e-8;

/// Iteration cap for the quasi-static twist solve.
pub const THETA_MAX_ITERATIONS: usize = 100;

/// Central-difference step for the optional finite-difference twist gradient.
pub const THETA_FD_STEP: f64 = 1e-6;

/// Relative symmetry defect allowed when validating SPD parameter matrices.
pub const SPD_SYMMETRY_TOL: f64 = 1e-9;
