//! Dynamics engine for branched deformable linear objects (BDLOs): ropes,
//! cables, and harnesses made of one parent chain with attached child
//! branches.
//!
//! The engine combines four ingredients:
//!
//! * discrete elastic-rod bending/twisting energies with analytic gradients
//!   ([`rod`]), including a quasi-static twist solve per step;
//! * momentum-preserving projection of inextensibility, junction attachment,
//!   and junction orientation constraints ([`constraints`]);
//! * an optional graph-convolution residual network that corrects the
//!   integrator's per-step velocity ([`residual`]);
//! * gradient-based identification of material parameters from recorded
//!   trajectories ([`sysid`]).
//!
//! [`topology`] fixes the branch structure, [`dynamics`] assembles the
//! per-step pipeline, and [`io`] provides the text file formats, synthetic
//! dataset generation, and error metrics used by the command-line front end.

pub mod constraints;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod residual;
pub mod rod;
pub mod sysid;
pub mod tolerances;
pub mod topology;

pub use error::{SimError, SimResult};
pub use topology::{Adjacency, BdloTopology, BranchKind, BranchSpec, Junction, PaddedLayout};
