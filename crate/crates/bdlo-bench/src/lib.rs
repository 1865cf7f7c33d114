//! Shared fixtures for the criterion benchmarks: a branched harness for
//! whole-structure stepping and a helical rod for the twist solve.

use nalgebra::Vector3;

use bdlo_sim::dynamics::{BdloState, GraspSpec, Pin, StepConfig};
use bdlo_sim::io::canonical_rest;
use bdlo_sim::rod::{BranchMaterial, MaterialParams, UniformBranchMaterial};
use bdlo_sim::rod::default_seed;
use bdlo_sim::{BdloTopology, BranchSpec};

/// Vertex spacing of the benchmark fixtures (m).
pub const SPACING: f64 = 0.05;

/// A 12-vertex trunk with `children` 4-vertex limbs anchored along it.
/// Two children give the 20-vertex structure the step benchmarks target.
pub fn harness(children: usize) -> (BdloTopology, Vec<Vec<Vector3<f64>>>, MaterialParams) {
    let mut specs = vec![BranchSpec::parent("trunk", 12)];
    for k in 0..children {
        specs.push(BranchSpec::child(format!("limb-{k}"), 4, 1 + k));
    }
    let topo = BdloTopology::build(specs).unwrap();
    let rest = canonical_rest(&topo, SPACING);
    let params = MaterialParams::uniform(&topo, &rest, &[UniformBranchMaterial::default()])
        .unwrap();
    (topo, rest, params)
}

/// Root pin held at its rest position; gravity drives the motion.
pub fn held_root(rest: &[Vec<Vector3<f64>>]) -> (GraspSpec, Vec<Vector3<f64>>) {
    let grasp = GraspSpec {
        pins: vec![Pin { branch: 0, vertex: 0 }],
        clamps: vec![],
    };
    (grasp, vec![rest[0][0]])
}

pub fn rest_state(topo: &BdloTopology, rest: &[Vec<Vector3<f64>>]) -> BdloState {
    BdloState::at_rest(topo, rest).unwrap()
}

pub fn step_config() -> StepConfig {
    StepConfig::default()
}

/// A 20-vertex helix bent out of a straight rest rod, with the reference
/// seed the twist solve starts from.
pub fn helix() -> (Vec<Vector3<f64>>, Vec<f64>, BranchMaterial, Vector3<f64>) {
    let n = 20;
    let x: Vec<Vector3<f64>> = (0..n)
        .map(|i| {
            let s = i as f64 * SPACING;
            Vector3::new(s, 0.02 * (s * 8.0).sin(), 0.02 * (s * 8.0).cos())
        })
        .collect();
    let rest: Vec<Vector3<f64>> = (0..n)
        .map(|i| Vector3::new(i as f64 * SPACING, 0.0, 0.0))
        .collect();
    let mat = BranchMaterial::uniform(&rest, &UniformBranchMaterial::default()).unwrap();
    let seed = default_seed(&(x[1] - x[0]).normalize());
    let theta0 = vec![0.0; n - 1];
    (x, theta0, mat, seed)
}
