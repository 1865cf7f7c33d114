//! Text file formats, synthetic dataset generation, and error metrics.
//!
//! Every format is line-oriented UTF-8 with a versioned header line,
//! `#`-prefixed comment lines, and whitespace-separated fields —
//! diff-able, language-neutral, and streamable. Floats are written with
//! Rust's shortest-round-trip formatting, so a save→load cycle is
//! bit-lossless. Malformed input is reported as `path:line: message`.
//!
//! Formats:
//! * topology (`bdlo-topology v1`) — branch list with junction anchors;
//! * trajectory (`bdlo-trajectory v1`) — header (time step, topology
//!   hash, split fraction, branch shapes, column schema) followed by one
//!   record per (frame, branch, vertex);
//! * inputs (`bdlo-inputs v1`) — parallel per-frame grasp-target records,
//!   one per (frame, pin);
//! * parameters (`bdlo-params v1`) — per-branch material scalars;
//! * residual checkpoint (`bdlo-residual-checkpoint v1`) — network
//!   shapes, mask, standardization statistics, and weights;
//! * motion script (`bdlo-motion v1`) — pinned vertices with waypoint
//!   schedules and static twist clamps, for reproducible synthetic
//!   datasets.
//!
//! Trajectories are tied to their topology by a 64-bit FNV-1a hash of
//! the canonical branch description, so mismatched pairings fail fast.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DVector, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{BatchedStepper, BdloState, EdgeClamp, GraspSpec, Pin, StepConfig};
use crate::error::{SimError, SimResult};
use crate::residual::{ResidualNet, FEATURE_DIM, HIDDEN_WIDTH};
use crate::rod::{MaterialParams, UniformBranchMaterial};
use crate::sysid::{ParamSpec, ParamVector};
use crate::topology::{BdloTopology, BranchKind, BranchSpec};

/// 64-bit FNV-1a hash of a canonical description of the topology; stored
/// in trajectory headers to tie data files to their structure.
pub fn topology_hash(topo: &BdloTopology) -> u64 {
    let mut text = String::new();
    for b in topo.branches() {
        let anchor = match b.junction_parent_vertex {
            None => String::from("-"),
            Some(v) => v.to_string(),
        };
        let _ = write!(text, "{}|{:?}|{}|{};", b.id, b.kind, b.vertex_count, anchor);
    }
    fnv1a64(text.as_bytes())
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// ---------------------------------------------------------------------
// Parsing scaffolding
// ---------------------------------------------------------------------

fn read_to_string(path: &Path) -> SimResult<String> {
    std::fs::read_to_string(path).map_err(|source| SimError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_string(path: &Path, content: &str) -> SimResult<()> {
    std::fs::write(path, content).map_err(|source| SimError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Non-comment, non-blank lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn expect_header(path: &Path, lines: &mut impl Iterator<Item = (usize, String)>, magic: &str) -> SimResult<()> {
    match lines.next() {
        Some((_, l)) if l == magic => Ok(()),
        Some((n, l)) => Err(SimError::schema(
            path.display().to_string(),
            n,
            format!("expected header '{magic}', found '{l}'"),
        )),
        None => Err(SimError::schema(
            path.display().to_string(),
            1,
            format!("empty file; expected header '{magic}'"),
        )),
    }
}

fn parse_f64(path: &Path, line: usize, token: &str, what: &str) -> SimResult<f64> {
    let v: f64 = token.parse().map_err(|_| {
        SimError::schema(
            path.display().to_string(),
            line,
            format!("cannot parse {what} '{token}' as a number"),
        )
    })?;
    if !v.is_finite() {
        return Err(SimError::schema(
            path.display().to_string(),
            line,
            format!("{what} must be finite, got '{token}'"),
        ));
    }
    Ok(v)
}

fn parse_usize(path: &Path, line: usize, token: &str, what: &str) -> SimResult<usize> {
    token.parse().map_err(|_| {
        SimError::schema(
            path.display().to_string(),
            line,
            format!("cannot parse {what} '{token}' as a non-negative integer"),
        )
    })
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> SimError {
    SimError::schema(path.display().to_string(), line, message)
}

// ---------------------------------------------------------------------
// Topology files
// ---------------------------------------------------------------------

const TOPOLOGY_MAGIC: &str = "bdlo-topology v1";

/// Write a topology description:
/// `branch <id> parent <vertices>` / `branch <id> child <vertices> at
/// <parent-vertex>`.
pub fn save_topology(topo: &BdloTopology, path: &Path) -> SimResult<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{TOPOLOGY_MAGIC}");
    for b in topo.branches() {
        match b.kind {
            BranchKind::Parent => {
                let _ = writeln!(out, "branch {} parent {}", b.id, b.vertex_count);
            }
            BranchKind::Child => {
                let anchor = b.junction_parent_vertex.unwrap_or_default();
                let _ = writeln!(out, "branch {} child {} at {anchor}", b.id, b.vertex_count);
            }
        }
    }
    write_string(path, &out)
}

pub fn load_topology(path: &Path) -> SimResult<BdloTopology> {
    let text = read_to_string(path)?;
    let mut lines = content_lines(&text).map(|(n, l)| (n, l.to_string()));
    expect_header(path, &mut lines, TOPOLOGY_MAGIC)?;
    let mut specs = Vec::new();
    for (n, line) in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["branch", id, "parent", count] => {
                specs.push(BranchSpec::parent(*id, parse_usize(path, n, count, "vertex count")?));
            }
            ["branch", id, "child", count, "at", anchor] => {
                specs.push(BranchSpec::child(
                    *id,
                    parse_usize(path, n, count, "vertex count")?,
                    parse_usize(path, n, anchor, "junction vertex")?,
                ));
            }
            _ => return Err(schema(path, n, format!("unrecognized topology record '{line}'"))),
        }
    }
    BdloTopology::build(specs)
}

// ---------------------------------------------------------------------
// Trajectory + inputs files
// ---------------------------------------------------------------------

/// A recorded rollout: uniformly spaced position frames plus the
/// per-frame grasp targets that produced them.
///
/// `inputs` is aligned with `frames`: `inputs[t]` holds the pin targets
/// applied during the step that advances frame `t` to frame `t+1` (the
/// row aligned with the final frame is carried for shape uniformity and
/// is never consumed). The split fraction partitions the steps into a
/// leading training range and a trailing evaluation range.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub dt: f64,
    pub topology_hash: u64,
    pub train_fraction: f64,
    /// `[frame][branch][vertex]` positions.
    pub frames: Vec<Vec<Vec<Vector3<f64>>>>,
    /// `[frame][pin]` grasp targets.
    pub inputs: Vec<Vec<Vector3<f64>>>,
}

impl TrajectoryDataset {
    /// The step-driving input rows (one per transition).
    pub fn step_inputs(&self) -> &[Vec<Vector3<f64>>] {
        &self.inputs[..self.inputs.len().saturating_sub(1)]
    }

    pub fn step_count(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    /// Index of the first evaluation step: steps `0..k` train, `k..T`
    /// evaluate.
    pub fn split_step(&self) -> usize {
        ((self.step_count() as f64) * self.train_fraction).floor() as usize
    }

    pub fn validate_against(&self, topo: &BdloTopology) -> SimResult<()> {
        if self.topology_hash != topology_hash(topo) {
            return Err(SimError::Shape(
                "trajectory was recorded for a different topology (hash mismatch)".into(),
            ));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != topo.branch_count() {
                return Err(SimError::Shape(format!(
                    "frame {t} has {} branches, topology has {}",
                    frame.len(),
                    topo.branch_count()
                )));
            }
            for (b, xb) in frame.iter().enumerate() {
                if xb.len() != topo.branch(b).vertex_count {
                    return Err(SimError::Shape(format!(
                        "frame {t} branch {b} has {} vertices, topology has {}",
                        xb.len(),
                        topo.branch(b).vertex_count
                    )));
                }
            }
        }
        if self.inputs.len() != self.frames.len() {
            return Err(SimError::Shape(format!(
                "{} input rows for {} frames",
                self.inputs.len(),
                self.frames.len()
            )));
        }
        Ok(())
    }
}

const TRAJECTORY_MAGIC: &str = "bdlo-trajectory v1";
const INPUTS_MAGIC: &str = "bdlo-inputs v1";

/// Write the trajectory and its parallel inputs file.
pub fn save_dataset(ds: &TrajectoryDataset, traj_path: &Path, inputs_path: &Path) -> SimResult<()> {
    for (t, frame) in ds.frames.iter().enumerate() {
        for xb in frame {
            for x in xb {
                if !x.iter().all(|c| c.is_finite()) {
                    return Err(SimError::Numeric(format!(
                        "frame {t} contains a non-finite position"
                    )));
                }
            }
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "{TRAJECTORY_MAGIC}");
    let _ = writeln!(out, "dt {}", ds.dt);
    let _ = writeln!(out, "topology-hash {:016x}", ds.topology_hash);
    let _ = writeln!(out, "split {}", ds.train_fraction);
    if let Some(first) = ds.frames.first() {
        let _ = writeln!(out, "branches {}", first.len());
        for (b, xb) in first.iter().enumerate() {
            let _ = writeln!(out, "branch {b} {}", xb.len());
        }
    } else {
        let _ = writeln!(out, "branches 0");
    }
    let _ = writeln!(out, "frames {}", ds.frames.len());
    let _ = writeln!(out, "columns frame branch vertex x y z");
    for (t, frame) in ds.frames.iter().enumerate() {
        for (b, xb) in frame.iter().enumerate() {
            for (i, x) in xb.iter().enumerate() {
                let _ = writeln!(out, "{t} {b} {i} {} {} {}", x.x, x.y, x.z);
            }
        }
    }
    write_string(traj_path, &out)?;

    let pins = ds.inputs.first().map_or(0, Vec::len);
    let mut out = String::new();
    let _ = writeln!(out, "{INPUTS_MAGIC}");
    let _ = writeln!(out, "dt {}", ds.dt);
    let _ = writeln!(out, "topology-hash {:016x}", ds.topology_hash);
    let _ = writeln!(out, "frames {}", ds.inputs.len());
    let _ = writeln!(out, "pins {pins}");
    let _ = writeln!(out, "columns frame pin x y z");
    for (t, row) in ds.inputs.iter().enumerate() {
        if row.len() != pins {
            return Err(SimError::Shape(format!(
                "input row {t} has {} targets, expected {pins}",
                row.len()
            )));
        }
        for (p, x) in row.iter().enumerate() {
            let _ = writeln!(out, "{t} {p} {} {} {}", x.x, x.y, x.z);
        }
    }
    write_string(inputs_path, &out)
}

struct HeaderValue {
    line: usize,
    tokens: Vec<String>,
}

/// Pull `key value...` header lines until the `columns` line (consumed).
fn parse_header(
    path: &Path,
    lines: &mut std::iter::Peekable<impl Iterator<Item = (usize, String)>>,
    expected_columns: &str,
) -> SimResult<std::collections::HashMap<String, HeaderValue>> {
    let mut header = std::collections::HashMap::new();
    loop {
        let Some((n, line)) = lines.next() else {
            return Err(schema(path, 1, "truncated header: no columns line"));
        };
        let mut t = line.split_whitespace();
        let key = t.next().unwrap_or_default().to_string();
        let rest: Vec<String> = t.map(str::to_string).collect();
        if key == "columns" {
            if rest.join(" ") != expected_columns {
                return Err(schema(
                    path,
                    n,
                    format!("expected 'columns {expected_columns}'"),
                ));
            }
            return Ok(header);
        }
        header.insert(key, HeaderValue { line: n, tokens: rest });
    }
}

fn header_scalar<'a>(
    path: &Path,
    header: &'a std::collections::HashMap<String, HeaderValue>,
    key: &str,
) -> SimResult<(usize, &'a str)> {
    let v = header
        .get(key)
        .ok_or_else(|| schema(path, 1, format!("missing header line '{key}'")))?;
    if v.tokens.len() != 1 {
        return Err(schema(path, v.line, format!("header '{key}' takes one value")));
    }
    Ok((v.line, &v.tokens[0]))
}

pub fn load_dataset(traj_path: &Path, inputs_path: &Path) -> SimResult<TrajectoryDataset> {
    // Trajectory file.
    let text = read_to_string(traj_path)?;
    let mut lines = content_lines(&text)
        .map(|(n, l)| (n, l.to_string()))
        .peekable();
    expect_header(traj_path, &mut lines, TRAJECTORY_MAGIC)?;
    let header = parse_header(traj_path, &mut lines, "frame branch vertex x y z")?;

    let (n, v) = header_scalar(traj_path, &header, "dt")?;
    let dt = parse_f64(traj_path, n, v, "dt")?;
    if dt <= 0.0 {
        return Err(schema(traj_path, n, format!("dt must be positive, got {dt}")));
    }
    let (n, v) = header_scalar(traj_path, &header, "topology-hash")?;
    let topology_hash_value = u64::from_str_radix(v, 16)
        .map_err(|_| schema(traj_path, n, format!("bad topology hash '{v}'")))?;
    let train_fraction = match header.get("split") {
        Some(hv) if hv.tokens.len() == 1 => {
            let f = parse_f64(traj_path, hv.line, &hv.tokens[0], "split fraction")?;
            if !(0.0..=1.0).contains(&f) {
                return Err(schema(traj_path, hv.line, "split fraction must lie in [0, 1]"));
            }
            f
        }
        Some(hv) => return Err(schema(traj_path, hv.line, "header 'split' takes one value")),
        None => 0.75,
    };
    let (n, v) = header_scalar(traj_path, &header, "frames")?;
    let frame_count = parse_usize(traj_path, n, v, "frame count")?;
    let (n, v) = header_scalar(traj_path, &header, "branches")?;
    let branch_count = parse_usize(traj_path, n, v, "branch count")?;
    // Branch shape lines are `branch <index> <count>`; the generic header
    // map collapses repeated keys, so scan the raw header text for them.
    let mut branch_len = vec![None::<usize>; branch_count];
    for (line_no, line) in content_lines(&text) {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.first() == Some(&"branch") {
            if t.len() != 3 {
                return Err(schema(traj_path, line_no, "branch lines are 'branch <index> <vertices>'"));
            }
            let b = parse_usize(traj_path, line_no, t[1], "branch index")?;
            if b >= branch_count {
                return Err(schema(traj_path, line_no, format!("branch index {b} out of range")));
            }
            branch_len[b] = Some(parse_usize(traj_path, line_no, t[2], "vertex count")?);
        }
        if t.first() == Some(&"columns") {
            break;
        }
    }
    let branch_len: Vec<usize> = branch_len
        .into_iter()
        .enumerate()
        .map(|(b, l)| l.ok_or_else(|| schema(traj_path, 1, format!("missing shape line for branch {b}"))))
        .collect::<SimResult<_>>()?;

    let mut frames =
        vec![branch_len.iter().map(|&l| vec![Vector3::zeros(); l]).collect::<Vec<_>>(); frame_count];
    let mut seen = vec![branch_len.iter().map(|&l| vec![false; l]).collect::<Vec<_>>(); frame_count];
    for (line_no, line) in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 6 {
            return Err(schema(
                traj_path,
                line_no,
                format!("trajectory records have 6 fields, found {}", t.len()),
            ));
        }
        let f = parse_usize(traj_path, line_no, t[0], "frame index")?;
        let b = parse_usize(traj_path, line_no, t[1], "branch index")?;
        let i = parse_usize(traj_path, line_no, t[2], "vertex index")?;
        if f >= frame_count {
            return Err(schema(traj_path, line_no, format!("frame {f} out of range (header declares {frame_count})")));
        }
        if b >= branch_count || i >= branch_len[b] {
            return Err(schema(
                traj_path,
                line_no,
                format!("frame {f}: vertex {i} of branch {b} does not exist"),
            ));
        }
        if seen[f][b][i] {
            return Err(schema(traj_path, line_no, format!("duplicate record for frame {f} branch {b} vertex {i}")));
        }
        seen[f][b][i] = true;
        frames[f][b][i] = Vector3::new(
            parse_f64(traj_path, line_no, t[3], "x")?,
            parse_f64(traj_path, line_no, t[4], "y")?,
            parse_f64(traj_path, line_no, t[5], "z")?,
        );
    }
    for (f, frame) in seen.iter().enumerate() {
        for (b, sb) in frame.iter().enumerate() {
            if let Some(i) = sb.iter().position(|&s| !s) {
                return Err(schema(
                    traj_path,
                    1,
                    format!("frame {f} is missing vertex {i} of branch {b}"),
                ));
            }
        }
    }

    // Inputs file.
    let text = read_to_string(inputs_path)?;
    let mut lines = content_lines(&text)
        .map(|(n, l)| (n, l.to_string()))
        .peekable();
    expect_header(inputs_path, &mut lines, INPUTS_MAGIC)?;
    let header = parse_header(inputs_path, &mut lines, "frame pin x y z")?;
    let (n, v) = header_scalar(inputs_path, &header, "dt")?;
    let inputs_dt = parse_f64(inputs_path, n, v, "dt")?;
    if inputs_dt != dt {
        return Err(schema(
            inputs_path,
            n,
            format!("inputs dt {inputs_dt} does not match trajectory dt {dt}"),
        ));
    }
    let (n, v) = header_scalar(inputs_path, &header, "topology-hash")?;
    let h = u64::from_str_radix(v, 16)
        .map_err(|_| schema(inputs_path, n, format!("bad topology hash '{v}'")))?;
    if h != topology_hash_value {
        return Err(schema(inputs_path, n, "inputs topology hash does not match the trajectory"));
    }
    let (n, v) = header_scalar(inputs_path, &header, "frames")?;
    let input_frames = parse_usize(inputs_path, n, v, "frame count")?;
    if input_frames != frame_count {
        return Err(schema(
            inputs_path,
            n,
            format!("inputs cover {input_frames} frames, trajectory has {frame_count}"),
        ));
    }
    let (n, v) = header_scalar(inputs_path, &header, "pins")?;
    let pins = parse_usize(inputs_path, n, v, "pin count")?;

    let mut inputs = vec![vec![Vector3::zeros(); pins]; frame_count];
    let mut seen = vec![vec![false; pins]; frame_count];
    for (line_no, line) in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 5 {
            return Err(schema(
                inputs_path,
                line_no,
                format!("input records have 5 fields, found {}", t.len()),
            ));
        }
        let f = parse_usize(inputs_path, line_no, t[0], "frame index")?;
        let p = parse_usize(inputs_path, line_no, t[1], "pin index")?;
        if f >= frame_count || p >= pins {
            return Err(schema(inputs_path, line_no, format!("record ({f}, {p}) out of range")));
        }
        if seen[f][p] {
            return Err(schema(inputs_path, line_no, format!("duplicate record for frame {f} pin {p}")));
        }
        seen[f][p] = true;
        inputs[f][p] = Vector3::new(
            parse_f64(inputs_path, line_no, t[2], "x")?,
            parse_f64(inputs_path, line_no, t[3], "y")?,
            parse_f64(inputs_path, line_no, t[4], "z")?,
        );
    }
    for (f, row) in seen.iter().enumerate() {
        if let Some(p) = row.iter().position(|&s| !s) {
            return Err(schema(inputs_path, 1, format!("frame {f} is missing pin {p}")));
        }
    }

    Ok(TrajectoryDataset {
        dt,
        topology_hash: topology_hash_value,
        train_fraction,
        frames,
        inputs,
    })
}

// ---------------------------------------------------------------------
// Parameter files
// ---------------------------------------------------------------------

/// Per-branch uniform material as stored in a parameter file.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParamEntry {
    pub id: String,
    /// Mass per vertex (kg).
    pub mass: f64,
    /// Diagonal bending stiffness entries.
    pub bend: (f64, f64),
    pub twist: f64,
    pub inertia_scale: f64,
}

impl BranchParamEntry {
    /// Entry with the engine's default material under the given id.
    pub fn default_for(id: impl Into<String>) -> Self {
        let d = UniformBranchMaterial::default();
        BranchParamEntry {
            id: id.into(),
            mass: d.mass_per_vertex,
            bend: d.bend_stiffness,
            twist: d.twist_stiffness,
            inertia_scale: d.inertia_scale,
        }
    }
}

const PARAMS_MAGIC: &str = "bdlo-params v1";

pub fn save_params(entries: &[BranchParamEntry], path: &Path) -> SimResult<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{PARAMS_MAGIC}");
    for e in entries {
        let _ = writeln!(
            out,
            "branch {} mass {} bend {} {} twist {} inertia-scale {}",
            e.id, e.mass, e.bend.0, e.bend.1, e.twist, e.inertia_scale
        );
    }
    write_string(path, &out)
}

pub fn load_params(path: &Path) -> SimResult<Vec<BranchParamEntry>> {
    let text = read_to_string(path)?;
    let mut lines = content_lines(&text).map(|(n, l)| (n, l.to_string()));
    expect_header(path, &mut lines, PARAMS_MAGIC)?;
    let mut entries = Vec::new();
    for (n, line) in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["branch", id, "mass", m, "bend", b1, b2, "twist", tw, "inertia-scale", is] => {
                let entry = BranchParamEntry {
                    id: id.to_string(),
                    mass: parse_f64(path, n, m, "vertex mass")?,
                    bend: (
                        parse_f64(path, n, b1, "bend eigenvalue")?,
                        parse_f64(path, n, b2, "bend eigenvalue")?,
                    ),
                    twist: parse_f64(path, n, tw, "twist stiffness")?,
                    inertia_scale: parse_f64(path, n, is, "inertia scale")?,
                };
                let positive = entry.mass > 0.0
                    && entry.bend.0 > 0.0
                    && entry.bend.1 > 0.0
                    && entry.twist > 0.0
                    && entry.inertia_scale > 0.0;
                if !positive {
                    return Err(schema(path, n, "parameter values must be positive"));
                }
                entries.push(entry);
            }
            _ => return Err(schema(path, n, format!("unrecognized parameter record '{line}'"))),
        }
    }
    Ok(entries)
}

/// Build full per-edge materials from parameter-file entries and a rest
/// shape. Entries must list every branch of the topology, in order, with
/// matching ids.
pub fn material_from_entries(
    topo: &BdloTopology,
    rest: &[Vec<Vector3<f64>>],
    entries: &[BranchParamEntry],
) -> SimResult<MaterialParams> {
    if entries.len() != topo.branch_count() {
        return Err(SimError::Params(format!(
            "{} parameter entries for a {}-branch topology",
            entries.len(),
            topo.branch_count()
        )));
    }
    let specs: Vec<UniformBranchMaterial> = entries
        .iter()
        .zip(topo.branches())
        .map(|(e, b)| {
            if e.id != b.id {
                return Err(SimError::Params(format!(
                    "parameter entry '{}' does not match branch '{}'",
                    e.id, b.id
                )));
            }
            Ok(UniformBranchMaterial {
                mass_per_vertex: e.mass,
                bend_stiffness: e.bend,
                twist_stiffness: e.twist,
                inertia_scale: e.inertia_scale,
            })
        })
        .collect::<SimResult<_>>()?;
    MaterialParams::uniform(topo, rest, &specs)
}

/// Summarize fitted materials back into file entries: per-branch mean
/// stiffness values plus mass/inertia scales measured against the base
/// the entries describe.
pub fn entries_from_params(
    topo: &BdloTopology,
    base_entries: &[BranchParamEntry],
    current: &MaterialParams,
    base: &MaterialParams,
) -> SimResult<Vec<BranchParamEntry>> {
    if base_entries.len() != topo.branch_count() {
        return Err(SimError::Params(format!(
            "{} base entries for a {}-branch topology",
            base_entries.len(),
            topo.branch_count()
        )));
    }
    let all = ParamSpec {
        mass: true,
        bend: true,
        twist: true,
        inertia: true,
    };
    let pv = ParamVector::measure(current, base, all);
    let dims = all.dims_per_branch();
    Ok(base_entries
        .iter()
        .enumerate()
        .map(|(b, e)| {
            let p = &pv.packed()[b * dims..(b + 1) * dims];
            BranchParamEntry {
                id: e.id.clone(),
                mass: e.mass * p[0].exp(),
                bend: (p[1].exp(), p[2].exp()),
                twist: p[3].exp(),
                inertia_scale: e.inertia_scale * p[4].exp(),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------
// Residual checkpoint files
// ---------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "bdlo-residual-checkpoint v1";

fn write_floats(out: &mut String, key: &str, values: impl Iterator<Item = f64>) {
    let _ = write!(out, "{key}");
    for v in values {
        let _ = write!(out, " {v}");
    }
    let _ = writeln!(out);
}

pub fn save_checkpoint(net: &ResidualNet, topo: &BdloTopology, path: &Path) -> SimResult<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "topology-hash {:016x}", topology_hash(topo));
    let _ = writeln!(out, "nodes {}", net.node_count());
    let _ = writeln!(out, "feature-dim {FEATURE_DIM}");
    let _ = writeln!(out, "hidden {HIDDEN_WIDTH}");
    let mask_line: Vec<String> = (0..net.node_count())
        .map(|i| if net.mask[i] != 0.0 { "1".into() } else { "0".into() })
        .collect();
    let _ = writeln!(out, "mask {}", mask_line.join(" "));
    write_floats(&mut out, "feat-mean", net.feat_mean.iter().copied());
    write_floats(&mut out, "feat-std", net.feat_std.iter().copied());
    write_floats(&mut out, "w1", net.w1.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
    write_floats(&mut out, "b1", net.b1.iter().copied());
    write_floats(&mut out, "w2", net.w2.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
    write_floats(&mut out, "b2", net.b2.iter().copied());
    write_string(path, &out)
}

pub fn load_checkpoint(path: &Path, topo: &BdloTopology) -> SimResult<ResidualNet> {
    let text = read_to_string(path)?;
    let mut lines = content_lines(&text).map(|(n, l)| (n, l.to_string()));
    expect_header(path, &mut lines, CHECKPOINT_MAGIC)?;
    let mut fields: std::collections::HashMap<String, (usize, Vec<String>)> =
        std::collections::HashMap::new();
    for (n, line) in lines {
        let mut t = line.split_whitespace();
        let key = t.next().unwrap_or_default().to_string();
        if fields.insert(key.clone(), (n, t.map(str::to_string).collect())).is_some() {
            return Err(schema(path, n, format!("duplicate field '{key}'")));
        }
    }
    let scalar = |key: &str| -> SimResult<(usize, String)> {
        let (n, v) = fields
            .get(key)
            .ok_or_else(|| schema(path, 1, format!("missing field '{key}'")))?;
        if v.len() != 1 {
            return Err(schema(path, *n, format!("field '{key}' takes one value")));
        }
        Ok((*n, v[0].clone()))
    };

    let (n, v) = scalar("topology-hash")?;
    let h = u64::from_str_radix(&v, 16)
        .map_err(|_| schema(path, n, format!("bad topology hash '{v}'")))?;
    if h != topology_hash(topo) {
        return Err(schema(path, n, "checkpoint was trained for a different topology"));
    }
    let (n, v) = scalar("nodes")?;
    let nodes = parse_usize(path, n, &v, "node count")?;
    if nodes != topo.total_vertices() {
        return Err(schema(path, n, format!("checkpoint has {nodes} nodes, topology has {}", topo.total_vertices())));
    }
    let (n, v) = scalar("feature-dim")?;
    if parse_usize(path, n, &v, "feature dimension")? != FEATURE_DIM {
        return Err(schema(path, n, format!("unsupported feature dimension {v} (expected {FEATURE_DIM})")));
    }
    let (n, v) = scalar("hidden")?;
    if parse_usize(path, n, &v, "hidden width")? != HIDDEN_WIDTH {
        return Err(schema(path, n, format!("unsupported hidden width {v} (expected {HIDDEN_WIDTH})")));
    }

    let (n, mask_tokens) = fields
        .get("mask")
        .map(|(n, v)| (*n, v.clone()))
        .ok_or_else(|| schema(path, 1, "missing field 'mask'"))?;
    if mask_tokens.len() != nodes {
        return Err(schema(path, n, format!("mask lists {} nodes, expected {nodes}", mask_tokens.len())));
    }
    let live: Vec<bool> = mask_tokens
        .iter()
        .map(|t| match t.as_str() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(schema(path, n, format!("mask entries are 0 or 1, found '{other}'"))),
        })
        .collect::<SimResult<_>>()?;

    let floats = |key: &str, expect: usize| -> SimResult<Vec<f64>> {
        let (n, v) = fields
            .get(key)
            .ok_or_else(|| schema(path, 1, format!("missing field '{key}'")))?;
        if v.len() != expect {
            return Err(schema(path, *n, format!("field '{key}' lists {} values, expected {expect}", v.len())));
        }
        v.iter().map(|t| parse_f64(path, *n, t, key)).collect()
    };

    let mut net = ResidualNet::with_mask(topo, &live, 0);
    net.feat_mean = DVector::from_vec(floats("feat-mean", FEATURE_DIM)?);
    net.feat_std = DVector::from_vec(floats("feat-std", FEATURE_DIM)?);
    let w1 = floats("w1", HIDDEN_WIDTH * FEATURE_DIM)?;
    for r in 0..HIDDEN_WIDTH {
        for c in 0..FEATURE_DIM {
            net.w1[(r, c)] = w1[r * FEATURE_DIM + c];
        }
    }
    net.b1 = DVector::from_vec(floats("b1", HIDDEN_WIDTH)?);
    let w2 = floats("w2", 3 * HIDDEN_WIDTH)?;
    for r in 0..3 {
        for c in 0..HIDDEN_WIDTH {
            net.w2[(r, c)] = w2[r * HIDDEN_WIDTH + c];
        }
    }
    net.b2 = DVector::from_vec(floats("b2", 3)?);
    Ok(net)
}

// ---------------------------------------------------------------------
// Motion scripts
// ---------------------------------------------------------------------

/// How a waypoint reaches the next one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    /// Linear interpolation toward the next waypoint.
    Linear,
    /// Hold this position until the next waypoint time.
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub time: f64,
    pub position: Vector3<f64>,
    pub mode: InterpMode,
}

/// Declarative grasp-motion program: pinned vertices with waypoint
/// schedules plus static twist clamps.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionScript {
    pins: Vec<(Pin, Vec<Waypoint>)>,
    clamps: Vec<EdgeClamp>,
}

const MOTION_MAGIC: &str = "bdlo-motion v1";

impl MotionScript {
    pub fn new(pins: Vec<(Pin, Vec<Waypoint>)>, clamps: Vec<EdgeClamp>) -> SimResult<Self> {
        for (pin, wps) in &pins {
            if wps.is_empty() {
                return Err(SimError::Params(format!(
                    "pin at vertex {} of branch {} has no waypoints",
                    pin.vertex, pin.branch
                )));
            }
            for w in wps.windows(2) {
                if w[1].time <= w[0].time {
                    return Err(SimError::Params(
                        "waypoint times must strictly increase".into(),
                    ));
                }
            }
        }
        Ok(MotionScript { pins, clamps })
    }

    pub fn grasp(&self) -> GraspSpec {
        GraspSpec {
            pins: self.pins.iter().map(|(p, _)| *p).collect(),
            clamps: self.clamps.clone(),
        }
    }

    /// Target of every pin at absolute time `t`: before the first
    /// waypoint the first position holds; after the last, the last.
    pub fn targets_at(&self, t: f64) -> Vec<Vector3<f64>> {
        self.pins
            .iter()
            .map(|(_, wps)| {
                if t <= wps[0].time {
                    return wps[0].position;
                }
                for w in wps.windows(2) {
                    if t <= w[1].time {
                        return match w[0].mode {
                            InterpMode::Hold => w[0].position,
                            InterpMode::Linear => {
                                let s = (t - w[0].time) / (w[1].time - w[0].time);
                                w[0].position + (w[1].position - w[0].position) * s
                            }
                        };
                    }
                }
                wps.last().unwrap().position
            })
            .collect()
    }

    /// Per-step input rows: the step advancing frame `k` samples the
    /// script at the step's end time `(k+1)·dt`.
    pub fn build_inputs(&self, dt: f64, steps: usize) -> Vec<Vec<Vector3<f64>>> {
        (0..steps)
            .map(|k| self.targets_at((k + 1) as f64 * dt))
            .collect()
    }

    pub fn save(&self, path: &Path) -> SimResult<()> {
        let mut out = String::new();
        let _ = writeln!(out, "{MOTION_MAGIC}");
        for (pin, wps) in &self.pins {
            let _ = writeln!(out, "pin {} {}", pin.branch, pin.vertex);
            for w in wps {
                let mode = match w.mode {
                    InterpMode::Linear => "linear",
                    InterpMode::Hold => "hold",
                };
                let _ = writeln!(
                    out,
                    "at {} {} {} {} {mode}",
                    w.time, w.position.x, w.position.y, w.position.z
                );
            }
        }
        for c in &self.clamps {
            let _ = writeln!(out, "clamp {} {} {}", c.branch, c.edge, c.theta);
        }
        write_string(path, &out)
    }

    pub fn load(path: &Path) -> SimResult<Self> {
        let text = read_to_string(path)?;
        let mut lines = content_lines(&text).map(|(n, l)| (n, l.to_string()));
        expect_header(path, &mut lines, MOTION_MAGIC)?;
        let mut pins: Vec<(Pin, Vec<Waypoint>)> = Vec::new();
        let mut clamps = Vec::new();
        for (n, line) in lines {
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.as_slice() {
                ["pin", branch, vertex] => {
                    pins.push((
                        Pin {
                            branch: parse_usize(path, n, branch, "branch index")?,
                            vertex: parse_usize(path, n, vertex, "vertex index")?,
                        },
                        Vec::new(),
                    ));
                }
                ["at", time, x, y, z, mode] => {
                    let Some(last) = pins.last_mut() else {
                        return Err(schema(path, n, "waypoint before any pin line"));
                    };
                    let mode = match *mode {
                        "linear" => InterpMode::Linear,
                        "hold" => InterpMode::Hold,
                        other => {
                            return Err(schema(path, n, format!("unknown interpolation mode '{other}'")))
                        }
                    };
                    last.1.push(Waypoint {
                        time: parse_f64(path, n, time, "waypoint time")?,
                        position: Vector3::new(
                            parse_f64(path, n, x, "x")?,
                            parse_f64(path, n, y, "y")?,
                            parse_f64(path, n, z, "z")?,
                        ),
                        mode,
                    });
                }
                ["clamp", branch, edge, theta] => {
                    clamps.push(EdgeClamp {
                        branch: parse_usize(path, n, branch, "branch index")?,
                        edge: parse_usize(path, n, edge, "edge index")?,
                        theta: parse_f64(path, n, theta, "clamp angle")?,
                    });
                }
                _ => return Err(schema(path, n, format!("unrecognized motion record '{line}'"))),
            }
        }
        MotionScript::new(pins, clamps)
    }
}

// ---------------------------------------------------------------------
// Synthetic data, canonical geometry, metrics
// ---------------------------------------------------------------------

/// A simple rest shape for a topology: the parent runs along +x with the
/// given spacing and each child leaves its junction along a direction
/// cycling through +y, −y, +z, −z.
pub fn canonical_rest(topo: &BdloTopology, spacing: f64) -> Vec<Vec<Vector3<f64>>> {
    let dirs = [
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, 0.0, -1.0),
    ];
    let parent: Vec<Vector3<f64>> = (0..topo.parent().vertex_count)
        .map(|i| Vector3::new(spacing * i as f64, 0.0, 0.0))
        .collect();
    let mut rest = vec![parent];
    for (k, j) in topo.junctions().iter().enumerate() {
        let anchor = rest[0][j.parent_vertex];
        let dir = dirs[k % dirs.len()];
        let n = topo.branch(j.child_branch).vertex_count;
        rest.push((0..n).map(|i| anchor + dir * (spacing * i as f64)).collect());
    }
    rest
}

/// Roll out the physics model under a motion script and record a dataset,
/// optionally adding Gaussian measurement noise to the stored positions.
/// Noise is drawn per frame from a counter-based stream (`seed` selects
/// the generator, the frame index selects the stream), so each frame's
/// noise is reproducible independent of evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic(
    topo: &BdloTopology,
    params: &MaterialParams,
    rest: &[Vec<Vector3<f64>>],
    script: &MotionScript,
    steps: usize,
    noise_sigma: f64,
    seed: u64,
    cfg: &StepConfig,
) -> SimResult<TrajectoryDataset> {
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(SimError::Params(format!(
            "noise sigma must be non-negative and finite, got {noise_sigma}"
        )));
    }
    let grasp = script.grasp();
    grasp.validate(topo)?;
    let cfg = StepConfig {
        use_residual: false,
        ..cfg.clone()
    };
    let mut state = BdloState::at_rest(topo, rest)?;
    let step_inputs = script.build_inputs(cfg.dt, steps);
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(rest.to_vec());
    let mut stepper = BatchedStepper::new(topo);
    for targets in &step_inputs {
        stepper.step(&mut state, &grasp, targets, topo, params, &cfg, None)?;
        frames.push(state.x.clone());
    }

    if noise_sigma > 0.0 {
        for (t, frame) in frames.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            for xb in frame.iter_mut() {
                for x in xb.iter_mut() {
                    // Box–Muller from two uniform draws.
                    for c in 0..3 {
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        x[c] += noise_sigma * (-2.0 * u1.ln()).sqrt() * u2.cos();
                    }
                }
            }
        }
    }

    let mut inputs = step_inputs;
    let last = inputs.last().cloned().unwrap_or_else(|| script.targets_at(0.0));
    inputs.push(last);
    Ok(TrajectoryDataset {
        dt: cfg.dt,
        topology_hash: topology_hash(topo),
        train_fraction: 0.75,
        frames,
        inputs,
    })
}

/// Root mean square of the per-vertex Euclidean error over the first
/// `horizon` steps (frames 1..=horizon; frame 0 is the shared start).
pub fn rmse(
    predicted: &[Vec<Vec<Vector3<f64>>>],
    ground_truth: &[Vec<Vec<Vector3<f64>>>],
    horizon: usize,
) -> SimResult<f64> {
    if predicted.len() <= horizon || ground_truth.len() <= horizon {
        return Err(SimError::Shape(format!(
            "horizon {horizon} needs {} frames; have {} predicted and {} ground truth",
            horizon + 1,
            predicted.len(),
            ground_truth.len()
        )));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for t in 1..=horizon {
        let (p, g) = (&predicted[t], &ground_truth[t]);
        if p.len() != g.len() {
            return Err(SimError::Shape(format!(
                "frame {t}: {} predicted branches vs {} ground truth",
                p.len(),
                g.len()
            )));
        }
        for (pb, gb) in p.iter().zip(g) {
            if pb.len() != gb.len() {
                return Err(SimError::Shape(format!(
                    "frame {t}: branch vertex counts differ ({} vs {})",
                    pb.len(),
                    gb.len()
                )));
            }
            for (pv, gv) in pb.iter().zip(gb) {
                sq += (pv - gv).norm_squared();
                count += 1;
            }
        }
    }
    Ok((sq / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rod::UniformBranchMaterial;
    use crate::topology::BranchSpec;
    use tempfile::TempDir;

    fn harness_topology() -> BdloTopology {
        BdloTopology::build(vec![
            BranchSpec::parent("spine", 6),
            BranchSpec::child("limb-a", 4, 2),
            BranchSpec::child("limb-b", 3, 4),
        ])
        .unwrap()
    }

    #[test]
    fn topology_file_round_trips() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("harness.topo");
        let topo = harness_topology();
        save_topology(&topo, &path).unwrap();
        let loaded = load_topology(&path).unwrap();
        assert_eq!(topology_hash(&loaded), topology_hash(&topo));
        assert_eq!(loaded.branch_count(), 3);
        assert_eq!(loaded.branch(1).junction_parent_vertex, Some(2));
    }

    #[test]
    fn topology_hash_distinguishes_structures() {
        let a = harness_topology();
        let b = BdloTopology::build(vec![
            BranchSpec::parent("spine", 6),
            BranchSpec::child("limb-a", 4, 3), // moved junction
            BranchSpec::child("limb-b", 3, 4),
        ])
        .unwrap();
        assert_ne!(topology_hash(&a), topology_hash(&b));
    }

    fn tiny_dataset() -> (BdloTopology, TrajectoryDataset) {
        let topo = harness_topology();
        let rest = canonical_rest(&topo, 0.1);
        let params =
            MaterialParams::uniform(&topo, &rest, &[UniformBranchMaterial::default()]).unwrap();
        let script = MotionScript::new(
            vec![(
                Pin { branch: 0, vertex: 0 },
                vec![
                    Waypoint {
                        time: 0.0,
                        position: rest[0][0],
                        mode: InterpMode::Linear,
                    },
                    Waypoint {
                        time: 0.1,
                        position: rest[0][0] + Vector3::new(0.0, 0.0, 0.02),
                        mode: InterpMode::Hold,
                    },
                ],
            )],
            vec![],
        )
        .unwrap();
        let ds = generate_synthetic(
            &topo,
            &params,
            &rest,
            &script,
            12,
            0.0,
            7,
            &StepConfig::default(),
        )
        .unwrap();
        (topo, ds)
    }

    #[test]
    fn dataset_round_trip_is_bit_identical() {
        let (topo, ds) = tiny_dataset();
        ds.validate_against(&topo).unwrap();
        let dir = TempDir::new().unwrap();
        let traj = dir.path().join("run.traj");
        let inputs = dir.path().join("run.inputs");
        save_dataset(&ds, &traj, &inputs).unwrap();
        let loaded = load_dataset(&traj, &inputs).unwrap();
        assert_eq!(loaded, ds);
        // Resaving the loaded dataset reproduces the files byte for byte.
        let traj2 = dir.path().join("run2.traj");
        let inputs2 = dir.path().join("run2.inputs");
        save_dataset(&loaded, &traj2, &inputs2).unwrap();
        assert_eq!(
            std::fs::read(&traj).unwrap(),
            std::fs::read(&traj2).unwrap()
        );
        assert_eq!(
            std::fs::read(&inputs).unwrap(),
            std::fs::read(&inputs2).unwrap()
        );
    }

    #[test]
    fn schema_errors_carry_the_failing_line() {
        let (_, ds) = tiny_dataset();
        let dir = TempDir::new().unwrap();
        let traj = dir.path().join("run.traj");
        let inputs = dir.path().join("run.inputs");
        save_dataset(&ds, &traj, &inputs).unwrap();

        // Corrupt one record: vertex index out of range.
        let text = std::fs::read_to_string(&traj).unwrap();
        let broken: Vec<String> = text
            .lines()
            .map(|l| {
                if l.starts_with("3 0 2 ") {
                    l.replacen("3 0 2 ", "3 0 99 ", 1)
                } else {
                    l.to_string()
                }
            })
            .collect();
        std::fs::write(&traj, broken.join("\n")).unwrap();
        let err = load_dataset(&traj, &inputs).unwrap_err();
        match err {
            SimError::Schema { line, ref message, .. } => {
                assert!(message.contains("vertex 99"), "{message}");
                assert!(line > 0);
            }
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn missing_vertex_record_is_reported() {
        let (_, ds) = tiny_dataset();
        let dir = TempDir::new().unwrap();
        let traj = dir.path().join("run.traj");
        let inputs = dir.path().join("run.inputs");
        save_dataset(&ds, &traj, &inputs).unwrap();
        let text = std::fs::read_to_string(&traj).unwrap();
        let dropped: Vec<&str> = text.lines().filter(|l| !l.starts_with("5 1 2 ")).collect();
        std::fs::write(&traj, dropped.join("\n")).unwrap();
        let err = load_dataset(&traj, &inputs).unwrap_err();
        assert!(err.to_string().contains("missing vertex 2"), "{err}");
    }

    #[test]
    fn synthetic_regeneration_is_deterministic() {
        let (_, a) = tiny_dataset();
        let (_, b) = tiny_dataset();
        assert_eq!(a, b);
    }

    #[test]
    fn regenerating_without_noise_matches_resimulation() {
        let (topo, ds) = tiny_dataset();
        let rest = ds.frames[0].clone();
        let params =
            MaterialParams::uniform(&topo, &rest, &[UniformBranchMaterial::default()]).unwrap();
        let grasp = GraspSpec {
            pins: vec![Pin { branch: 0, vertex: 0 }],
            clamps: vec![],
        };
        let mut state = BdloState::at_rest(&topo, &rest).unwrap();
        let mut stepper = BatchedStepper::new(&topo);
        for (t, targets) in ds.step_inputs().iter().enumerate() {
            stepper
                .step(&mut state, &grasp, targets, &topo, &params, &StepConfig::default(), None)
                .unwrap();
            for b in 0..topo.branch_count() {
                for i in 0..state.x[b].len() {
                    let gt = ds.frames[t + 1][b][i];
                    assert!((state.x[b][i] - gt).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn noise_streams_are_frame_indexed() {
        let topo = harness_topology();
        let rest = canonical_rest(&topo, 0.1);
        let params =
            MaterialParams::uniform(&topo, &rest, &[UniformBranchMaterial::default()]).unwrap();
        let script = MotionScript::new(
            vec![(
                Pin { branch: 0, vertex: 0 },
                vec![Waypoint {
                    time: 0.0,
                    position: rest[0][0],
                    mode: InterpMode::Hold,
                }],
            )],
            vec![],
        )
        .unwrap();
        let cfg = StepConfig::default();
        let a = generate_synthetic(&topo, &params, &rest, &script, 6, 1e-3, 42, &cfg).unwrap();
        let b = generate_synthetic(&topo, &params, &rest, &script, 6, 1e-3, 42, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&topo, &params, &rest, &script, 6, 1e-3, 43, &cfg).unwrap();
        assert_ne!(a.frames, c.frames);
        // A longer run reproduces the shorter run's noise frame by frame.
        let d = generate_synthetic(&topo, &params, &rest, &script, 4, 1e-3, 42, &cfg).unwrap();
        for t in 0..=4 {
            assert_eq!(a.frames[t], d.frames[t]);
        }
    }

    #[test]
    fn motion_script_interpolates_and_holds() {
        let p0 = Vector3::new(0.0, 0.0, 0.0);
        let p1 = Vector3::new(0.1, 0.0, 0.0);
        let p2 = Vector3::new(0.1, 0.2, 0.0);
        let script = MotionScript::new(
            vec![(
                Pin { branch: 0, vertex: 0 },
                vec![
                    Waypoint { time: 0.0, position: p0, mode: InterpMode::Linear },
                    Waypoint { time: 1.0, position: p1, mode: InterpMode::Hold },
                    Waypoint { time: 2.0, position: p2, mode: InterpMode::Hold },
                ],
            )],
            vec![],
        )
        .unwrap();
        assert_eq!(script.targets_at(-1.0)[0], p0);
        assert!((script.targets_at(0.5)[0] - Vector3::new(0.05, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(script.targets_at(1.5)[0], p1); // hold segment
        assert_eq!(script.targets_at(5.0)[0], p2); // past the end
    }

    #[test]
    fn motion_script_file_round_trips() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("sweep.motion");
        let script = MotionScript::new(
            vec![(
                Pin { branch: 0, vertex: 5 },
                vec![
                    Waypoint {
                        time: 0.0,
                        position: Vector3::new(0.5, 0.0, 0.0),
                        mode: InterpMode::Linear,
                    },
                    Waypoint {
                        time: 2.5,
                        position: Vector3::new(0.5, 0.1, -0.05),
                        mode: InterpMode::Hold,
                    },
                ],
            )],
            vec![EdgeClamp { branch: 0, edge: 0, theta: 0.25 }],
        )
        .unwrap();
        script.save(&path).unwrap();
        let loaded = MotionScript::load(&path).unwrap();
        assert_eq!(loaded, script);
    }

    #[test]
    fn params_file_round_trips_and_validates() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("fit.params");
        let entries = vec![
            BranchParamEntry {
                id: "spine".into(),
                mass: 0.025,
                bend: (1.5e-3, 0.5e-3),
                twist: 2e-3,
                inertia_scale: 1.0,
            },
            BranchParamEntry {
                id: "limb-a".into(),
                mass: 0.015,
                bend: (1e-3, 1e-3),
                twist: 1e-3,
                inertia_scale: 1.2,
            },
            BranchParamEntry::default_for("limb-b"),
        ];
        save_params(&entries, &path).unwrap();
        assert_eq!(load_params(&path).unwrap(), entries);

        std::fs::write(
            &path,
            format!("{PARAMS_MAGIC}\nbranch s mass -1 bend 1 1 twist 1 inertia-scale 1\n"),
        )
        .unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn entries_rebuild_the_materials_they_summarize() {
        let topo = harness_topology();
        let rest = canonical_rest(&topo, 0.1);
        let entries = vec![
            BranchParamEntry {
                id: "spine".into(),
                mass: 0.025,
                bend: (1.5e-3, 0.5e-3),
                twist: 2e-3,
                inertia_scale: 1.0,
            },
            BranchParamEntry {
                id: "limb-a".into(),
                mass: 0.015,
                bend: (1e-3, 1e-3),
                twist: 1e-3,
                inertia_scale: 1.2,
            },
            BranchParamEntry::default_for("limb-b"),
        ];
        let params = material_from_entries(&topo, &rest, &entries).unwrap();
        assert!((params.branches[0].bend_stiffness[0][(1, 1)] - 0.5e-3).abs() < 1e-18);

        // Summarizing against itself reproduces the entries.
        let back = entries_from_params(&topo, &entries, &params, &params).unwrap();
        for (a, b) in back.iter().zip(&entries) {
            assert_eq!(a.id, b.id);
            assert!((a.mass - b.mass).abs() < 1e-12 * b.mass);
            assert!((a.bend.0 - b.bend.0).abs() < 1e-12 * b.bend.0);
            assert!((a.bend.1 - b.bend.1).abs() < 1e-12 * b.bend.1);
            assert!((a.twist - b.twist).abs() < 1e-12 * b.twist);
            assert!((a.inertia_scale - b.inertia_scale).abs() < 1e-12 * b.inertia_scale);
        }

        // Mismatched ids are rejected.
        let mut wrong = entries.clone();
        wrong.swap(1, 2);
        assert!(material_from_entries(&topo, &rest, &wrong).is_err());
    }

    #[test]
    fn checkpoint_round_trips_the_network() {
        let topo = harness_topology();
        let mut net = ResidualNet::new(&topo, 31);
        // Give every tensor nontrivial values.
        for (k, w) in net.w2.iter_mut().enumerate() {
            *w = 0.01 * (k as f64 + 1.0);
        }
        net.b2[1] = -0.5;
        net.feat_mean[0] = 1.25;
        net.feat_std[4] = 3.5;
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&net, &topo, &path).unwrap();
        let loaded = load_checkpoint(&path, &topo).unwrap();
        assert_eq!(loaded, net);

        // A different topology is rejected.
        let other = BdloTopology::single_branch(6).unwrap();
        let err = load_checkpoint(&path, &other).unwrap_err();
        assert!(err.to_string().contains("different topology"), "{err}");
    }

    #[test]
    fn rmse_matches_hand_computed_cases() {
        let (_, ds) = tiny_dataset();
        let frames = &ds.frames;
        assert_eq!(rmse(frames, frames, ds.step_count()).unwrap(), 0.0);

        // Constant 1 cm offset on every vertex.
        let offset: Vec<Vec<Vec<Vector3<f64>>>> = frames
            .iter()
            .map(|f| {
                f.iter()
                    .map(|xb| xb.iter().map(|x| x + Vector3::new(0.01, 0.0, 0.0)).collect())
                    .collect()
            })
            .collect();
        let e = rmse(&offset, frames, ds.step_count()).unwrap();
        assert!((e - 0.01).abs() < 1e-15, "{e}");

        // One vertex off by `d` at one step dilutes as d/√(N·T).
        let mut single = frames.clone();
        let d = 0.03;
        single[2][1][1].z += d;
        let n: usize = frames[0].iter().map(Vec::len).sum();
        let t = ds.step_count();
        let expected = d / ((n * t) as f64).sqrt();
        let e = rmse(&single, frames, t).unwrap();
        assert!((e - expected).abs() < 1e-12, "{e} vs {expected}");
    }

    #[test]
    fn acceptance_scale_frame_count_round_trips() {
        // 505 seconds at 100 Hz.
        let topo = BdloTopology::single_branch(3).unwrap();
        let frame0: Vec<Vec<Vector3<f64>>> =
            vec![(0..3).map(|i| Vector3::new(0.1 * i as f64, 0.0, 0.0)).collect()];
        let frames: Vec<_> = (0..50_500)
            .map(|t| {
                let mut f = frame0.clone();
                f[0][2].z = t as f64 * 1e-6;
                f
            })
            .collect();
        let inputs = vec![vec![]; frames.len()];
        let ds = TrajectoryDataset {
            dt: 0.01,
            topology_hash: topology_hash(&topo),
            train_fraction: 0.75,
            frames,
            inputs,
        };
        let dir = TempDir::new().unwrap();
        let traj = dir.path().join("long.traj");
        let ins = dir.path().join("long.inputs");
        save_dataset(&ds, &traj, &ins).unwrap();
        let loaded = load_dataset(&traj, &ins).unwrap();
        assert_eq!(loaded.frames.len(), 50_500);
        assert_eq!(loaded, ds);
    }
}
