//! Branch structure of a branched deformable linear object.
//!
//! An object is a tree of open chains: exactly one *parent* branch plus any
//! number of *child* branches, each attached at an interior parent vertex.
//! The attachment vertex of a child (its vertex 0) is a distinct simulated
//! vertex that the constraint stage keeps coincident with the parent's
//! junction vertex; it is never aliased to it.
//!
//! Global vertex numbering is parent vertices first, then each child's
//! vertices in branch order.

use nalgebra::DMatrix;

use crate::error::{SimError, SimResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Parent,
    Child,
}

/// Description of one chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub id: String,
    pub kind: BranchKind,
    /// Number of simulated vertices on the chain (at least 3).
    pub vertex_count: usize,
    /// For a child branch: the interior parent vertex it attaches to.
    /// Must be `None` for the parent branch.
    pub junction_parent_vertex: Option<usize>,
}

impl BranchSpec {
    pub fn parent(id: impl Into<String>, vertex_count: usize) -> Self {
        BranchSpec {
            id: id.into(),
            kind: BranchKind::Parent,
            vertex_count,
            junction_parent_vertex: None,
        }
    }

    pub fn child(id: impl Into<String>, vertex_count: usize, junction_parent_vertex: usize) -> Self {
        BranchSpec {
            id: id.into(),
            kind: BranchKind::Child,
            vertex_count,
            junction_parent_vertex: Some(junction_parent_vertex),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.vertex_count - 1
    }
}

/// One parent-child attachment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Junction {
    /// Interior vertex index on the parent chain.
    pub parent_vertex: usize,
    /// Index of the attached child in the branch list.
    pub child_branch: usize,
}

/// Validated branch structure. Immutable after construction; all simulation
/// state refers to it by shared reference.
#[derive(Debug, Clone, PartialEq)]
pub struct BdloTopology {
    branches: Vec<BranchSpec>,
    junctions: Vec<Junction>,
    vertex_offsets: Vec<usize>,
    total_vertices: usize,
}

impl BdloTopology {
    /// Validates and freezes a branch list. The parent must be listed first;
    /// each child must attach at a distinct interior parent vertex. A vertex
    /// may host at most one child, so junction degree never exceeds three
    /// edges.
    pub fn build(branches: Vec<BranchSpec>) -> SimResult<Self> {
        if branches.is_empty() {
            return Err(SimError::Topology("no branches given".into()));
        }
        if branches[0].kind != BranchKind::Parent {
            return Err(SimError::Topology(format!(
                "first branch '{}' must be the parent",
                branches[0].id
            )));
        }
        let mut branches = branches;
        for b in &mut branches {
            b.id = b.id.trim().to_string();
        }
        let parent_vertices = branches[0].vertex_count;
        let mut junctions = Vec::new();
        for (index, b) in branches.iter().enumerate() {
            if b.id.is_empty() {
                return Err(SimError::Topology(format!("branch {index} has an empty id")));
            }
            if branches[..index].iter().any(|o| o.id == b.id) {
                return Err(SimError::Topology(format!("duplicate branch id '{}'", b.id)));
            }
            if b.vertex_count < 3 {
                return Err(SimError::Topology(format!(
                    "branch '{}' has {} vertices; at least 3 required",
                    b.id, b.vertex_count
                )));
            }
            match (b.kind, b.junction_parent_vertex, index) {
                (BranchKind::Parent, _, i) if i > 0 => {
                    return Err(SimError::Topology(format!(
                        "branch '{}' is a second parent; exactly one is allowed",
                        b.id
                    )));
                }
                (BranchKind::Parent, Some(_), _) => {
                    return Err(SimError::Topology(format!(
                        "parent branch '{}' must not declare a junction vertex",
                        b.id
                    )));
                }
                (BranchKind::Parent, None, _) => {}
                (BranchKind::Child, None, _) => {
                    return Err(SimError::Topology(format!(
                        "child branch '{}' lacks a junction vertex",
                        b.id
                    )));
                }
                (BranchKind::Child, Some(v), _) => {
                    if v == 0 || v >= parent_vertices - 1 {
                        return Err(SimError::Topology(format!(
                            "child '{}' attaches at parent vertex {v}, which is not interior \
                             (valid range 1..={})",
                            b.id,
                            parent_vertices - 2
                        )));
                    }
                    if junctions.iter().any(|j: &Junction| j.parent_vertex == v) {
                        return Err(SimError::Topology(format!(
                            "parent vertex {v} hosts more than one child; junctions are \
                             limited to three incident edges",
                        )));
                    }
                    junctions.push(Junction {
                        parent_vertex: v,
                        child_branch: index,
                    });
                }
            }
        }
        let mut vertex_offsets = Vec::with_capacity(branches.len());
        let mut total = 0;
        for b in &branches {
            vertex_offsets.push(total);
            total += b.vertex_count;
        }
        Ok(BdloTopology {
            branches,
            junctions,
            vertex_offsets,
            total_vertices: total,
        })
    }

    /// Convenience constructor: one parent chain, no children.
    pub fn single_branch(vertex_count: usize) -> SimResult<Self> {
        Self::build(vec![BranchSpec::parent("main", vertex_count)])
    }

    pub fn branches(&self) -> &[BranchSpec] {
        &self.branches
    }

    pub fn branch(&self, index: usize) -> &BranchSpec {
        &self.branches[index]
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn parent(&self) -> &BranchSpec {
        &self.branches[0]
    }

    pub fn junctions(&self) -> &[Junction] {
        &self.junctions
    }

    pub fn junction_at_parent_vertex(&self, parent_vertex: usize) -> Option<&Junction> {
        self.junctions.iter().find(|j| j.parent_vertex == parent_vertex)
    }

    pub fn total_vertices(&self) -> usize {
        self.total_vertices
    }

    /// Index of a branch's vertex 0 in the global vertex numbering.
    pub fn vertex_offset(&self, branch: usize) -> usize {
        self.vertex_offsets[branch]
    }

    pub fn global_vertex(&self, branch: usize, vertex: usize) -> usize {
        debug_assert!(vertex < self.branches[branch].vertex_count);
        self.vertex_offsets[branch] + vertex
    }

    pub fn branch_index(&self, id: &str) -> Option<usize> {
        self.branches.iter().position(|b| b.id == id)
    }

    /// Symmetric 0/1 vertex adjacency with unit diagonal: self-loops, chain
    /// links, and one link per junction between the parent junction vertex
    /// and the child's vertex 0.
    pub fn adjacency(&self) -> Adjacency {
        let n = self.total_vertices;
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        for (b, spec) in self.branches.iter().enumerate() {
            let off = self.vertex_offsets[b];
            for v in 0..spec.vertex_count - 1 {
                m[(off + v, off + v + 1)] = 1.0;
                m[(off + v + 1, off + v)] = 1.0;
            }
        }
        for j in &self.junctions {
            let p = self.global_vertex(0, j.parent_vertex);
            let c = self.global_vertex(j.child_branch, 0);
            m[(p, c)] = 1.0;
            m[(c, p)] = 1.0;
        }
        Adjacency { matrix: m }
    }

    /// Uniform batch layout: the parent fills batch row 0 and every child is
    /// zero-padded to the parent's length. Fails if a child is longer than
    /// the parent.
    pub fn padded_layout(&self) -> SimResult<PaddedLayout> {
        let padded_len = self.parent().vertex_count;
        for b in self.branches.iter().skip(1) {
            if b.vertex_count > padded_len {
                return Err(SimError::Shape(format!(
                    "child '{}' has {} vertices, longer than the parent's {padded_len}; \
                     the padded layout requires the parent to be the longest branch",
                    b.id, b.vertex_count
                )));
            }
        }
        let mask = self
            .branches
            .iter()
            .map(|b| {
                let mut row = vec![false; padded_len];
                row[..b.vertex_count].fill(true);
                row
            })
            .collect();
        Ok(PaddedLayout {
            batch_count: self.branches.len(),
            padded_len,
            mask,
        })
    }
}

/// Dense 0/1 adjacency with self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    matrix: DMatrix<f64>,
}

impl Adjacency {
    /// Wrap an explicit symmetric 0/1 matrix (rows must carry self-loops).
    #[cfg(test)]
    pub(crate) fn from_matrix(matrix: DMatrix<f64>) -> Self {
        Adjacency { matrix }
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    /// Row sum, self-loop included.
    pub fn degree(&self, i: usize) -> f64 {
        self.matrix.row(i).sum()
    }
}

/// Mask describing how branches map onto uniform batch rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedLayout {
    pub batch_count: usize,
    pub padded_len: usize,
    /// `mask[batch][slot]` is true when the slot holds a real vertex.
    pub mask: Vec<Vec<bool>>,
}

impl PaddedLayout {
    pub fn real_count(&self) -> usize {
        self.mask
            .iter()
            .map(|row| row.iter().filter(|&&m| m).count())
            .sum()
    }

    pub fn is_real(&self, batch: usize, slot: usize) -> bool {
        self.mask[batch][slot]
    }
}
