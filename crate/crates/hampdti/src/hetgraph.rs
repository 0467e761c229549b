//! Heterogeneous graph data model: typed nodes, a canonical relation set of
//! sparse adjacency matrices, a brute-force path oracle, and schema-level
//! meta-path enumeration.
//!
//! Canonical ordering rules:
//! - global node ids place drugs first, then proteins, then remaining types
//!   in declared order;
//! - for each base edge type in declared order, same-type relations are
//!   stored once (symmetrized) and cross-type relations are stored as the
//!   forward relation immediately followed by its transpose;
//! - the identity relation comes last.

use crate::sparse::{SparseError, SparseMatrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("unknown node type `{0}`")]
    UnknownType(String),
    #[error("edge endpoint {index} out of range for type `{ty}` (count {count})")]
    EndpointOutOfRange {
        ty: String,
        index: usize,
        count: usize,
    },
    #[error("relation sequence is empty")]
    EmptySequence,
    #[error("relation id {0} out of range (have {1} relations)")]
    UnknownRelation(usize, usize),
    #[error("type-incompatible sequence: step {step} expects source `{expected}` but previous step ends at `{got}`")]
    Incompatible {
        step: usize,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Node types with contiguous global index ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTypeTable {
    types: Vec<String>,
    counts: Vec<usize>,
    offsets: Vec<usize>,
}

impl NodeTypeTable {
    pub fn new(types: Vec<(String, usize)>) -> Self {
        let mut names = Vec::with_capacity(types.len());
        let mut counts = Vec::with_capacity(types.len());
        let mut offsets = Vec::with_capacity(types.len());
        let mut off = 0usize;
        for (name, count) in types {
            names.push(name);
            counts.push(count);
            offsets.push(off);
            off += count;
        }
        NodeTypeTable {
            types: names,
            counts,
            offsets,
        }
    }

    pub fn total_nodes(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn type_name(&self, idx: usize) -> &str {
        &self.types[idx]
    }

    pub fn count(&self, idx: usize) -> usize {
        self.counts[idx]
    }

    pub fn type_index(&self, name: &str) -> Result<usize, SchemaError> {
        self.types
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| SchemaError::UnknownType(name.to_string()))
    }

    /// Global index range occupied by a type.
    pub fn range(&self, idx: usize) -> std::ops::Range<usize> {
        self.offsets[idx]..self.offsets[idx] + self.counts[idx]
    }

    /// Type of a global node index.
    pub fn type_of(&self, global: usize) -> usize {
        debug_assert!(global < self.total_nodes());
        match self.offsets.binary_search(&global) {
            Ok(t) => {
                // skip over empty types sharing the same offset
                let mut t = t;
                while self.counts[t] == 0 && t + 1 < self.counts.len() && self.offsets[t + 1] == global {
                    t += 1;
                }
                t
            }
            Err(ins) => ins - 1,
        }
    }

    pub fn global(&self, ty: usize, local: usize) -> usize {
        self.offsets[ty] + local
    }
}

/// One relation of the canonical set. `src_type`/`dst_type` are `None` only
/// for the identity relation, which spans every type.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSpec {
    pub id: usize,
    pub name: String,
    pub src_type: Option<usize>,
    pub dst_type: Option<usize>,
    pub is_identity: bool,
}

/// A base edge list prior to canonicalization. Endpoints are local per-type
/// indices.
#[derive(Debug, Clone)]
pub struct BaseEdges {
    pub name: String,
    pub src_type: String,
    pub dst_type: String,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Default)]
pub struct BuildWarnings {
    pub duplicate_edges: usize,
}

#[derive(Debug, Clone)]
pub struct HetGraph {
    nodes: NodeTypeTable,
    relations: Vec<(RelationSpec, SparseMatrix)>,
}

impl HetGraph {
    pub fn node_table(&self) -> &NodeTypeTable {
        &self.nodes
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relation(&self, id: usize) -> &RelationSpec {
        &self.relations[id].0
    }

    pub fn matrix(&self, id: usize) -> &SparseMatrix {
        &self.relations[id].1
    }

    pub fn relations(&self) -> impl Iterator<Item = &(RelationSpec, SparseMatrix)> {
        self.relations.iter()
    }

    pub fn matrices(&self) -> Vec<&SparseMatrix> {
        self.relations.iter().map(|(_, m)| m).collect()
    }

    pub fn identity_id(&self) -> usize {
        self.relations.len() - 1
    }

    pub fn relation_by_name(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|(s, _)| s.name == name)
    }

    /// Replace one cross-type relation (and its paired transpose, stored at
    /// `id + 1`) with a new edge set, e.g. to mask held-out pairs.
    pub fn with_replaced_cross_relation(
        &self,
        id: usize,
        edges: &[(usize, usize)],
    ) -> Result<HetGraph, SchemaError> {
        let spec = &self.relations[id].0;
        let (src, dst) = (spec.src_type.unwrap(), spec.dst_type.unwrap());
        assert_ne!(src, dst, "only cross-type relations carry a paired transpose");
        let n = self.nodes.total_nodes();
        let fwd = block_matrix(&self.nodes, src, dst, edges, n)?;
        let mut out = self.clone();
        out.relations[id].1 = fwd.0;
        out.relations[id + 1].1 = out.relations[id].1.transpose();
        Ok(out)
    }
}

fn block_matrix(
    nodes: &NodeTypeTable,
    src: usize,
    dst: usize,
    edges: &[(usize, usize)],
    n: usize,
) -> Result<(SparseMatrix, usize), SchemaError> {
    let mut trip = Vec::with_capacity(edges.len());
    let mut seen = std::collections::BTreeSet::new();
    let mut dups = 0usize;
    for &(a, b) in edges {
        if a >= nodes.count(src) {
            return Err(SchemaError::EndpointOutOfRange {
                ty: nodes.type_name(src).to_string(),
                index: a,
                count: nodes.count(src),
            });
        }
        if b >= nodes.count(dst) {
            return Err(SchemaError::EndpointOutOfRange {
                ty: nodes.type_name(dst).to_string(),
                index: b,
                count: nodes.count(dst),
            });
        }
        if !seen.insert((a, b)) {
            dups += 1;
            continue;
        }
        trip.push((nodes.global(src, a), nodes.global(dst, b), 1.0));
    }
    Ok((SparseMatrix::from_triplets(n, n, &trip)?, dups))
}

/// Assemble the canonical relation set from base edge lists.
///
/// Same-type relations are symmetrized; cross-type relations get an explicit
/// transpose relation; the identity relation is appended last. Duplicate
/// input edges collapse to weight 1 and are tallied in the warnings.
pub fn build_relation_set(
    nodes: NodeTypeTable,
    base: &[BaseEdges],
) -> Result<(HetGraph, BuildWarnings), SchemaError> {
    let n = nodes.total_nodes();
    let mut relations: Vec<(RelationSpec, SparseMatrix)> = Vec::new();
    let mut warnings = BuildWarnings::default();
    for b in base {
        let src = nodes.type_index(&b.src_type)?;
        let dst = nodes.type_index(&b.dst_type)?;
        let (fwd, dups) = block_matrix(&nodes, src, dst, &b.edges, n)?;
        warnings.duplicate_edges += dups;
        if src == dst {
            // symmetrize in place: A or A^T, binary
            let sym = crate::sparse::linear_combination(&[1.0, 1.0], &[&fwd, &fwd.transpose()])?;
            let mut trip = Vec::with_capacity(sym.nnz());
            for (i, j, v) in sym.iter() {
                if v > 0.0 {
                    trip.push((i, j, 1.0));
                }
            }
            let sym = SparseMatrix::from_triplets(n, n, &trip)?;
            let id = relations.len();
            relations.push((
                RelationSpec {
                    id,
                    name: b.name.clone(),
                    src_type: Some(src),
                    dst_type: Some(dst),
                    is_identity: false,
                },
                sym,
            ));
        } else {
            let id = relations.len();
            relations.push((
                RelationSpec {
                    id,
                    name: b.name.clone(),
                    src_type: Some(src),
                    dst_type: Some(dst),
                    is_identity: false,
                },
                fwd,
            ));
            let back = relations[id].1.transpose();
            relations.push((
                RelationSpec {
                    id: id + 1,
                    name: format!("{}_{}", b.dst_type, b.src_type),
                    src_type: Some(dst),
                    dst_type: Some(src),
                    is_identity: false,
                },
                back,
            ));
        }
    }
    let id = relations.len();
    relations.push((
        RelationSpec {
            id,
            name: "identity".to_string(),
            src_type: None,
            dst_type: None,
            is_identity: true,
        },
        SparseMatrix::identity(n),
    ));
    Ok((HetGraph { nodes, relations }, warnings))
}

/// Validate that a relation sequence chains type-compatibly, skipping
/// identity steps. Returns the (start, end) types when they are pinned by at
/// least one non-identity step.
fn check_sequence(
    g: &HetGraph,
    seq: &[usize],
) -> Result<(Option<usize>, Option<usize>), SchemaError> {
    if seq.is_empty() {
        return Err(SchemaError::EmptySequence);
    }
    let mut start: Option<usize> = None;
    let mut cur: Option<usize> = None;
    for (step, &rid) in seq.iter().enumerate() {
        if rid >= g.n_relations() {
            return Err(SchemaError::UnknownRelation(rid, g.n_relations()));
        }
        let spec = g.relation(rid);
        if spec.is_identity {
            continue;
        }
        let (s, d) = (spec.src_type.unwrap(), spec.dst_type.unwrap());
        if let Some(c) = cur {
            if c != s {
                return Err(SchemaError::Incompatible {
                    step,
                    expected: g.node_table().type_name(s).to_string(),
                    got: g.node_table().type_name(c).to_string(),
                });
            }
        } else {
            start = Some(s);
        }
        cur = Some(d);
    }
    Ok((start, cur))
}

/// Count concrete paths realizing `seq` from `src` to `dst` by depth-first
/// enumeration over the relation matrices. No matrix products are involved;
/// this is the independent oracle for chained composition.
pub fn path_count_oracle(
    g: &HetGraph,
    seq: &[usize],
    src: usize,
    dst: usize,
) -> Result<f64, SchemaError> {
    let counts = path_counts_from(g, seq, src)?;
    Ok(counts[dst])
}

/// Path weights from `src` to every destination, by DFS. For binary
/// adjacencies the weight is the exact path count.
pub fn path_counts_from(g: &HetGraph, seq: &[usize], src: usize) -> Result<Vec<f64>, SchemaError> {
    check_sequence(g, seq)?;
    let n = g.node_table().total_nodes();
    let mut counts = vec![0.0f64; n];
    fn dfs(g: &HetGraph, seq: &[usize], step: usize, node: usize, weight: f64, counts: &mut [f64]) {
        if step == seq.len() {
            counts[node] += weight;
            return;
        }
        for (next, w) in g.matrix(seq[step]).row(node) {
            dfs(g, seq, step + 1, next, weight * w, counts);
        }
    }
    dfs(g, seq, 0, src, 1.0, &mut counts);
    Ok(counts)
}

/// All type-compatible non-identity relation sequences of length 1..=max_len
/// between two node types, in deterministic (length, lexicographic) order.
pub fn enumerate_schema_metapaths(
    g: &HetGraph,
    from_type: &str,
    to_type: &str,
    max_len: usize,
) -> Result<Vec<Vec<usize>>, SchemaError> {
    let from = g.node_table().type_index(from_type)?;
    let to = g.node_table().type_index(to_type)?;
    let mut out = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    fn extend(
        g: &HetGraph,
        cur_type: usize,
        to: usize,
        remaining: usize,
        stack: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if remaining == 0 {
            return;
        }
        for (spec, _) in g.relations() {
            if spec.is_identity {
                continue;
            }
            if spec.src_type != Some(cur_type) {
                continue;
            }
            stack.push(spec.id);
            if spec.dst_type == Some(to) {
                out.push(stack.clone());
            }
            extend(g, spec.dst_type.unwrap(), to, remaining - 1, stack, out);
            stack.pop();
        }
    }
    extend(g, from, to, max_len, &mut stack, &mut out);
    out.sort_by(|a, b| (a.len(), a.as_slice()).cmp(&(b.len(), b.as_slice())));
    out.dedup();
    Ok(out)
}

/// The node types and base edge types of the DTINet benchmark network, with
/// the published entity and edge counts used to validate ingested data.
pub mod dtinet {
    pub const NODE_TYPES: [(&str, usize); 4] = [
        ("drug", 708),
        ("protein", 1512),
        ("disease", 5603),
        ("side_effect", 4192),
    ];

    /// (name, src, dst, expected edge count)
    pub const BASE_RELATIONS: [(&str, &str, &str, usize); 6] = [
        ("drug_protein", "drug", "protein", 1923),
        ("drug_drug", "drug", "drug", 10036),
        ("protein_protein", "protein", "protein", 7363),
        ("drug_disease", "drug", "disease", 199_214),
        ("protein_disease", "protein", "disease", 1_596_745),
        ("drug_side_effect", "drug", "side_effect", 80_164),
    ];
}
