//! Pose graph: global poses on the vertices, relative estimates and point
//! correspondences on the edges.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;

use crate::error::{Error, Result};
use crate::geometry::{
    chain_backward, chain_forward, relative_from_global, rotation_geodesic_angle, RigidTransform,
    Rotation, Vec3,
};

/// Edge weights never drop below this, so zero-inlier edges still constrain.
pub const EDGE_WEIGHT_FLOOR: f64 = 1e-3;

/// Point pairs `(x_i, x_j)` observed in frames `i` and `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(Vec3, Vec3)>,
    /// Ground-truth inlier flags, only known for synthetic data.
    pub truth_labels: Option<Vec<bool>>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(Vec3, Vec3)>) -> Self {
        Self {
            pairs,
            truth_labels: None,
        }
    }

    pub fn with_labels(pairs: Vec<(Vec3, Vec3)>, labels: Vec<bool>) -> Self {
        Self {
            pairs,
            truth_labels: Some(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Keeps only the pairs at `indices` (labels follow).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pairs: indices.iter().map(|&k| self.pairs[k]).collect(),
            truth_labels: self
                .truth_labels
                .as_ref()
                .map(|l| indices.iter().map(|&k| l[k]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub id: usize,
    pub pose: RigidTransform,
    /// Gauge anchor.
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub relative: RigidTransform,
    pub correspondences: CorrespondenceSet,
    pub inlier_count: usize,
    pub weight: f64,
    pub overlap_score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
}

/// One pairwise estimate fed into [`build_graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseResult {
    pub i: usize,
    pub j: usize,
    pub relative: RigidTransform,
    pub correspondences: CorrespondenceSet,
    pub inlier_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    AnchorCount {
        count: usize,
    },
    NonDenseId {
        index: usize,
        id: usize,
    },
    SelfLoop {
        edge: usize,
    },
    VertexOutOfRange {
        edge: usize,
    },
    DuplicateEdge {
        i: usize,
        j: usize,
    },
    InlierCountExceeds {
        edge: usize,
        inliers: usize,
        pairs: usize,
    },
    NonFiniteCorrespondence {
        edge: usize,
        pair: usize,
    },
    LabelCountMismatch {
        edge: usize,
    },
    InvalidWeight {
        edge: usize,
    },
    InvalidOverlap {
        edge: usize,
    },
    DisconnectedGraph {
        components: Vec<Vec<usize>>,
    },
}

/// Per-edge disagreement between the stored relative transform and the one
/// induced by the current global poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeResidual {
    pub rotation_angle: f64,
    pub translation_norm: f64,
}

impl PoseGraph {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn anchor(&self) -> usize {
        self.vertices.iter().position(|v| v.fixed).unwrap_or(0)
    }

    pub fn poses(&self) -> Vec<RigidTransform> {
        self.vertices.iter().map(|v| v.pose).collect()
    }

    pub fn rotations(&self) -> Vec<Rotation> {
        self.vertices.iter().map(|v| v.pose.rotation).collect()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.vertices.iter().map(|v| v.pose.translation).collect()
    }

    /// Copy of the graph with the vertex poses replaced.
    pub fn with_poses(&self, poses: &[RigidTransform]) -> Result<PoseGraph> {
        if poses.len() != self.vertices.len() {
            return Err(Error::LengthMismatch {
                left: poses.len(),
                right: self.vertices.len(),
            });
        }
        let mut g = self.clone();
        for (v, p) in g.vertices.iter_mut().zip(poses) {
            v.pose = *p;
        }
        Ok(g)
    }

    /// Incident edge indices per vertex, in edge order.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (k, e) in self.edges.iter().enumerate() {
            if e.i < adj.len() && e.j < adj.len() {
                adj[e.i].push(k);
                if e.j != e.i {
                    adj[e.j].push(k);
                }
            }
        }
        adj
    }

    /// Vertices in breadth-first order from the anchor (reachable ones only).
    pub fn bfs_order(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let n = self.vertices.len();
        if n == 0 {
            return Vec::new();
        }
        let start = self.anchor();
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &k in &adj[v] {
                let e = &self.edges[k];
                let w = if e.i == v { e.j } else { e.i };
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        order
    }

    /// Errors unless the undirected graph is connected.
    pub fn require_connected(&self) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(Error::EmptyInput);
        }
        let comps =
            connected_components(self.vertices.len(), self.edges.iter().map(|e| (e.i, e.j)));
        if comps.len() > 1 {
            return Err(Error::DisconnectedGraph { components: comps });
        }
        Ok(())
    }
}

/// Connected components, each sorted, ordered by smallest member.
pub fn connected_components(
    n: usize,
    edges: impl IntoIterator<Item = (usize, usize)>,
) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (a, b) in edges {
        if a < n && b < n {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut comps = Vec::new();
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut comp = Vec::new();
        let mut stack = vec![s];
        label[s] = id;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for &w in &adj[v] {
                if label[w] == usize::MAX {
                    label[w] = id;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Maximum-weight spanning tree grown from `root` (Prim). Returns the chosen
/// edge indices in the order they were attached; ties prefer the lower index.
pub fn max_spanning_tree(n: usize, edges: &[(usize, usize, usize)], root: usize) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for (k, &(a, b, _)) in edges.iter().enumerate() {
        adj[a].push(k);
        adj[b].push(k);
    }
    let mut in_tree = vec![false; n];
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    let mut heap = BinaryHeap::new();
    let attach =
        |v: usize, in_tree: &mut Vec<bool>, heap: &mut BinaryHeap<(usize, Reverse<usize>)>| {
            in_tree[v] = true;
            for &k in &adj[v] {
                let (a, b, w) = edges[k];
                let other = if a == v { b } else { a };
                if !in_tree[other] {
                    heap.push((w, Reverse(k)));
                }
            }
        };
    if root < n {
        attach(root, &mut in_tree, &mut heap);
    }
    while let Some((_, Reverse(k))) = heap.pop() {
        let (a, b, _) = edges[k];
        let next = match (in_tree[a], in_tree[b]) {
            (true, false) => b,
            (false, true) => a,
            _ => continue,
        };
        tree.push(k);
        attach(next, &mut in_tree, &mut heap);
    }
    tree
}

/// Assembles a pose graph from pairwise estimates.
///
/// Vertex ids are compacted to `0..n` in increasing order of the ids used in
/// `results`. Vertex 0 is the identity anchor; the other poses are chained
/// along the maximum-inlier spanning tree. Edge weights start at
/// `inlier_count / max_inlier_count`, floored at [`EDGE_WEIGHT_FLOOR`].
pub fn build_graph(results: Vec<PairwiseResult>) -> Result<PoseGraph> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(r) = results.iter().find(|r| r.i == r.j) {
        return Err(Error::SelfLoop(r.i));
    }
    let ids: BTreeSet<usize> = results.iter().flat_map(|r| [r.i, r.j]).collect();
    if ids.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let remap: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let n = ids.len();

    let mut seen_pairs = BTreeSet::new();
    for r in &results {
        let key = (r.i.min(r.j), r.i.max(r.j));
        if !seen_pairs.insert(key) {
            return Err(Error::DuplicateEdge(key.0, key.1));
        }
        if r.inlier_count > r.correspondences.len() {
            return Err(Error::invalid(
                "inlier_count",
                "exceeds the number of correspondences",
            ));
        }
    }

    let max_inliers = results.iter().map(|r| r.inlier_count).max().unwrap_or(0);
    let edges: Vec<Edge> = results
        .into_iter()
        .map(|r| Edge {
            i: remap[&r.i],
            j: remap[&r.j],
            relative: r.relative,
            weight: initial_weight(r.inlier_count, max_inliers),
            inlier_count: r.inlier_count,
            correspondences: r.correspondences,
            overlap_score: 0.0,
        })
        .collect();

    let comps = connected_components(n, edges.iter().map(|e| (e.i, e.j)));
    if comps.len() > 1 {
        return Err(Error::DisconnectedGraph { components: comps });
    }

    let mut graph = PoseGraph {
        vertices: (0..n)
            .map(|id| Vertex {
                id,
                pose: RigidTransform::identity(),
                fixed: id == 0,
            })
            .collect(),
        edges,
    };
    let poses = spanning_tree_poses(&graph, |e| e.relative);
    for (v, p) in graph.vertices.iter_mut().zip(poses) {
        v.pose = p;
    }
    Ok(graph)
}

pub(crate) fn initial_weight(inliers: usize, max_inliers: usize) -> f64 {
    if max_inliers == 0 {
        return EDGE_WEIGHT_FLOOR;
    }
    (inliers as f64 / max_inliers as f64).max(EDGE_WEIGHT_FLOOR)
}

/// Chains global poses from the anchor along the maximum-inlier spanning tree,
/// reading each edge's relative transform through `relative`.
pub fn spanning_tree_poses(
    graph: &PoseGraph,
    relative: impl Fn(&Edge) -> RigidTransform,
) -> Vec<RigidTransform> {
    let n = graph.vertices.len();
    let anchor = graph.anchor();
    let weighted: Vec<(usize, usize, usize)> = graph
        .edges
        .iter()
        .map(|e| (e.i, e.j, e.inlier_count))
        .collect();
    let tree = max_spanning_tree(n, &weighted, anchor);
    let mut poses = graph.poses();
    let mut known = vec![false; n];
    known[anchor] = true;
    for k in tree {
        let e = &graph.edges[k];
        let rel = relative(e);
        if known[e.i] && !known[e.j] {
            poses[e.j] = chain_forward(&poses[e.i], &rel);
            known[e.j] = true;
        } else if known[e.j] && !known[e.i] {
            poses[e.i] = chain_backward(&poses[e.j], &rel);
            known[e.i] = true;
        }
    }
    poses
}

/// Lists every broken invariant; an empty list means the graph is valid.
pub fn validate(graph: &PoseGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = graph.vertices.len();
    let anchors = graph.vertices.iter().filter(|v| v.fixed).count();
    if anchors != 1 {
        out.push(Violation::AnchorCount { count: anchors });
    }
    for (index, v) in graph.vertices.iter().enumerate() {
        if v.id != index {
            out.push(Violation::NonDenseId { index, id: v.id });
        }
    }
    let mut pairs = BTreeSet::new();
    for (k, e) in graph.edges.iter().enumerate() {
        if e.i >= n || e.j >= n {
            out.push(Violation::VertexOutOfRange { edge: k });
            continue;
        }
        if e.i == e.j {
            out.push(Violation::SelfLoop { edge: k });
            continue;
        }
        let key = (e.i.min(e.j), e.i.max(e.j));
        if !pairs.insert(key) {
            out.push(Violation::DuplicateEdge { i: key.0, j: key.1 });
        }
        if e.inlier_count > e.correspondences.len() {
            out.push(Violation::InlierCountExceeds {
                edge: k,
                inliers: e.inlier_count,
                pairs: e.correspondences.len(),
            });
        }
        if let Some(pair) = e.correspondences.pairs.iter().position(|(a, b)| {
            !(a.iter().all(|x| x.is_finite()) && b.iter().all(|x| x.is_finite()))
        }) {
            out.push(Violation::NonFiniteCorrespondence { edge: k, pair });
        }
        if let Some(labels) = &e.correspondences.truth_labels {
            if labels.len() != e.correspondences.len() {
                out.push(Violation::LabelCountMismatch { edge: k });
            }
        }
        if !(e.weight.is_finite() && e.weight >= 0.0) {
            out.push(Violation::InvalidWeight { edge: k });
        }
        if !(0.0..=1.0).contains(&e.overlap_score) {
            out.push(Violation::InvalidOverlap { edge: k });
        }
    }
    let comps = connected_components(
        n,
        graph
            .edges
            .iter()
            .filter(|e| e.i < n && e.j < n)
            .map(|e| (e.i, e.j)),
    );
    if comps.len() > 1 {
        out.push(Violation::DisconnectedGraph { components: comps });
    }
    out
}

/// Residual of every edge against the current global poses.
pub fn consistency_residuals(graph: &PoseGraph) -> Vec<EdgeResidual> {
    graph
        .edges
        .iter()
        .map(|e| {
            let induced =
                relative_from_global(&graph.vertices[e.i].pose, &graph.vertices[e.j].pose);
            EdgeResidual {
                rotation_angle: rotation_geodesic_angle(&e.relative.rotation, &induced.rotation),
                translation_norm: (e.relative.translation - induced.translation).norm(),
            }
        })
        .collect()
}
