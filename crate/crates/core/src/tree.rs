//! The vessel tree data model, its canonical JSON document
//! (`vetta-tree/1`), the structural invariant checker, and SVG export for
//! 2-D trees.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PolylineVessel;

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub pos: [f64; 3],
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeEdge {
    pub parent: NodeId,
    pub child: NodeId,
    pub polyline: Option<Vec<[f64; 4]>>,
    pub skip: bool,
}

/// Rooted tree of ≤2-child nodes whose directed edges optionally carry
/// polyline geometry and radii.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselTree {
    pub dims: u8,
    pub root: NodeId,
    pub nodes: BTreeMap<NodeId, TreeNode>,
    pub edges: Vec<TreeEdge>,
}

impl VesselTree {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Number of children, derived from the edge list.
    pub fn n_children(&self, id: NodeId) -> usize {
        self.edges.iter().filter(|e| e.parent == id).count()
    }

    pub fn children(&self, id: NodeId) -> Vec<NodeId> {
        self.edges
            .iter()
            .filter(|e| e.parent == id)
            .map(|e| e.child)
            .collect()
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.edges.iter().find(|e| e.child == id).map(|e| e.parent)
    }

    pub fn edge(&self, parent: NodeId, child: NodeId) -> Option<&TreeEdge> {
        self.edges
            .iter()
            .find(|e| e.parent == parent && e.child == child)
    }

    /// Node ids on the root -> `target` path, inclusive on both ends.
    pub fn path_from_root(&self, target: NodeId) -> Result<Vec<NodeId>> {
        let mut path = vec![target];
        let mut cur = target;
        while cur != self.root {
            match self.parent(cur) {
                Some(p) => {
                    path.push(p);
                    cur = p;
                }
                None => {
                    return Err(Error::InvalidTree(format!(
                        "node {target} is not connected to root {}",
                        self.root
                    )))
                }
            }
            if path.len() > self.nodes.len() {
                return Err(Error::InvalidTree("cycle while walking to root".into()));
            }
        }
        path.reverse();
        Ok(path)
    }

    /// Breadth-first node order from the root.
    pub fn bfs_order(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut queue = VecDeque::new();
        queue.push_back(self.root);
        while let Some(id) = queue.pop_front() {
            order.push(id);
            for c in self.children(id) {
                queue.push_back(c);
            }
        }
        order
    }

    /// Structural invariants: unique edge endpoints that exist, in-degree
    /// <= 1, root in-degree 0, <= 2 children, connected, acyclic, positive
    /// radii, and polylines with valid samples.
    pub fn validate(&self) -> Result<()> {
        if !self.nodes.contains_key(&self.root) {
            return Err(Error::InvalidTree(format!("root {} not in nodes", self.root)));
        }
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::InvalidTree(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        let mut in_deg: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut out_deg: BTreeMap<NodeId, usize> = BTreeMap::new();
        for e in &self.edges {
            if !self.nodes.contains_key(&e.parent) || !self.nodes.contains_key(&e.child) {
                return Err(Error::InvalidTree(format!(
                    "edge ({}, {}) references a missing node",
                    e.parent, e.child
                )));
            }
            *in_deg.entry(e.child).or_default() += 1;
            *out_deg.entry(e.parent).or_default() += 1;
        }
        for (&id, &d) in &in_deg {
            if d > 1 {
                return Err(Error::InvalidTree(format!("node {id} has in-degree {d}")));
            }
        }
        if in_deg.get(&self.root).copied().unwrap_or(0) != 0 {
            return Err(Error::InvalidTree("root has an incoming edge".into()));
        }
        for (&id, &d) in &out_deg {
            if d > 2 {
                return Err(Error::InvalidTree(format!("node {id} has {d} children")));
            }
        }
        // connectivity + acyclicity: BFS from root must reach every node
        // exactly once (in-degree <= 1 rules out cross edges)
        let mut seen: BTreeSet<NodeId> = BTreeSet::new();
        let mut queue = VecDeque::new();
        queue.push_back(self.root);
        seen.insert(self.root);
        while let Some(id) = queue.pop_front() {
            for c in self.children(id) {
                if !seen.insert(c) {
                    return Err(Error::InvalidTree(format!("node {c} reached twice (cycle)")));
                }
                queue.push_back(c);
            }
        }
        if seen.len() != self.nodes.len() {
            return Err(Error::InvalidTree(format!(
                "{} of {} nodes reachable from root",
                seen.len(),
                self.nodes.len()
            )));
        }
        for (id, n) in &self.nodes {
            if let Some(r) = n.radius {
                if !(r > 0.0) {
                    return Err(Error::InvalidTree(format!("node {id} has radius {r}")));
                }
            }
            if !n.pos.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidTree(format!("node {id} has non-finite position")));
            }
        }
        for e in &self.edges {
            if let Some(poly) = &e.polyline {
                if poly.len() < 2 {
                    return Err(Error::InvalidTree(format!(
                        "edge ({}, {}) polyline has {} points",
                        e.parent,
                        e.child,
                        poly.len()
                    )));
                }
                if poly.iter().any(|p| !(p[3] > 0.0) || p.iter().any(|v| !v.is_finite())) {
                    return Err(Error::InvalidTree(format!(
                        "edge ({}, {}) polyline has invalid samples",
                        e.parent, e.child
                    )));
                }
            }
        }
        Ok(())
    }

    /// Straight-line edge length between endpoint nodes.
    pub fn edge_chord(&self, e: &TreeEdge) -> f64 {
        let a = &self.nodes[&e.parent].pos;
        let b = &self.nodes[&e.child].pos;
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    /// Arc length of an edge: polyline length when present, chord otherwise.
    pub fn edge_arc_length(&self, e: &TreeEdge) -> f64 {
        match &e.polyline {
            Some(poly) => poly
                .windows(2)
                .map(|w| {
                    ((w[0][0] - w[1][0]).powi(2)
                        + (w[0][1] - w[1][1]).powi(2)
                        + (w[0][2] - w[1][2]).powi(2))
                    .sqrt()
                })
                .sum(),
            None => self.edge_chord(e),
        }
    }

    /// Sample `samples_per_edge` points along every edge (polyline when
    /// present, chord otherwise) for centerline metrics.
    pub fn sample_centerline(&self, samples_per_edge: usize) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        if self.edges.is_empty() {
            // single-node tree: the node itself is the centerline
            if let Some(n) = self.nodes.get(&self.root) {
                out.push(n.pos);
            }
            return out;
        }
        for e in &self.edges {
            match &e.polyline {
                Some(poly) => match PolylineVessel::new(poly.clone()) {
                    Ok(pv) => {
                        for i in 0..samples_per_edge {
                            let t = i as f64 / (samples_per_edge - 1).max(1) as f64;
                            let p = sample_polyline(&pv, t);
                            out.push([p[0], p[1], p[2]]);
                        }
                    }
                    Err(_) => {
                        out.extend(poly.iter().map(|p| [p[0], p[1], p[2]]));
                    }
                },
                None => {
                    let a = self.nodes[&e.parent].pos;
                    let b = self.nodes[&e.child].pos;
                    for i in 0..samples_per_edge {
                        let t = i as f64 / (samples_per_edge - 1).max(1) as f64;
                        out.push([
                            a[0] + (b[0] - a[0]) * t,
                            a[1] + (b[1] - a[1]) * t,
                            a[2] + (b[2] - a[2]) * t,
                        ]);
                    }
                }
            }
        }
        out
    }
}

/// Arc-length-parameterized sample of a polyline at `t` in [0, 1].
pub fn sample_polyline(pv: &PolylineVessel, t: f64) -> [f64; 4] {
    let positions = pv.arc_positions();
    let t = t.clamp(0.0, 1.0);
    let mut hi = 1;
    while hi < positions.len() - 1 && positions[hi] < t {
        hi += 1;
    }
    let lo = hi - 1;
    let span = positions[hi] - positions[lo];
    let f = if span > 0.0 { (t - positions[lo]) / span } else { 0.0 };
    let a = &pv.points[lo];
    let b = &pv.points[hi];
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
        a[3] + (b[3] - a[3]) * f,
    ]
}

// ---------------------------------------------------------------------------
// canonical JSON document
// ---------------------------------------------------------------------------

pub const TREE_SCHEMA_VERSION: &str = "vetta-tree/1";

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: NodeId,
    pos: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    parent: NodeId,
    child: NodeId,
    #[serde(skip_serializing_if = "Option::is_none")]
    polyline: Option<Vec<[f64; 4]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skip: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct TreeDoc {
    version: String,
    dims: u8,
    root: NodeId,
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
}

pub fn tree_to_json(tree: &VesselTree) -> Result<String> {
    let doc = TreeDoc {
        version: TREE_SCHEMA_VERSION.to_string(),
        dims: tree.dims,
        root: tree.root,
        nodes: tree
            .nodes
            .iter()
            .map(|(&id, n)| NodeDoc {
                id,
                pos: n.pos[..tree.dims as usize].to_vec(),
                r: n.radius,
            })
            .collect(),
        edges: tree
            .edges
            .iter()
            .map(|e| EdgeDoc {
                parent: e.parent,
                child: e.child,
                polyline: e.polyline.clone(),
                skip: if e.skip { Some(true) } else { None },
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::TreeSchema {
        path: String::new(),
        detail: e.to_string(),
    })
}

pub fn tree_from_json(json: &str) -> Result<VesselTree> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let doc: TreeDoc = serde_path_to_error::deserialize(de).map_err(|e| Error::TreeSchema {
        path: e.path().to_string(),
        detail: e.inner().to_string(),
    })?;
    if doc.version != TREE_SCHEMA_VERSION {
        return Err(Error::TreeSchema {
            path: "version".into(),
            detail: format!("unsupported version `{}`", doc.version),
        });
    }
    if doc.dims != 2 && doc.dims != 3 {
        return Err(Error::TreeSchema {
            path: "dims".into(),
            detail: format!("dims must be 2 or 3, got {}", doc.dims),
        });
    }
    let mut nodes = BTreeMap::new();
    for n in doc.nodes {
        if n.pos.len() != doc.dims as usize {
            return Err(Error::TreeSchema {
                path: format!("nodes[id={}].pos", n.id),
                detail: format!("expected {} coordinates, got {}", doc.dims, n.pos.len()),
            });
        }
        let mut pos = [0.0f64; 3];
        pos[..n.pos.len()].copy_from_slice(&n.pos);
        if nodes.insert(n.id, TreeNode { pos, radius: n.r }).is_some() {
            return Err(Error::TreeSchema {
                path: format!("nodes[id={}]", n.id),
                detail: "duplicate node id".into(),
            });
        }
    }
    if !nodes.contains_key(&doc.root) {
        return Err(Error::TreeSchema {
            path: "root".into(),
            detail: format!("root id {} missing from nodes", doc.root),
        });
    }
    let edges = doc
        .edges
        .into_iter()
        .map(|e| TreeEdge {
            parent: e.parent,
            child: e.child,
            polyline: e.polyline,
            skip: e.skip.unwrap_or(false),
        })
        .collect();
    let tree = VesselTree {
        dims: doc.dims,
        root: doc.root,
        nodes,
        edges,
    };
    tree.validate()?;
    Ok(tree)
}

pub fn save_tree(tree: &VesselTree, path: &Path) -> Result<()> {
    std::fs::write(path, tree_to_json(tree)?)?;
    Ok(())
}

pub fn load_tree(path: &Path) -> Result<VesselTree> {
    let text = std::fs::read_to_string(path)?;
    tree_from_json(&text)
}

/// Render a 2-D tree into a 512x512 SVG; the unit square maps to the full
/// viewBox with y flipped so "up" in data space is up on screen.
pub fn tree_to_svg(tree: &VesselTree) -> String {
    let scale = 512.0;
    let map = |p: &[f64; 3]| (p[0] * scale, (1.0 - p[1]) * scale);
    let mut body = String::new();
    for e in &tree.edges {
        let (x1, y1) = map(&tree.nodes[&e.parent].pos);
        let (x2, y2) = map(&tree.nodes[&e.child].pos);
        body.push_str(&format!(
            "  <line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
             stroke=\"#0a4d8c\" stroke-width=\"2\" stroke-linecap=\"round\"/>\n"
        ));
    }
    for (_, n) in &tree.nodes {
        let (x, y) = map(&n.pos);
        body.push_str(&format!(
            "  <circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"#d1495b\"/>\n"
        ));
    }
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 512 512\">\n{body}</svg>\n")
}
