//! Edge featurization for the tree models: lifted endpoint positions,
//! topology one-hots, the query flag, and (3-D) log radii, vessel
//! embeddings, and the skip flag. Also the partial-tree representation used
//! by teacher forcing and recursive decoding.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::geometry::{lift_fourier, FourierConfig};
use crate::tree::{NodeId, VesselTree};

/// Vessel embedding length (first-stage latent size).
pub const Z_V_DIM: usize = 64;

/// Radius floor in millimeters before the log is taken.
pub const LOG_RADIUS_FLOOR_MM: f64 = 0.01;

/// One-hot encoding of a node's child count: bifurcation (1,0,0), single
/// child (0,1,0), leaf (0,0,1).
pub fn topology_one_hot(n_children: usize) -> [f64; 3] {
    match n_children {
        2 => [1.0, 0.0, 0.0],
        1 => [0.0, 1.0, 0.0],
        _ => [0.0, 0.0, 1.0],
    }
}

pub fn one_hot_to_children(one_hot: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in one_hot.iter().enumerate() {
        if v > one_hot[best] {
            best = i;
        }
    }
    match best {
        0 => 2,
        1 => 1,
        _ => 0,
    }
}

/// Similarity map from tree coordinates into the lifting window.
/// `lift = (tree - offset) / scale`; radii divide by `scale` as well.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftFrame {
    pub offset: [f64; 3],
    pub scale: f64,
}

impl LiftFrame {
    /// 2-D trees live in the unit square; shifting by 0.5 centers them in
    /// the one-period lifting window.
    pub fn for_2d() -> Self {
        LiftFrame { offset: [0.5, 0.5, 0.0], scale: 1.0 }
    }

    /// 3-D trees map their bounding box's longest side onto [-0.25, 0.25]
    /// with the box center at the origin.
    pub fn for_3d_tree(tree: &VesselTree) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut consider = |p: &[f64; 3]| {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        };
        for n in tree.nodes.values() {
            consider(&n.pos);
        }
        for e in &tree.edges {
            if let Some(poly) = &e.polyline {
                for p in poly {
                    consider(&[p[0], p[1], p[2]]);
                }
            }
        }
        let longest = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]).max(1e-9);
        LiftFrame {
            offset: [
                (lo[0] + hi[0]) / 2.0,
                (lo[1] + hi[1]) / 2.0,
                (lo[2] + hi[2]) / 2.0,
            ],
            scale: longest / 0.5,
        }
    }

    pub fn identity() -> Self {
        LiftFrame { offset: [0.0; 3], scale: 1.0 }
    }

    pub fn to_lift(&self, p: &[f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.offset[0]) / self.scale,
            (p[1] - self.offset[1]) / self.scale,
            (p[2] - self.offset[2]) / self.scale,
        ]
    }

    pub fn to_tree(&self, p: &[f64; 3]) -> [f64; 3] {
        [
            p[0] * self.scale + self.offset[0],
            p[1] * self.scale + self.offset[1],
            p[2] * self.scale + self.offset[2],
        ]
    }

    pub fn radius_to_lift(&self, r_mm: f64) -> f64 {
        r_mm.max(LOG_RADIUS_FLOOR_MM) / self.scale
    }

    pub fn radius_to_tree(&self, r_lift: f64) -> f64 {
        r_lift * self.scale
    }
}

/// Widths and offsets of every feature block.
#[derive(Debug, Clone)]
pub struct FeatureLayout {
    pub dims: u8,
    pub fourier: FourierConfig,
}

impl FeatureLayout {
    pub fn new(dims: u8, fourier: FourierConfig) -> Self {
        FeatureLayout { dims, fourier }
    }

    /// Width of one lifted position.
    pub fn pos_width(&self) -> usize {
        self.dims as usize * self.fourier.width_per_coord()
    }

    fn has_extras(&self) -> bool {
        self.dims == 3
    }

    /// Full-tree edge feature width (no query flag).
    pub fn full_edge_width(&self) -> usize {
        let base = 2 * self.pos_width() + 6;
        if self.has_extras() {
            base + 2 + Z_V_DIM + 1
        } else {
            base
        }
    }

    /// Partial-tree edge feature width: query flag added; vessel embeddings
    /// and radii stripped (3-D keeps the skip flag).
    pub fn partial_edge_width(&self) -> usize {
        let base = 2 * self.pos_width() + 6 + 1;
        if self.has_extras() {
            base + 1
        } else {
            base
        }
    }

    /// Slot prediction / lifted target width.
    pub fn slot_width(&self) -> usize {
        let base = self.pos_width() + 3;
        if self.has_extras() {
            base + 1 + Z_V_DIM + 1
        } else {
            base
        }
    }

    pub fn slot_pos_offset(&self) -> usize {
        0
    }

    pub fn slot_topo_offset(&self) -> usize {
        self.pos_width()
    }

    pub fn slot_log_radius_offset(&self) -> Option<usize> {
        self.has_extras().then(|| self.pos_width() + 3)
    }

    pub fn slot_zv_offset(&self) -> Option<usize> {
        self.has_extras().then(|| self.pos_width() + 4)
    }

    pub fn slot_skip_offset(&self) -> Option<usize> {
        self.has_extras().then(|| self.pos_width() + 4 + Z_V_DIM)
    }

    fn lift_pos(&self, frame: &LiftFrame, pos: &[f64; 3]) -> Vec<f64> {
        let p = frame.to_lift(pos);
        lift_fourier(&p[..self.dims as usize], &self.fourier)
    }
}

/// One node of a partial tree: tree-frame position, optional radius, and
/// the node's total child count (known from ground truth when teacher
/// forcing, predicted during decoding).
#[derive(Debug, Clone, PartialEq)]
pub struct PartialNode {
    pub pos: [f64; 3],
    pub radius: Option<f64>,
    pub n_children: usize,
}

/// Prefix of a tree as it exists part-way through recursive decoding.
#[derive(Debug, Clone, Default)]
pub struct PartialTree {
    pub root: Option<NodeId>,
    pub nodes: BTreeMap<NodeId, PartialNode>,
    /// `(parent, child, skip)` in insertion order.
    pub edges: Vec<(NodeId, NodeId, bool)>,
}

impl PartialTree {
    pub fn empty() -> Self {
        PartialTree::default()
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    /// Node ids on the root -> `target` chain (inclusive).
    pub fn path_from_root(&self, target: NodeId) -> Result<Vec<NodeId>> {
        let root = self.root.ok_or_else(|| Error::InvalidTree("empty partial tree".into()))?;
        let mut path = vec![target];
        let mut cur = target;
        while cur != root {
            let parent = self
                .edges
                .iter()
                .find(|(_, c, _)| *c == cur)
                .map(|(p, _, _)| *p)
                .ok_or_else(|| Error::InvalidTree(format!("node {cur} has no parent in partial tree")))?;
            path.push(parent);
            cur = parent;
            if path.len() > self.nodes.len() + 1 {
                return Err(Error::InvalidTree("cycle in partial tree".into()));
            }
        }
        path.reverse();
        Ok(path)
    }
}

/// One teacher-forced decoding step: the partial tree as it exists when the
/// step runs, the query (None for the root step), and the target children
/// (the root itself for the root step).
#[derive(Debug, Clone)]
pub struct DecodeStep {
    pub query: Option<NodeId>,
    pub partial: PartialTree,
    pub targets: Vec<NodeId>,
}

/// Simulate breadth-first decoding of a ground-truth tree and snapshot the
/// partial tree at every step.
pub fn decode_steps(tree: &VesselTree) -> Vec<DecodeStep> {
    let mut steps = Vec::new();
    let node_radius = |id: NodeId| tree.nodes[&id].radius;
    // root step: empty partial tree, target = root
    steps.push(DecodeStep {
        query: None,
        partial: PartialTree::empty(),
        targets: vec![tree.root],
    });
    let mut partial = PartialTree::empty();
    partial.root = Some(tree.root);
    partial.nodes.insert(
        tree.root,
        PartialNode {
            pos: tree.nodes[&tree.root].pos,
            radius: node_radius(tree.root),
            n_children: tree.n_children(tree.root),
        },
    );
    let mut queue: VecDeque<NodeId> = VecDeque::new();
    if tree.n_children(tree.root) > 0 {
        queue.push_back(tree.root);
    }
    while let Some(q) = queue.pop_front() {
        let children = tree.children(q);
        steps.push(DecodeStep {
            query: Some(q),
            partial: partial.clone(),
            targets: children.clone(),
        });
        for c in children {
            partial.nodes.insert(
                c,
                PartialNode {
                    pos: tree.nodes[&c].pos,
                    radius: node_radius(c),
                    n_children: tree.n_children(c),
                },
            );
            let skip = tree.edge(q, c).map(|e| e.skip).unwrap_or(false);
            partial.edges.push((q, c, skip));
            if tree.n_children(c) > 0 {
                queue.push_back(c);
            }
        }
    }
    steps
}

/// Featurized edge set: raw rows, the active mask, and the placeholder row
/// that the model replaces with its learned start token.
#[derive(Debug, Clone)]
pub struct EdgeFeatures {
    pub rows: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub start_row: Option<usize>,
    pub width: usize,
}

impl EdgeFeatures {
    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Featurize the full tree: the semi-edge (root, root) first, then every
/// directed edge in stored order. 3-D features append log radii, the edge's
/// vessel embedding, and the skip flag.
pub fn featurize_full(
    tree: &VesselTree,
    layout: &FeatureLayout,
    frame: &LiftFrame,
    vessel_embeddings: Option<&BTreeMap<(NodeId, NodeId), Vec<f64>>>,
) -> Result<EdgeFeatures> {
    let width = layout.full_edge_width();
    let mut rows = Vec::with_capacity(tree.edge_count() + 1);
    let mut push_edge = |a: NodeId, b: NodeId, skip: bool| -> Result<()> {
        let na = &tree.nodes[&a];
        let nb = &tree.nodes[&b];
        let mut row = Vec::with_capacity(width);
        row.extend(layout.lift_pos(frame, &na.pos));
        row.extend(layout.lift_pos(frame, &nb.pos));
        row.extend(topology_one_hot(tree.n_children(a)));
        row.extend(topology_one_hot(tree.n_children(b)));
        if layout.dims == 3 {
            let ra = na.radius.ok_or_else(|| Error::InvalidTree(format!("node {a} has no radius")))?;
            let rb = nb.radius.ok_or_else(|| Error::InvalidTree(format!("node {b} has no radius")))?;
            row.push(frame.radius_to_lift(ra).ln());
            row.push(frame.radius_to_lift(rb).ln());
            let zv = vessel_embeddings.and_then(|m| m.get(&(a, b)));
            match zv {
                Some(z) if a != b && !skip => {
                    if z.len() != Z_V_DIM {
                        return Err(Error::InvalidArgument {
                            op: "featurize_full",
                            detail: format!("vessel embedding of length {}", z.len()),
                        });
                    }
                    row.extend_from_slice(z);
                }
                _ => row.extend(std::iter::repeat(0.0).take(Z_V_DIM)),
            }
            row.push(if skip { 1.0 } else { 0.0 });
        }
        debug_assert_eq!(row.len(), width);
        rows.push(row);
        Ok(())
    };
    // semi-edge is part of both the full and partial representations
    push_edge(tree.root, tree.root, false)?;
    for e in &tree.edges {
        push_edge(e.parent, e.child, e.skip)?;
    }
    let mask = vec![true; rows.len()];
    Ok(EdgeFeatures { rows, mask, start_row: None, width })
}

/// Featurize a partial tree for one decoding step. Row 0 is the start-token
/// placeholder; the semi-edge follows once a root exists, then the partial
/// edges. The query flag marks edges whose incoming node is the query.
/// Vessel embeddings and radii are never included (3-D keeps the skip flag).
pub fn featurize_partial(
    partial: &PartialTree,
    query: Option<NodeId>,
    layout: &FeatureLayout,
    frame: &LiftFrame,
    position_override: Option<&BTreeMap<NodeId, [f64; 3]>>,
) -> Result<EdgeFeatures> {
    if let Some(q) = query {
        if !partial.contains(q) {
            return Err(Error::InvalidArgument {
                op: "featurize_partial",
                detail: format!("query node {q} not in partial tree"),
            });
        }
    }
    let width = layout.partial_edge_width();
    let pos_of = |id: NodeId| -> [f64; 3] {
        position_override
            .and_then(|m| m.get(&id))
            .copied()
            .unwrap_or(partial.nodes[&id].pos)
    };
    let mut rows = Vec::new();
    rows.push(vec![0.0; width]); // start-token placeholder
    if let Some(root) = partial.root {
        let mut push_edge = |a: NodeId, b: NodeId, skip: bool| {
            let mut row = Vec::with_capacity(width);
            row.extend(layout.lift_pos(frame, &pos_of(a)));
            row.extend(layout.lift_pos(frame, &pos_of(b)));
            row.extend(topology_one_hot(partial.nodes[&a].n_children));
            row.extend(topology_one_hot(partial.nodes[&b].n_children));
            row.push(if query == Some(b) { 1.0 } else { 0.0 });
            if layout.dims == 3 {
                row.push(if skip { 1.0 } else { 0.0 });
            }
            debug_assert_eq!(row.len(), width);
            rows.push(row);
        };
        push_edge(root, root, false);
        for &(a, b, skip) in &partial.edges {
            push_edge(a, b, skip);
        }
    }
    let mask = vec![true; rows.len()];
    Ok(EdgeFeatures { rows, mask, start_row: Some(0), width })
}

/// Zero the mask on partial-tree edges that do not lie on the
/// root -> query path. The start token and the semi-edge stay active.
pub fn filter_non_proximal(
    features: &mut EdgeFeatures,
    partial: &PartialTree,
    query: NodeId,
) -> Result<()> {
    if partial.is_empty() {
        return Ok(());
    }
    let path = partial.path_from_root(query)?;
    let on_path = |a: NodeId, b: NodeId| {
        path.windows(2).any(|w| w[0] == a && w[1] == b)
    };
    // row 0 = start token, row 1 = semi-edge, rows 2.. = partial edges
    for (i, &(a, b, _)) in partial.edges.iter().enumerate() {
        let row = i + 2;
        if row < features.mask.len() {
            features.mask[row] = on_path(a, b);
        }
    }
    Ok(())
}

/// A ground-truth child for one decoding step, in tree-frame coordinates.
#[derive(Debug, Clone)]
pub struct ChildTarget {
    pub pos: [f64; 3],
    pub n_children: usize,
    pub radius: Option<f64>,
    pub z_v: Option<Vec<f64>>,
    pub skip: bool,
}

impl ChildTarget {
    pub fn from_tree(tree: &VesselTree, parent: Option<NodeId>, child: NodeId) -> Self {
        let node = &tree.nodes[&child];
        let skip = parent
            .and_then(|p| tree.edge(p, child))
            .map(|e| e.skip)
            .unwrap_or(false);
        ChildTarget {
            pos: node.pos,
            n_children: tree.n_children(child),
            radius: node.radius,
            z_v: None,
            skip,
        }
    }
}

/// Lift targets into the slot codomain. Returns `(rows, component_mask)`
/// flattened to `targets.len() x slot_width`; skip-flagged targets zero
/// their vessel-embedding block in both the row and the mask, so those
/// components contribute no cost.
pub fn lift_targets(
    targets: &[ChildTarget],
    layout: &FeatureLayout,
    frame: &LiftFrame,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = layout.slot_width();
    let mut rows = Vec::with_capacity(targets.len() * w);
    let mut mask = Vec::with_capacity(targets.len() * w);
    for t in targets {
        let mut row = Vec::with_capacity(w);
        row.extend(layout.lift_pos(frame, &t.pos));
        row.extend(topology_one_hot(t.n_children));
        let mut mrow = vec![1.0; w];
        if layout.dims == 3 {
            let r = t.radius.ok_or_else(|| Error::InvalidArgument {
                op: "lift_targets",
                detail: "3-D target without radius".into(),
            })?;
            row.push(frame.radius_to_lift(r).ln());
            let zv_off = row.len();
            match (&t.z_v, t.skip) {
                (Some(z), false) => {
                    if z.len() != Z_V_DIM {
                        return Err(Error::InvalidArgument {
                            op: "lift_targets",
                            detail: format!("vessel embedding of length {}", z.len()),
                        });
                    }
                    row.extend_from_slice(z);
                }
                _ => {
                    row.extend(std::iter::repeat(0.0).take(Z_V_DIM));
                    // skip targets exclude the embedding from the cost
                    for m in mrow[zv_off..zv_off + Z_V_DIM].iter_mut() {
                        *m = 0.0;
                    }
                }
            }
            row.push(if t.skip { 1.0 } else { 0.0 });
        }
        debug_assert_eq!(row.len(), w);
        rows.extend(row);
        mask.extend(mrow);
    }
    Ok((rows, mask))
}
