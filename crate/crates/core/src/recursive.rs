//! Inference-time recursive decoding: grow a tree from `z_t` one node
//! expansion at a time. The output is tree-structured by construction for
//! any weights and any latent.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::features::{
    featurize_partial, filter_non_proximal, one_hot_to_children, LiftFrame, PartialNode,
    PartialTree, Z_V_DIM,
};
use crate::geometry::{invert_fourier, PolylineVessel, LIFT_DOMAIN};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::tree::{NodeId, TreeEdge, TreeNode, VesselTree};
use crate::tree_ae::TreeAe;
use crate::vessel_ae::VesselAe;

/// Expansion order of the open-node queue. Breadth-first is the default;
/// depth-first exists to demonstrate order independence (non-proximal
/// filtering hides sibling subtrees, so geometry is unchanged).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpandOrder {
    Fifo,
    Lifo,
}

/// Frozen first-stage decoder used to rebuild 3-D edge geometry.
pub struct VesselDecodeContext<'a> {
    pub model: &'a VesselAe,
    pub store: &'a ParamStore<f32>,
    pub samples_per_edge: usize,
}

/// Decoded tree plus bookkeeping flags.
#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub tree: VesselTree,
    /// Hit the node budget before the queue drained.
    pub truncated: bool,
    /// Number of degenerate edges (coincident endpoints) that were emitted
    /// as epsilon-length stubs.
    pub degenerate_edges: usize,
}

/// Child properties read out of one slot cluster.
#[derive(Debug, Clone)]
pub struct DecodedChild {
    pub pos: [f64; 3],
    pub n_children: usize,
    pub radius: Option<f64>,
    pub z_v: Option<Vec<f64>>,
    pub skip: bool,
}

fn interpret_cluster(
    model: &TreeAe,
    frame: &LiftFrame,
    mean: &[f64],
) -> Result<DecodedChild> {
    let layout = &model.layout;
    let pos_w = layout.pos_width();
    let coords = invert_fourier(&mean[..pos_w], &model.cfg.fourier, LIFT_DOMAIN)?;
    let mut lift_pos = [0.0f64; 3];
    lift_pos[..coords.len()].copy_from_slice(&coords);
    let pos = frame.to_tree(&lift_pos);
    let topo = layout.slot_topo_offset();
    let n_children = one_hot_to_children(&mean[topo..topo + 3]);
    if model.cfg.dims == 3 {
        let logr = mean[layout.slot_log_radius_offset().unwrap()];
        let radius = frame.radius_to_tree(logr.exp());
        let zv_off = layout.slot_zv_offset().unwrap();
        let z_v = mean[zv_off..zv_off + Z_V_DIM].to_vec();
        // slots regress the {0, 1} flag; decide at the midpoint
        let skip = mean[layout.slot_skip_offset().unwrap()] > 0.5;
        Ok(DecodedChild {
            pos,
            n_children,
            radius: Some(radius),
            z_v: if skip { None } else { Some(z_v) },
            skip,
        })
    } else {
        Ok(DecodedChild { pos, n_children, radius: None, z_v: None, skip: false })
    }
}

/// Run one decoding step: featurize the partial tree around `query`
/// (None for the root step), decode slots, cluster them into `k` children,
/// and read out their properties. Children of a bifurcation are ordered by
/// x coordinate.
pub fn expand_query(
    model: &TreeAe,
    store: &ParamStore<f32>,
    partial: &PartialTree,
    query: Option<NodeId>,
    z: &Tensor<f32>,
    frame: &LiftFrame,
    k: usize,
) -> Result<Vec<DecodedChild>> {
    let mut feats = featurize_partial(partial, query, &model.layout, frame, None)?;
    if let Some(q) = query {
        filter_non_proximal(&mut feats, partial, q)?;
    }
    let memory = model.encode_partial(store, &feats, z)?;
    let slots = model.decode_slots(store, &memory, &feats.mask)?;
    let slot_data = slots.to_f64_vec();
    let clusters = crate::matching::cluster_slots(
        &slot_data,
        model.cfg.slots,
        model.layout.slot_width(),
        k,
    )?;
    let mut children: Vec<DecodedChild> = clusters
        .iter()
        .map(|(mean, _)| interpret_cluster(model, frame, mean))
        .collect::<Result<_>>()?;
    children.sort_by(|a, b| a.pos[0].partial_cmp(&b.pos[0]).unwrap());
    Ok(children)
}

/// Straight 2-point span densified to `samples` points with linearly
/// interpolated radii.
fn straight_polyline(a: &[f64; 4], b: &[f64; 4], samples: usize) -> Vec<[f64; 4]> {
    (0..samples)
        .map(|i| {
            let t = i as f64 / (samples - 1) as f64;
            [
                a[0] + (b[0] - a[0]) * t,
                a[1] + (b[1] - a[1]) * t,
                a[2] + (b[2] - a[2]) * t,
                a[3] + (b[3] - a[3]) * t,
            ]
        })
        .collect()
}

/// Rebuild the continuous geometry of one decoded edge. Skip edges are
/// straight interpolations; everything else evaluates the vessel decoder at
/// uniformly spaced `t` in eval mode and denormalizes into the parent
/// frame. Returns the polyline and whether the edge was degenerate.
pub fn reconstruct_edge_geometry(
    ctx: &VesselDecodeContext<'_>,
    parent: &[f64; 4],
    child: &[f64; 4],
    z_v: Option<&[f64]>,
    skip: bool,
) -> Result<(Vec<[f64; 4]>, bool)> {
    let n = ctx.samples_per_edge.max(2);
    let span = ((parent[0] - child[0]).powi(2)
        + (parent[1] - child[1]).powi(2)
        + (parent[2] - child[2]).powi(2))
    .sqrt();
    if span <= 1e-12 {
        // coincident endpoints: emit an epsilon-length stub
        let stub_end = [child[0] + 1e-9, child[1], child[2], child[3]];
        return Ok((straight_polyline(parent, &stub_end, n), true));
    }
    let (z_v, skip) = match (z_v, skip) {
        (Some(z), false) => (z, false),
        _ => return Ok((straight_polyline(parent, child, n), false)),
    };
    // normalized frame: parent at origin with unit radius, child on the
    // unit sphere
    let a = [0.0, 0.0, 0.0, 1.0];
    let b = [
        (child[0] - parent[0]) / span,
        (child[1] - parent[1]) / span,
        (child[2] - parent[2]) / span,
        child[3] / parent[3],
    ];
    let ts: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let z_t = Tensor::<f32>::from_f64s(1, Z_V_DIM, z_v)?;
    let pts = ctx.model.reconstruct_points(ctx.store, &z_t, &a, &b, &ts, false)?;
    let poly = pts
        .iter()
        .map(|p| {
            [
                p[0] * span + parent[0],
                p[1] * span + parent[1],
                p[2] * span + parent[2],
                (p[3] * parent[3]).max(1e-6),
            ]
        })
        .collect();
    Ok((poly, false))
}

/// Decode a complete tree from `z_t`. The root step clusters with K = 1;
/// every later step expands the front of the open queue with K equal to the
/// node's predicted child count. Output always satisfies the tree
/// invariants; hitting `max_nodes` truncates and sets the flag.
pub fn decode_tree(
    model: &TreeAe,
    store: &ParamStore<f32>,
    z: &[f64],
    frame: &LiftFrame,
    vessel: Option<&VesselDecodeContext<'_>>,
    order: ExpandOrder,
) -> Result<DecodeOutcome> {
    if z.len() != model.cfg.z_dim {
        return Err(Error::InvalidArgument {
            op: "decode_tree",
            detail: format!("latent of {} for z_dim {}", z.len(), model.cfg.z_dim),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument {
            op: "decode_tree",
            detail: "non-finite latent".into(),
        });
    }
    let z_t = Tensor::<f32>::from_f64s(1, model.cfg.z_dim, z)?;
    let max_nodes = model.cfg.max_nodes;

    let mut partial = PartialTree::empty();
    let mut queue: VecDeque<NodeId> = VecDeque::new();
    let mut edge_children: BTreeMap<NodeId, DecodedChild> = BTreeMap::new();
    let mut truncated = false;

    // root step
    let root_children = expand_query(model, store, &partial, None, &z_t, frame, 1)?;
    let root_spec = root_children.into_iter().next().ok_or(Error::InvalidArgument {
        op: "decode_tree",
        detail: "root step produced no cluster".into(),
    })?;
    let root: NodeId = 0;
    partial.root = Some(root);
    partial.nodes.insert(
        root,
        PartialNode {
            pos: root_spec.pos,
            radius: root_spec.radius,
            n_children: root_spec.n_children,
        },
    );
    if root_spec.n_children > 0 {
        queue.push_back(root);
    }
    edge_children.insert(root, root_spec);
    let mut next_id: NodeId = 1;

    while let Some(q) = match order {
        ExpandOrder::Fifo => queue.pop_front(),
        ExpandOrder::Lifo => queue.pop_back(),
    } {
        let k = partial.nodes[&q].n_children.clamp(1, 2);
        if partial.nodes.len() + k > max_nodes {
            truncated = true;
            break;
        }
        let children = expand_query(model, store, &partial, Some(q), &z_t, frame, k)?;
        for spec in children {
            let id = next_id;
            next_id += 1;
            partial.nodes.insert(
                id,
                PartialNode {
                    pos: spec.pos,
                    radius: spec.radius,
                    n_children: spec.n_children,
                },
            );
            partial.edges.push((q, id, spec.skip));
            if spec.n_children > 0 {
                queue.push_back(id);
            }
            edge_children.insert(id, spec);
        }
    }

    // materialize the tree; node child counts derive from the edges that
    // actually exist, so truncated frontiers export as leaves
    let mut nodes = BTreeMap::new();
    for (&id, n) in &partial.nodes {
        nodes.insert(
            id,
            TreeNode {
                pos: n.pos,
                radius: n.radius.map(|r| r.max(1e-6)),
            },
        );
    }
    let mut degenerate_edges = 0usize;
    let mut edges = Vec::with_capacity(partial.edges.len());
    for &(parent, child, skip) in &partial.edges {
        let polyline = if model.cfg.dims == 3 {
            if let Some(ctx) = vessel {
                let pnode = &nodes[&parent];
                let cnode = &nodes[&child];
                let a = [pnode.pos[0], pnode.pos[1], pnode.pos[2], pnode.radius.unwrap_or(1.0)];
                let b = [cnode.pos[0], cnode.pos[1], cnode.pos[2], cnode.radius.unwrap_or(1.0)];
                let z_v = edge_children.get(&child).and_then(|s| s.z_v.as_deref());
                let (poly, degenerate) = reconstruct_edge_geometry(ctx, &a, &b, z_v, skip)?;
                if degenerate {
                    degenerate_edges += 1;
                }
                Some(poly)
            } else {
                None
            }
        } else {
            None
        };
        edges.push(TreeEdge { parent, child, polyline, skip });
    }
    let tree = VesselTree { dims: model.cfg.dims, root, nodes, edges };
    tree.validate()?;
    Ok(DecodeOutcome { tree, truncated, degenerate_edges })
}

/// Structural signature for isomorphism checks: child subtrees sorted by
/// quantized position, recursively.
pub fn tree_signature(tree: &VesselTree, id: NodeId) -> String {
    let mut child_sigs: Vec<String> = tree
        .children(id)
        .into_iter()
        .map(|c| {
            let p = tree.nodes[&c].pos;
            format!(
                "({:.6},{:.6},{:.6}:{})",
                p[0],
                p[1],
                p[2],
                tree_signature(tree, c)
            )
        })
        .collect();
    child_sigs.sort();
    child_sigs.join(",")
}
