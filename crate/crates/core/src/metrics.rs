//! Evaluation metrics: centerline Hausdorff / average distance / F1 on
//! point sets, voxel Dice for 3-D tube trees, and surface point-sample
//! distances. Nearest-neighbor queries run on a spatial hash grid with a
//! naive fallback; both compute identical values.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tree::VesselTree;

fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Spatial hash over points; nearest queries scan cell rings outward until
/// the ring bound exceeds the best distance found.
pub struct PointGrid {
    cell: f64,
    origin: [f64; 3],
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    points: Vec<[f64; 3]>,
}

impl PointGrid {
    pub fn build(points: &[[f64; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument {
                op: "point_grid",
                detail: "empty point set".into(),
            });
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
        let target_cells = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = (extent / target_cells).max(1e-9);
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, &lo, cell)).or_default().push(i);
        }
        Ok(PointGrid { cell, origin: lo, cells, points: points.to_vec() })
    }

    fn key(p: &[f64; 3], origin: &[f64; 3], cell: f64) -> (i64, i64, i64) {
        (
            ((p[0] - origin[0]) / cell).floor() as i64,
            ((p[1] - origin[1]) / cell).floor() as i64,
            ((p[2] - origin[2]) / cell).floor() as i64,
        )
    }

    /// Squared distance to the nearest stored point.
    pub fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let (cx, cy, cz) = Self::key(q, &self.origin, self.cell);
        let mut best = f64::INFINITY;
        let mut ring = 0i64;
        loop {
            // points in rings > ring lie at least ring*cell away
            if best.is_finite() {
                let bound = ring as f64 * self.cell;
                if best <= bound * bound {
                    return best;
                }
            }
            let mut any_cell_possible = false;
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        any_cell_possible = true;
                        if let Some(idxs) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &i in idxs {
                                let d = dist_sq(q, &self.points[i]);
                                if d < best {
                                    best = d;
                                }
                            }
                        }
                    }
                }
            }
            ring += 1;
            // safety: beyond the whole data extent every cell is empty
            if !any_cell_possible || ring > 4_000_000 {
                return best;
            }
        }
    }
}

/// Naive reference: exact linear scan.
pub fn nearest_sq_naive(points: &[[f64; 3]], q: &[f64; 3]) -> f64 {
    points.iter().map(|p| dist_sq(q, p)).fold(f64::INFINITY, f64::min)
}

fn directed_min_dists(from: &[[f64; 3]], to_grid: &PointGrid) -> Vec<f64> {
    from.iter().map(|p| to_grid.nearest_sq(p).sqrt()).collect()
}

fn check_nonempty(a: &[[f64; 3]], b: &[[f64; 3]], op: &'static str) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument { op, detail: "empty point set".into() });
    }
    Ok(())
}

/// Symmetric Hausdorff distance: `max(max_a min_b d, max_b min_a d)`.
pub fn centerline_hausdorff(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_nonempty(a, b, "centerline_hausdorff")?;
    let ga = PointGrid::build(a)?;
    let gb = PointGrid::build(b)?;
    let fwd = directed_min_dists(a, &gb).into_iter().fold(0.0, f64::max);
    let bwd = directed_min_dists(b, &ga).into_iter().fold(0.0, f64::max);
    Ok(fwd.max(bwd))
}

/// Symmetric average nearest-point distance:
/// `(mean_a min_b d + mean_b min_a d) / 2`.
pub fn avg_centerline_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check_nonempty(a, b, "avg_centerline_distance")?;
    let ga = PointGrid::build(a)?;
    let gb = PointGrid::build(b)?;
    let fwd: f64 = directed_min_dists(a, &gb).iter().sum::<f64>() / a.len() as f64;
    let bwd: f64 = directed_min_dists(b, &ga).iter().sum::<f64>() / b.len() as f64;
    Ok(0.5 * (fwd + bwd))
}

/// Threshold F1: precision = fraction of `a` within `tau` of `b`, recall =
/// fraction of `b` within `tau` of `a`; zero when both vanish.
pub fn centerline_f1(a: &[[f64; 3]], b: &[[f64; 3]], tau: f64) -> Result<f64> {
    check_nonempty(a, b, "centerline_f1")?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument {
            op: "centerline_f1",
            detail: format!("tau = {tau} must be positive"),
        });
    }
    let ga = PointGrid::build(a)?;
    let gb = PointGrid::build(b)?;
    let tau_sq = tau * tau;
    let precision = a.iter().filter(|p| gb.nearest_sq(p) <= tau_sq).count() as f64 / a.len() as f64;
    let recall = b.iter().filter(|p| ga.nearest_sq(p) <= tau_sq).count() as f64 / b.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Spheres swept along every edge of a 3-D tube tree.
fn tree_spheres(tree: &VesselTree) -> Result<Vec<([f64; 3], f64)>> {
    let mut out = Vec::new();
    for e in &tree.edges {
        match &e.polyline {
            Some(poly) => {
                for p in poly {
                    out.push(([p[0], p[1], p[2]], p[3]));
                }
            }
            None => {
                let a = &tree.nodes[&e.parent];
                let b = &tree.nodes[&e.child];
                let (ra, rb) = match (a.radius, b.radius) {
                    (Some(ra), Some(rb)) => (ra, rb),
                    _ => {
                        return Err(Error::InvalidArgument {
                            op: "tree_spheres",
                            detail: "3-D metric on a tree without radii".into(),
                        })
                    }
                };
                for i in 0..100 {
                    let t = i as f64 / 99.0;
                    out.push((
                        [
                            a.pos[0] + (b.pos[0] - a.pos[0]) * t,
                            a.pos[1] + (b.pos[1] - a.pos[1]) * t,
                            a.pos[2] + (b.pos[2] - a.pos[2]) * t,
                        ],
                        ra + (rb - ra) * t,
                    ));
                }
            }
        }
    }
    if out.is_empty() {
        // single node: one sphere
        let n = &tree.nodes[&tree.root];
        match n.radius {
            Some(r) => out.push((n.pos, r)),
            None => {
                return Err(Error::InvalidArgument {
                    op: "tree_spheres",
                    detail: "3-D metric on a tree without radii".into(),
                })
            }
        }
    }
    Ok(out)
}

fn voxelize(
    spheres: &[([f64; 3], f64)],
    lo: [f64; 3],
    dims: [usize; 3],
    vox: f64,
) -> Vec<bool> {
    let mut grid = vec![false; dims[0] * dims[1] * dims[2]];
    for (c, r) in spheres {
        let r_sq = r * r;
        let min_i = |axis: usize| (((c[axis] - r - lo[axis]) / vox).floor().max(0.0)) as usize;
        let max_i = |axis: usize, n: usize| {
            (((c[axis] + r - lo[axis]) / vox).ceil() as usize).min(n.saturating_sub(1))
        };
        for ix in min_i(0)..=max_i(0, dims[0]) {
            let x = lo[0] + (ix as f64 + 0.5) * vox;
            for iy in min_i(1)..=max_i(1, dims[1]) {
                let y = lo[1] + (iy as f64 + 0.5) * vox;
                for iz in min_i(2)..=max_i(2, dims[2]) {
                    let z = lo[2] + (iz as f64 + 0.5) * vox;
                    if dist_sq(&[x, y, z], c) <= r_sq {
                        grid[(ix * dims[1] + iy) * dims[2] + iz] = true;
                    }
                }
            }
        }
    }
    grid
}

/// Voxel-overlap Dice between the swept-sphere tube unions of two 3-D
/// trees, rasterized on a shared cubic grid with `resolution` voxels along
/// the longest side of the joint bounding box.
pub fn dice_voxel(tree_a: &VesselTree, tree_b: &VesselTree, resolution: usize) -> Result<f64> {
    if resolution < 4 {
        return Err(Error::InvalidArgument {
            op: "dice_voxel",
            detail: "resolution must be at least 4".into(),
        });
    }
    let sa = tree_spheres(tree_a)?;
    let sb = tree_spheres(tree_b)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (c, r) in sa.iter().chain(sb.iter()) {
        for axis in 0..3 {
            lo[axis] = lo[axis].min(c[axis] - r);
            hi[axis] = hi[axis].max(c[axis] + r);
        }
    }
    let longest = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]).max(1e-9);
    let vox = longest / resolution as f64;
    let dims = [
        ((hi[0] - lo[0]) / vox).ceil().max(1.0) as usize,
        ((hi[1] - lo[1]) / vox).ceil().max(1.0) as usize,
        ((hi[2] - lo[2]) / vox).ceil().max(1.0) as usize,
    ];
    let ga = voxelize(&sa, lo, dims, vox);
    let gb = voxelize(&sb, lo, dims, vox);
    let va = ga.iter().filter(|&&v| v).count();
    let vb = gb.iter().filter(|&&v| v).count();
    if va == 0 || vb == 0 {
        return Err(Error::InvalidArgument {
            op: "dice_voxel",
            detail: "empty voxel volume".into(),
        });
    }
    let inter = ga.iter().zip(&gb).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * inter as f64 / (va + vb) as f64)
}

/// Deterministic ring sampling of a tube tree's lateral surface: rings
/// along each edge polyline with 16 points at the local radius.
pub fn tube_surface_points(tree: &VesselTree) -> Result<Vec<[f64; 3]>> {
    let spheres = tree_spheres(tree)?;
    let mut out = Vec::new();
    let ring_n = 16;
    for window in spheres.windows(2) {
        let (c0, r0) = window[0];
        let (c1, _) = window[1];
        let tangent = [c1[0] - c0[0], c1[1] - c0[1], c1[2] - c0[2]];
        let norm = (tangent[0].powi(2) + tangent[1].powi(2) + tangent[2].powi(2)).sqrt();
        if norm < 1e-12 {
            continue;
        }
        let t = [tangent[0] / norm, tangent[1] / norm, tangent[2] / norm];
        let pick = if t[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let mut u = [
            t[1] * pick[2] - t[2] * pick[1],
            t[2] * pick[0] - t[0] * pick[2],
            t[0] * pick[1] - t[1] * pick[0],
        ];
        let un = (u[0].powi(2) + u[1].powi(2) + u[2].powi(2)).sqrt();
        u = [u[0] / un, u[1] / un, u[2] / un];
        let v = [
            t[1] * u[2] - t[2] * u[1],
            t[2] * u[0] - t[0] * u[2],
            t[0] * u[1] - t[1] * u[0],
        ];
        for k in 0..ring_n {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / ring_n as f64;
            let (s, c) = phi.sin_cos();
            out.push([
                c0[0] + r0 * (c * u[0] + s * v[0]),
                c0[1] + r0 * (c * u[1] + s * v[1]),
                c0[2] + r0 * (c * u[2] + s * v[2]),
            ]);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument {
            op: "tube_surface_points",
            detail: "no surface samples (degenerate tree)".into(),
        });
    }
    Ok(out)
}

/// `(hausdorff, symmetric average)` distance between the sampled tube
/// surfaces of two 3-D trees.
pub fn surface_point_distances(tree_a: &VesselTree, tree_b: &VesselTree) -> Result<(f64, f64)> {
    let pa = tube_surface_points(tree_a)?;
    let pb = tube_surface_points(tree_b)?;
    Ok((centerline_hausdorff(&pa, &pb)?, avg_centerline_distance(&pa, &pb)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{TreeEdge, TreeNode};
    use std::collections::BTreeMap;

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 33) as f64) / (u32::MAX as f64)
    }

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut s = seed | 1;
        (0..n).map(|_| [lcg(&mut s), lcg(&mut s), lcg(&mut s)]).collect()
    }

    #[test]
    fn identical_sets_have_zero_distances() {
        let a = random_points(50, 3);
        assert_eq!(centerline_hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(avg_centerline_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(centerline_f1(&a, &a, 0.05).unwrap(), 1.0);
    }

    #[test]
    fn singleton_cases() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(centerline_hausdorff(&a, &b).unwrap(), 1.0);
        let c = vec![[2.0, 0.0, 0.0]];
        assert_eq!(avg_centerline_distance(&a, &c).unwrap(), 2.0);
    }

    #[test]
    fn grid_matches_naive_exactly() {
        for seed in 0..10u64 {
            let a = random_points(200, seed * 2 + 1);
            let queries = random_points(100, seed * 2 + 2);
            let grid = PointGrid::build(&a).unwrap();
            for q in &queries {
                assert_eq!(grid.nearest_sq(q), nearest_sq_naive(&a, q), "seed {seed}");
            }
        }
    }

    #[test]
    fn metrics_match_naive_oracle() {
        for seed in 0..5u64 {
            let a = random_points(80, seed + 11);
            let b = random_points(60, seed + 99);
            let chd = centerline_hausdorff(&a, &b).unwrap();
            let acd = avg_centerline_distance(&a, &b).unwrap();
            // naive recomputation
            let fwd: Vec<f64> = a.iter().map(|p| nearest_sq_naive(&b, p).sqrt()).collect();
            let bwd: Vec<f64> = b.iter().map(|p| nearest_sq_naive(&a, p).sqrt()).collect();
            let chd_naive = fwd.iter().cloned().fold(0.0, f64::max)
                .max(bwd.iter().cloned().fold(0.0, f64::max));
            let acd_naive = 0.5
                * (fwd.iter().sum::<f64>() / fwd.len() as f64
                    + bwd.iter().sum::<f64>() / bwd.len() as f64);
            assert_eq!(chd, chd_naive);
            assert!((acd - acd_naive).abs() < 1e-15);
            assert!(acd <= chd + 1e-15, "ACD <= CHD");
        }
    }

    #[test]
    fn f1_constructed_two_thirds() {
        // half of A within tau of B, all of B covered
        let mut a = vec![[0.0, 0.0, 0.0]; 10];
        a.extend(vec![[5.0, 5.0, 5.0]; 10]);
        let b = vec![[0.0, 0.0, 0.0]];
        let f1 = centerline_f1(&a, &b, 0.05).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_disjoint_far_sets_zero() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[9.0, 9.0, 9.0]];
        assert_eq!(centerline_f1(&a, &b, 0.05).unwrap(), 0.0);
    }

    fn sphere_tree(center: [f64; 3], r: f64) -> VesselTree {
        // an epsilon-length edge of constant radius sweeps a single sphere
        let mut nodes = BTreeMap::new();
        nodes.insert(0, TreeNode { pos: center, radius: Some(r) });
        let end = [center[0] + 1e-9, center[1], center[2]];
        nodes.insert(1, TreeNode { pos: end, radius: Some(r) });
        VesselTree {
            dims: 3,
            root: 0,
            nodes,
            edges: vec![TreeEdge {
                parent: 0,
                child: 1,
                polyline: Some(vec![
                    [center[0], center[1], center[2], r],
                    [end[0], end[1], end[2], r],
                ]),
                skip: false,
            }],
        }
    }

    #[test]
    fn dice_identical_and_disjoint() {
        let a = sphere_tree([0.0, 0.0, 0.0], 1.0);
        assert_eq!(dice_voxel(&a, &a, 32).unwrap(), 1.0);
        let b = sphere_tree([10.0, 0.0, 0.0], 1.0);
        assert_eq!(dice_voxel(&a, &b, 32).unwrap(), 0.0);
    }

    #[test]
    fn dice_shifted_spheres_match_analytic_overlap() {
        let r = 1.0f64;
        let d = 0.8f64;
        let a = sphere_tree([0.0, 0.0, 0.0], r);
        let b = sphere_tree([d, 0.0, 0.0], r);
        // lens volume of two equal spheres at distance d
        let lens = std::f64::consts::PI / 12.0 * (4.0 * r + d) * (2.0 * r - d).powi(2);
        let sphere_vol = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        let analytic = lens / sphere_vol; // 2*lens / (2*vol)
        let dice = dice_voxel(&a, &b, 128).unwrap();
        assert!(
            (dice - analytic).abs() <= 0.03 * analytic,
            "dice {dice} vs analytic {analytic}"
        );
    }

    fn straight_tube(r: f64, len: f64, n: usize) -> VesselTree {
        let mut nodes = BTreeMap::new();
        nodes.insert(0, TreeNode { pos: [0.0, 0.0, 0.0], radius: Some(r) });
        nodes.insert(1, TreeNode { pos: [0.0, 0.0, len], radius: Some(r) });
        let poly: Vec<[f64; 4]> = (0..n)
            .map(|i| [0.0, 0.0, len * i as f64 / (n - 1) as f64, r])
            .collect();
        VesselTree {
            dims: 3,
            root: 0,
            nodes,
            edges: vec![TreeEdge { parent: 0, child: 1, polyline: Some(poly), skip: false }],
        }
    }

    #[test]
    fn surface_distance_identical_zero_and_concentric_delta() {
        let a = straight_tube(1.0, 20.0, 80);
        let (hd, asd) = surface_point_distances(&a, &a).unwrap();
        assert!(hd < 1e-6 && asd < 1e-6);

        let delta = 0.25;
        let b = straight_tube(1.0 + delta, 20.0, 80);
        let (_, asd) = surface_point_distances(&a, &b).unwrap();
        assert!((asd - delta).abs() <= 0.1 * delta, "asd {asd} vs delta {delta}");
    }
}
