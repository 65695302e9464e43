//! Curvilinear geometry primitives: sinusoidal feature lifting and grid
//! inversion, Gaussian-smoothed curvature, curvature-proportional segment
//! partitioning, vessel normalization, and the residual-interpolation curve
//! decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of grid points used when inverting lifted features back to a
/// coordinate.
pub const INVERT_GRID_POINTS: usize = 1000;

/// One full period of the integer-octave lifting. Coordinates handed to the
/// lift are kept inside this window (2-D data is shifted by -0.5 first, 3-D
/// data is box-normalized into [-0.25, 0.25]); wider windows contain
/// indistinguishable period-aliased copies.
pub const LIFT_DOMAIN: (f64, f64) = (-0.5, 0.5);

/// Octave multipliers for the sinusoidal lift, shared by every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierConfig {
    pub octaves: Vec<f64>,
}

impl Default for FourierConfig {
    fn default() -> Self {
        FourierConfig {
            octaves: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
        }
    }
}

impl FourierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.octaves.is_empty() {
            return Err(Error::InvalidArgument {
                op: "fourier_config",
                detail: "no octaves".into(),
            });
        }
        let mut prev = 0.0;
        for &o in &self.octaves {
            if !(o > prev) {
                return Err(Error::InvalidArgument {
                    op: "fourier_config",
                    detail: format!("octaves must be strictly increasing and positive, got {:?}", self.octaves),
                });
            }
            prev = o;
        }
        Ok(())
    }

    /// Feature width per lifted coordinate.
    pub fn width_per_coord(&self) -> usize {
        2 * self.octaves.len()
    }
}

/// Lift coordinates to interleaved (cos 2*pi*a*x, sin 2*pi*a*x) pairs, one
/// pair per octave per coordinate.
pub fn lift_fourier(coords: &[f64], cfg: &FourierConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(coords.len() * cfg.width_per_coord());
    for &x in coords {
        for &a in &cfg.octaves {
            let phase = 2.0 * std::f64::consts::PI * a * x;
            out.push(phase.cos());
            out.push(phase.sin());
        }
    }
    out
}

/// Invert lifted features one axis at a time by scanning
/// [`INVERT_GRID_POINTS`] linearly spaced candidates over `domain`
/// (endpoints included) and keeping the feature-space nearest. Exact
/// distance ties resolve to the smaller coordinate.
pub fn invert_fourier(features: &[f64], cfg: &FourierConfig, domain: (f64, f64)) -> Result<Vec<f64>> {
    let per = cfg.width_per_coord();
    if per == 0 || features.len() % per != 0 {
        return Err(Error::InvalidArgument {
            op: "invert_fourier",
            detail: format!("feature length {} not a multiple of {}", features.len(), per),
        });
    }
    let (lo, hi) = domain;
    if !(hi > lo) {
        return Err(Error::InvalidArgument {
            op: "invert_fourier",
            detail: format!("bad domain [{lo}, {hi}]"),
        });
    }
    let n_axes = features.len() / per;
    let step = (hi - lo) / (INVERT_GRID_POINTS - 1) as f64;
    // Grid features are the same for every axis; compute once.
    let mut grid: Vec<(f64, Vec<f64>)> = Vec::with_capacity(INVERT_GRID_POINTS);
    for i in 0..INVERT_GRID_POINTS {
        let x = lo + step * i as f64;
        grid.push((x, lift_fourier(&[x], cfg)));
    }
    let mut out = Vec::with_capacity(n_axes);
    for axis in 0..n_axes {
        let target = &features[axis * per..(axis + 1) * per];
        let mut best = f64::INFINITY;
        let mut best_x = lo;
        for (x, feat) in &grid {
            let mut d = 0.0;
            for (f, t) in feat.iter().zip(target) {
                let e = f - t;
                d += e * e;
            }
            // strict '<' keeps the first (smallest) coordinate on exact ties
            if d < best {
                best = d;
                best_x = *x;
            }
        }
        out.push(best_x);
    }
    Ok(out)
}

/// Half the inversion grid spacing: the worst-case quantization of
/// `invert_fourier` strictly inside the domain.
pub fn invert_half_spacing(domain: (f64, f64)) -> f64 {
    (domain.1 - domain.0) / (INVERT_GRID_POINTS - 1) as f64 / 2.0
}

fn reflect_index(idx: isize, n: usize) -> usize {
    // scipy-style 'reflect': (d c b a | a b c d | d c b a)
    let n = n as isize;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut w = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        w.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// First difference, Gaussian smoothing (truncated at 4 sigma, reflected
/// boundary), second difference, then the per-index 4-vector norm. Output
/// length is `points.len() - 2`.
pub fn gaussian_smoothed_curvature(points: &[[f64; 4]], sigma: f64) -> Result<Vec<f64>> {
    let n = points.len();
    if n < 4 {
        return Err(Error::InvalidArgument {
            op: "gaussian_smoothed_curvature",
            detail: format!("need at least 4 points, got {n}"),
        });
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let m = n - 1;
    let mut diffs = vec![[0.0f64; 4]; m];
    for i in 0..m {
        for c in 0..4 {
            diffs[i][c] = points[i + 1][c] - points[i][c];
        }
    }
    let mut smoothed = vec![[0.0f64; 4]; m];
    for i in 0..m {
        for (k, &w) in kernel.iter().enumerate() {
            let src = reflect_index(i as isize + k as isize - radius, m);
            for c in 0..4 {
                smoothed[i][c] += w * diffs[src][c];
            }
        }
    }
    let mut curvature = Vec::with_capacity(n - 2);
    for i in 0..m - 1 {
        let mut sq = 0.0;
        for c in 0..4 {
            let d = smoothed[i + 1][c] - smoothed[i][c];
            sq += d * d;
        }
        curvature.push(sq.sqrt());
    }
    Ok(curvature)
}

/// Partition `[0, n)` into `n_segments` contiguous index ranges whose
/// normalized, sensitivity-powered cumulative curvature is as equal as
/// possible. Boundaries are the cumulative-sum crossings of
/// `linspace(0, total, n_segments + 1)`, clamped so every segment keeps at
/// least one index and the final segment ends at `n`.
pub fn compute_segments(
    curvature: &[f64],
    n_segments: usize,
    sensitivity: f64,
) -> Result<Vec<(usize, usize)>> {
    let n = curvature.len();
    if n_segments == 0 {
        return Err(Error::InvalidArgument {
            op: "compute_segments",
            detail: "n_segments must be >= 1".into(),
        });
    }
    if n < n_segments {
        return Err(Error::InvalidArgument {
            op: "compute_segments",
            detail: format!("{n} curvature values for {n_segments} segments"),
        });
    }
    let minv = curvature.iter().cloned().fold(f64::INFINITY, f64::min);
    let maxv = curvature.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // eps keeps constant curvature from dividing by zero
    let scale = maxv - minv + 1e-12;
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &c in curvature {
        acc += ((c - minv) / scale).powf(sensitivity);
        cumulative.push(acc);
    }
    let total = cumulative[n - 1];
    let mut cuts = Vec::with_capacity(n_segments + 1);
    cuts.push(0usize);
    for j in 1..n_segments {
        let bound = total * j as f64 / n_segments as f64;
        let raw = cumulative.iter().filter(|&&v| v < bound).count();
        let lo = cuts[j - 1] + 1;
        let hi = n - (n_segments - j);
        cuts.push(raw.clamp(lo, hi));
    }
    cuts.push(n);
    Ok(cuts.windows(2).map(|w| (w[0], w[1])).collect())
}

/// Vessel polyline in the original (millimeter) frame; `points` are
/// `(x, y, z, r)` with `z = 0` in 2-D settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolylineVessel {
    pub points: Vec<[f64; 4]>,
    /// Total arc length in the original frame.
    pub arc_length: f64,
    /// Straight-line distance between endpoints in the original frame.
    pub endpoint_distance: f64,
}

fn pos_dist(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

impl PolylineVessel {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "polyline_vessel",
                detail: format!("need at least 2 points, got {}", points.len()),
            });
        }
        if points.iter().any(|p| p[3] <= 0.0) {
            return Err(Error::InvalidArgument {
                op: "polyline_vessel",
                detail: "radii must be positive".into(),
            });
        }
        let arc_length: f64 = points.windows(2).map(|w| pos_dist(&w[0], &w[1])).sum();
        let endpoint_distance = pos_dist(&points[0], &points[points.len() - 1]);
        Ok(PolylineVessel {
            points,
            arc_length,
            endpoint_distance,
        })
    }

    /// Arc-length position of every point, normalized to [0, 1].
    pub fn arc_positions(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.points.len());
        let mut acc = 0.0;
        t.push(0.0);
        for w in self.points.windows(2) {
            acc += pos_dist(&w[0], &w[1]);
            t.push(acc);
        }
        if acc > 0.0 {
            for v in &mut t {
                *v /= acc;
            }
        }
        t
    }
}

/// Record of the similarity transform applied by [`normalize_vessel`];
/// inverting it restores the original frame exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselTransform {
    pub translation: [f64; 3],
    pub scale_pos: f64,
    pub scale_r: f64,
}

impl VesselTransform {
    pub fn apply(&self, p: &[f64; 4]) -> [f64; 4] {
        [
            (p[0] - self.translation[0]) / self.scale_pos,
            (p[1] - self.translation[1]) / self.scale_pos,
            (p[2] - self.translation[2]) / self.scale_pos,
            p[3] / self.scale_r,
        ]
    }

    pub fn invert(&self, p: &[f64; 4]) -> [f64; 4] {
        [
            p[0] * self.scale_pos + self.translation[0],
            p[1] * self.scale_pos + self.translation[1],
            p[2] * self.scale_pos + self.translation[2],
            p[3] * self.scale_r,
        ]
    }
}

/// Vessel after the canonical similarity transform: first point at the
/// origin, last point on the unit sphere, first radius 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedVessel {
    pub points: Vec<[f64; 4]>,
    pub transform: VesselTransform,
    /// Arc length in the original frame (loss reweighting).
    pub source_arc_length: f64,
    /// Endpoint distance in the original frame (loss reweighting).
    pub source_endpoint_distance: f64,
}

pub fn normalize_vessel(v: &PolylineVessel) -> Result<NormalizedVessel> {
    let first = v.points[0];
    let last = v.points[v.points.len() - 1];
    let span = pos_dist(&first, &last);
    if span <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "normalize_vessel",
            detail: "endpoints coincide".into(),
        });
    }
    let transform = VesselTransform {
        translation: [first[0], first[1], first[2]],
        scale_pos: span,
        scale_r: first[3],
    };
    let points = v.points.iter().map(|p| transform.apply(p)).collect();
    Ok(NormalizedVessel {
        points,
        transform,
        source_arc_length: v.arc_length,
        source_endpoint_distance: v.endpoint_distance,
    })
}

impl NormalizedVessel {
    pub fn denormalize(&self) -> Result<PolylineVessel> {
        PolylineVessel::new(self.points.iter().map(|p| self.transform.invert(p)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let first = &self.points[0];
        if first[..3].iter().any(|&v| v.abs() > 1e-9) || (first[3] - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument {
                op: "normalized_vessel",
                detail: "first point not at canonical pose".into(),
            });
        }
        let last = &self.points[self.points.len() - 1];
        let norm = (last[0] * last[0] + last[1] * last[1] + last[2] * last[2]).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument {
                op: "normalized_vessel",
                detail: format!("last point at radius {norm}, expected 1"),
            });
        }
        Ok(())
    }
}

/// Endpoint-matching mask: identically 1 during training; during evaluation
/// `0.5^-0.2 * t^0.1 * (1-t)^0.1`, which vanishes at both endpoints.
pub fn eval_mask(t: f64, training: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument {
            op: "eval_mask",
            detail: format!("t = {t} outside [0, 1]"),
        });
    }
    if training {
        return Ok(1.0);
    }
    // algebraically 0.5^-0.2 * t^0.1 * (1-t)^0.1, arranged so m(0.5) == 1
    Ok((t * (1.0 - t) / 0.25).powf(0.1))
}

/// Evaluate the curve decoder: linear interpolation of the `(pos, r)`
/// endpoint 4-vectors plus the masked residual.
pub fn decode_curve_point(
    a: &[f64; 4],
    b: &[f64; 4],
    residual: &[f64; 4],
    t: f64,
    training: bool,
) -> Result<[f64; 4]> {
    let m = eval_mask(t, training)?;
    let mut out = [0.0f64; 4];
    for c in 0..4 {
        out[c] = a[c] + (b[c] - a[c]) * t + residual[c] * m;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lift_at_zero_alternates_one_zero() {
        let cfg = FourierConfig::default();
        let f = lift_fourier(&[0.0], &cfg);
        assert_eq!(f.len(), 12);
        for pair in f.chunks(2) {
            assert_eq!(pair[0], 1.0);
            assert_eq!(pair[1], 0.0);
        }
    }

    #[test]
    fn lift_half_first_octave() {
        let cfg = FourierConfig { octaves: vec![1.0] };
        let f = lift_fourier(&[0.5], &cfg);
        assert!((f[0] + 1.0).abs() < 1e-12);
        assert!(f[1].abs() < 1e-12);
    }

    #[test]
    fn invert_recovers_interior_points() {
        let cfg = FourierConfig::default();
        let half = invert_half_spacing(LIFT_DOMAIN);
        for &x in &[0.37 - 0.5, 0.0, -0.123, 0.453] {
            let f = lift_fourier(&[x], &cfg);
            let got = invert_fourier(&f, &cfg, LIFT_DOMAIN).unwrap()[0];
            assert!((got - x).abs() <= half, "x={x} got={got}");
        }
    }

    #[test]
    fn invert_multi_axis_independent() {
        let cfg = FourierConfig::default();
        let f = lift_fourier(&[0.2, -0.31, 0.44], &cfg);
        let got = invert_fourier(&f, &cfg, LIFT_DOMAIN).unwrap();
        let half = invert_half_spacing(LIFT_DOMAIN);
        assert_eq!(got.len(), 3);
        for (g, x) in got.iter().zip([0.2, -0.31, 0.44]) {
            assert!((g - x).abs() <= half);
        }
    }

    #[test]
    fn invert_wraps_period_aliases_to_in_domain_copy() {
        // with integer octaves the features of x and x-1 are identical, so a
        // coordinate just outside the window inverts to its in-window alias
        let cfg = FourierConfig::default();
        let f = lift_fourier(&[0.75], &cfg);
        let got = invert_fourier(&f, &cfg, LIFT_DOMAIN).unwrap()[0];
        let half = invert_half_spacing(LIFT_DOMAIN);
        assert!((got - (-0.25)).abs() <= half, "got {got}");
    }

    #[test]
    fn curvature_of_line_is_zero() {
        let pts: Vec<[f64; 4]> = (0..16)
            .map(|i| [i as f64 * 0.5, i as f64 * 0.25, 0.0, 1.0])
            .collect();
        let c = gaussian_smoothed_curvature(&pts, 2.0).unwrap();
        assert_eq!(c.len(), 14);
        for v in c {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn curvature_sigma_zero_matches_raw_second_difference() {
        let pts: Vec<[f64; 4]> = (0..8)
            .map(|i| {
                let t = i as f64 * 0.3;
                [t.sin(), t.cos(), 0.1 * t, 1.0 + 0.05 * t]
            })
            .collect();
        let got = gaussian_smoothed_curvature(&pts, 0.0).unwrap();
        for (i, g) in got.iter().enumerate() {
            let mut sq = 0.0;
            for c in 0..4 {
                let d2 = (pts[i + 2][c] - pts[i + 1][c]) - (pts[i + 1][c] - pts[i][c]);
                sq += d2 * d2;
            }
            assert!((g - sq.sqrt()).abs() < 1e-12);
        }
    }

    fn circle_points(n: usize) -> Vec<[f64; 4]> {
        (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                [a.cos(), a.sin(), 0.0, 1.0]
            })
            .collect()
    }

    fn coefficient_of_variation(c: &[f64]) -> f64 {
        let mean: f64 = c.iter().sum::<f64>() / c.len() as f64;
        let var: f64 = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64;
        var.sqrt() / mean
    }

    #[test]
    fn curvature_of_circle_nearly_constant() {
        let c = gaussian_smoothed_curvature(&circle_points(64), 0.5).unwrap();
        let cv = coefficient_of_variation(&c);
        assert!(cv < 0.05, "coefficient of variation {cv}");
        // wider kernels bias the reflected ends but the interior stays flat
        let c2 = gaussian_smoothed_curvature(&circle_points(64), 2.0).unwrap();
        let interior = coefficient_of_variation(&c2[8..c2.len() - 8]);
        assert!(interior < 0.05, "interior coefficient of variation {interior}");
    }

    #[test]
    fn segments_hand_traced_example() {
        let segs = compute_segments(&[0.0, 1.0, 0.0, 1.0], 2, 1.0).unwrap();
        assert_eq!(segs, vec![(0, 1), (1, 4)]);
    }

    #[test]
    fn segments_uniform_curvature_gives_unit_segments() {
        let segs = compute_segments(&[0.7; 64], 64, 0.75).unwrap();
        assert_eq!(segs.len(), 64);
        for (i, &(s, e)) in segs.iter().enumerate() {
            assert_eq!((s, e), (i, i + 1));
        }
    }

    #[test]
    fn segments_always_partition() {
        // fuzz: random-ish curvature vectors must partition [0, n) exactly
        let mut state = 0x12345678u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX as f64)
        };
        for trial in 0..200 {
            let n = 3 + (trial % 97);
            let n_segments = 1 + (trial % n.min(13));
            let curv: Vec<f64> = (0..n).map(|_| next() * 3.0).collect();
            let segs = compute_segments(&curv, n_segments, 0.75).unwrap();
            assert_eq!(segs.len(), n_segments);
            assert_eq!(segs[0].0, 0);
            assert_eq!(segs.last().unwrap().1, n);
            for w in segs.windows(2) {
                assert_eq!(w[0].1, w[1].0);
                assert!(w[0].0 < w[0].1);
            }
        }
    }

    #[test]
    fn normalize_direct_substitution() {
        let v = PolylineVessel::new(vec![[1.0, 1.0, 1.0, 2.0], [1.0, 1.0, 2.0, 1.5], [1.0, 1.0, 3.0, 1.0]])
            .unwrap();
        let n = normalize_vessel(&v).unwrap();
        assert_eq!(n.points[0], [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(n.points[2], [0.0, 0.0, 1.0, 0.5]);
        n.validate().unwrap();
    }

    #[test]
    fn normalize_round_trip_and_idempotence() {
        let v = PolylineVessel::new(vec![
            [3.0, -1.0, 2.0, 1.5],
            [4.0, 0.5, 2.5, 1.2],
            [5.5, 1.0, 4.0, 0.9],
        ])
        .unwrap();
        let n = normalize_vessel(&v).unwrap();
        let back = n.denormalize().unwrap();
        for (a, b) in v.points.iter().zip(&back.points) {
            for c in 0..4 {
                assert!((a[c] - b[c]).abs() < 1e-9 * a[c].abs().max(1.0));
            }
        }
        // a second normalization is the identity on the canonical form
        let again = normalize_vessel(&PolylineVessel::new(n.points.clone()).unwrap()).unwrap();
        for (a, b) in n.points.iter().zip(&again.points) {
            for c in 0..4 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_rejects_coincident_endpoints() {
        let v = PolylineVessel::new(vec![[1.0, 2.0, 3.0, 1.0], [4.0, 2.0, 3.0, 1.0], [1.0, 2.0, 3.0, 1.0]])
            .unwrap();
        assert!(normalize_vessel(&v).is_err());
    }

    #[test]
    fn mask_endpoints_and_midpoint() {
        assert_eq!(eval_mask(0.0, false).unwrap(), 0.0);
        assert_eq!(eval_mask(1.0, false).unwrap(), 0.0);
        assert_eq!(eval_mask(0.5, false).unwrap(), 1.0);
        assert_eq!(eval_mask(0.123, true).unwrap(), 1.0);
        assert!(eval_mask(-0.01, false).is_err());
        assert!(eval_mask(1.01, false).is_err());
    }

    #[test]
    fn mask_matches_literal_formula() {
        for &t in &[0.1f64, 0.25, 0.6, 0.9] {
            let literal = 0.5f64.powf(-0.2) * t.powf(0.1) * (1.0 - t).powf(0.1);
            assert!((eval_mask(t, false).unwrap() - literal).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_curve_point_cases() {
        let a = [0.0, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 0.0, 0.5];
        // zero residual midpoint
        let mid = decode_curve_point(&a, &b, &[0.0; 4], 0.5, false).unwrap();
        assert_eq!(mid, [0.5, 1.0, 0.0, 0.75]);
        // eval mode is exact at endpoints for any residual
        let res = [9.0, -3.0, 7.0, 2.0];
        assert_eq!(decode_curve_point(&a, &b, &res, 0.0, false).unwrap(), a);
        assert_eq!(decode_curve_point(&a, &b, &res, 1.0, false).unwrap(), b);
        // training mode adds the constant residual
        let tr = decode_curve_point(&a, &b, &[0.1, 0.1, 0.1, 0.1], 0.25, true).unwrap();
        assert!((tr[0] - (0.25 + 0.1)).abs() < 1e-12);
    }
}
