//! Arch straightening: arc-length parameterization of the fitted parabola
//! and signed normal offsets.
//!
//! Every vertex is moved into the fitted frame (centroid subtracted, then
//! rotated by `theta_star`), projected to its nearest point on the curve,
//! and rewritten as `(s, d, z)` where `s` is arc length from the leftmost
//! sampled x, `d` the metric distance along the local normal, and `z` the
//! untouched height. The normal `(-dy/dx, 1)` is normalized before the dot
//! product; without that, offsets would scale with local slope and the
//! flattening would distort occlusal geometry.

use serde::{Deserialize, Serialize};

use crate::arch_fit::ArchCurve;
use crate::exec;
use crate::math::rotate_xy;
use crate::mesh_io::TriangleMesh;
use crate::spatial::KdTree2;

/// `[flatten]` configuration section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlattenConfig {
    /// Number of arc-length-uniform curve samples.
    pub samples: usize,
    /// Fraction of the x-range added as padding on each side.
    pub pad_fraction: f64,
}

impl Default for FlattenConfig {
    fn default() -> Self {
        FlattenConfig { samples: 4096, pad_fraction: 0.05 }
    }
}

/// Mesh rewritten to `(s, d, z)` coordinates with original connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedMesh {
    pub flat_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub curve: ArchCurve,
}

impl FlattenedMesh {
    pub fn to_binary_stl(&self) -> Vec<u8> {
        crate::mesh_io::write_binary_stl(&self.flat_vertices, &self.faces)
    }
}

/// Closed-form arc length of `y = a x² + b x + c` between `x0` and `x1`,
/// via the sinh-based antiderivative of `sqrt(1 + (2ax + b)²)`. The sign
/// follows the integration direction.
pub fn arc_length(curve: &ArchCurve, x0: f64, x1: f64) -> f64 {
    arc_length_coeffs(curve.a, curve.b, x0, x1)
}

pub fn arc_length_coeffs(a: f64, b: f64, x0: f64, x1: f64) -> f64 {
    if a == 0.0 {
        return (x1 - x0) * (1.0 + b * b).sqrt();
    }
    let u0 = 2.0 * a * x0 + b;
    let u1 = 2.0 * a * x1 + b;
    // G(u) differences cancel catastrophically on tiny intervals; the
    // midpoint slope is exact to O((a dx)^2) there.
    if (u1 - u0).abs() < 1e-9 * (1.0 + u0.abs()) {
        let um = a * (x0 + x1) + b;
        return (x1 - x0) * (1.0 + um * um).sqrt();
    }
    let g = |u: f64| u * (1.0 + u * u).sqrt() + u.asinh();
    (g(u1) - g(u0)) / (4.0 * a)
}

/// Curve samples uniform in arc length, with a spatial index for
/// nearest-point queries. Immutable after construction.
#[derive(Debug, Clone)]
pub struct CurveSampling {
    a: f64,
    b: f64,
    c: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub sample_xs: Vec<f64>,
    /// Arc length at each sample; starts at 0, ends at the total length.
    pub cumulative_s: Vec<f64>,
    pub total_length: f64,
    tree: KdTree2,
}

impl CurveSampling {
    pub fn len(&self) -> usize {
        self.sample_xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_xs.is_empty()
    }

    fn y_at(&self, x: f64) -> f64 {
        (self.a * x + self.b) * x + self.c
    }

    fn slope_at(&self, x: f64) -> f64 {
        2.0 * self.a * x + self.b
    }

    /// Arc length from the leftmost sample to `x`, clamped to the sampled
    /// range so `s` stays within `[0, total_length]`.
    pub fn s_at(&self, x: f64) -> f64 {
        arc_length_coeffs(self.a, self.b, self.x_min, x)
            .clamp(0.0, self.total_length)
    }
}

/// Samples the curve uniformly in arc length over `[x_min, x_max]`,
/// inverting the arc-length integral by bisection.
pub fn build_sampling(curve: &ArchCurve, x_min: f64, x_max: f64, n: usize) -> CurveSampling {
    assert!(x_max > x_min, "build_sampling needs x_min < x_max");
    assert!(n >= 2, "build_sampling needs at least 2 samples");
    let total = arc_length(curve, x_min, x_max);
    let span = x_max - x_min;
    let tol = 1e-10 * span.max(1.0);

    let mut sample_xs = Vec::with_capacity(n);
    let mut cumulative_s = Vec::with_capacity(n);
    for j in 0..n {
        let target = total * j as f64 / (n - 1) as f64;
        let x = if j == 0 {
            x_min
        } else if j == n - 1 {
            x_max
        } else {
            let (mut lo, mut hi) = (x_min, x_max);
            // arc length from x_min is strictly increasing in x
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if arc_length(curve, x_min, mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        sample_xs.push(x);
        cumulative_s.push(target);
    }

    let pts: Vec<[f64; 2]> = sample_xs
        .iter()
        .map(|&x| [x, (curve.a * x + curve.b) * x + curve.c])
        .collect();
    let tree = KdTree2::build(&pts);
    CurveSampling {
        a: curve.a,
        b: curve.b,
        c: curve.c,
        x_min,
        x_max,
        sample_xs,
        cumulative_s,
        total_length: total,
        tree,
    }
}

/// Nearest point on the sampled curve: kd-tree seeds refined with up to 20
/// Newton iterations on the stationarity condition
/// `g(x) = (x - px) + (y(x) - py) y'(x) = 0`. Equidistant minima resolve
/// toward the smaller arc length.
pub fn nearest_point_on_curve(sampling: &CurveSampling, p: [f64; 2]) -> (f64, f64, f64) {
    assert!(!sampling.is_empty(), "sampling must not be empty");
    let scale = (sampling.x_max - sampling.x_min).max(1e-12);
    let seeds = sampling.tree.k_nearest(p, 4.min(sampling.len()));

    // (d², s, x, y) candidates: refined seeds plus the raw kd hits.
    let mut candidates: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(seeds.len() * 2);
    let mut push = |x: f64, sampling: &CurveSampling| {
        let x = x.clamp(sampling.x_min, sampling.x_max);
        let y = sampling.y_at(x);
        let d2 = (p[0] - x) * (p[0] - x) + (p[1] - y) * (p[1] - y);
        candidates.push((d2, sampling.s_at(x), x, y));
    };

    for &(seed_idx, _) in &seeds {
        let seed_x = sampling.sample_xs[seed_idx];
        push(seed_x, sampling);
        let mut x = seed_x;
        for _ in 0..20 {
            let y = sampling.y_at(x);
            let yp = sampling.slope_at(x);
            let g = (x - p[0]) + (y - p[1]) * yp;
            let gp = 1.0 + yp * yp + (y - p[1]) * 2.0 * sampling.a;
            if gp.abs() < 1e-300 {
                break;
            }
            let dx = g / gp;
            x -= dx;
            if dx.abs() < 1e-12 * scale {
                break;
            }
        }
        if x.is_finite() {
            push(x, sampling);
        }
    }

    let best_d2 = candidates
        .iter()
        .map(|c| c.0)
        .fold(f64::INFINITY, f64::min);
    let tie_band = best_d2 * (1.0 + 1e-9) + 1e-24;
    let winner = candidates
        .iter()
        .filter(|c| c.0 <= tie_band)
        .min_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap())
        .expect("at least one candidate");
    (winner.2, winner.3, winner.1)
}

/// Signed metric offset of `p` along the local normal `(-y'(x_c), 1)` at
/// the foot point; the raw dot product is divided by the normal's length.
pub fn normal_offset(curve: &ArchCurve, p: [f64; 2], foot: [f64; 2]) -> f64 {
    let slope = curve.slope_at(foot[0]);
    let nx = -slope;
    let ny = 1.0;
    let norm = (nx * nx + ny * ny).sqrt();
    ((p[0] - foot[0]) * nx + (p[1] - foot[1]) * ny) / norm
}

/// Bounds of the mesh's x coordinates in the fitted frame, used to choose
/// the sampling range.
pub fn fitted_frame_x_bounds(mesh: &TriangleMesh, curve: &ArchCurve) -> (f64, f64) {
    let rad = curve.theta_star.to_radians();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in &mesh.vertices {
        let (x, _) = rotate_xy(v[0] - curve.origin_offset[0], v[1] - curve.origin_offset[1], rad);
        lo = lo.min(x);
        hi = hi.max(x);
    }
    (lo, hi)
}

/// Maps every vertex to `(s, d, z)`: vertices are first moved into the
/// fitted frame, then projected to the curve. Connectivity is preserved
/// and z passes through untouched.
pub fn flatten_mesh(
    mesh: &TriangleMesh,
    curve: &ArchCurve,
    sampling: &CurveSampling,
) -> FlattenedMesh {
    let rad = curve.theta_star.to_radians();
    let flat_vertices = exec::map_slice(&mesh.vertices, |v| {
        let (x, y) = rotate_xy(v[0] - curve.origin_offset[0], v[1] - curve.origin_offset[1], rad);
        let (xc, yc, s) = nearest_point_on_curve(sampling, [x, y]);
        let d = normal_offset(curve, [x, y], [xc, yc]);
        [s, d, v[2]]
    });
    FlattenedMesh { flat_vertices, faces: mesh.faces.clone(), curve: curve.clone() }
}
