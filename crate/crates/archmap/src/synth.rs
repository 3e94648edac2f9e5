//! Synthetic arch fixtures: parabolic tube meshes with tooth-like bumps,
//! posed by a known rotation and offset, plus matching ground-truth
//! annotations. Used by tests, benches, and the fixture subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dkb::{baseline_report, DentalOntology, StructuredReport};
use crate::mesh_io::{StlFormat, TriangleMesh};

/// Construction parameters for one synthetic arch.
#[derive(Debug, Clone)]
pub struct ArchSpec {
    /// Parabola coefficients in the canonical (fit) frame.
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Pose rotation applied to the canonical arch, degrees. Fitting the
    /// generated mesh recovers `theta_star = -pose_deg`.
    pub pose_deg: f64,
    /// Plan-view translation applied after rotation.
    pub offset: [f64; 2],
    /// Half of the x-span the arch covers, model units.
    pub half_span: f64,
    /// Rings along the curve; each ring has 8 vertices.
    pub segments: usize,
    /// Tooth-like bumps along the arch.
    pub teeth: usize,
    /// Gaussian-ish jitter amplitude on vertex positions.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            a: 0.02,
            b: 0.0,
            c: -8.0,
            pose_deg: 18.0,
            offset: [4.0, -3.0],
            half_span: 24.0,
            segments: 96,
            teeth: 14,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl ArchSpec {
    /// Deterministically varied parameters for a numbered fixture case.
    pub fn for_case(index: usize, seed: u64) -> ArchSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9));
        ArchSpec {
            a: rng.gen_range(0.012..0.035),
            b: rng.gen_range(-0.15..0.15),
            c: rng.gen_range(-10.0..-6.0),
            pose_deg: rng.gen_range(-60.0..60.0),
            offset: [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)],
            half_span: rng.gen_range(20.0..26.0),
            segments: 96,
            teeth: 14,
            noise: 0.05,
            seed: seed ^ index as u64,
        }
    }
}

/// Builds the arch as a closed tube swept along the parabola. The tube
/// cross-section is an 8-gon whose vertical radius swells periodically to
/// suggest tooth crowns.
pub fn arch_mesh(spec: &ArchSpec) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.segments.max(2);
    let ring = 8usize;
    let (rw, rh) = (3.2, 4.0); // tube radii: across the arch, vertical

    let pose = spec.pose_deg.to_radians();
    let (pose_sin, pose_cos) = pose.sin_cos();

    let mut vertices: Vec<[f64; 3]> = Vec::with_capacity(n * ring + 2);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let x = -spec.half_span + 2.0 * spec.half_span * t;
        let y = (spec.a * x + spec.b) * x + spec.c;
        let slope = 2.0 * spec.a * x + spec.b;
        let norm = (1.0 + slope * slope).sqrt();
        // unit normal of the curve in the plane
        let (nx, ny) = (-slope / norm, 1.0 / norm);
        let bump = 1.0 + 0.30 * (std::f64::consts::PI * spec.teeth as f64 * t).sin().powi(2);
        for k in 0..ring {
            let phi = std::f64::consts::TAU * k as f64 / ring as f64;
            let (dw, dz) = (rw * phi.cos(), rh * bump * phi.sin());
            let jitter = if spec.noise > 0.0 {
                [
                    rng.gen_range(-spec.noise..spec.noise),
                    rng.gen_range(-spec.noise..spec.noise),
                    rng.gen_range(-spec.noise..spec.noise),
                ]
            } else {
                [0.0; 3]
            };
            let px = x + nx * dw + jitter[0];
            let py = y + ny * dw + jitter[1];
            let pz = dz + jitter[2];
            // pose: rotate in plan view, then translate
            let rx = px * pose_cos - py * pose_sin + spec.offset[0];
            let ry = px * pose_sin + py * pose_cos + spec.offset[1];
            vertices.push([rx, ry, pz]);
        }
    }

    let mut faces: Vec<[u32; 3]> = Vec::with_capacity((n - 1) * ring * 2 + 2 * ring);
    for i in 0..n - 1 {
        for k in 0..ring {
            let k1 = (k + 1) % ring;
            let a = (i * ring + k) as u32;
            let b = (i * ring + k1) as u32;
            let c = ((i + 1) * ring + k) as u32;
            let d = ((i + 1) * ring + k1) as u32;
            faces.push([a, b, c]);
            faces.push([b, d, c]);
        }
    }
    // end caps
    let first_center = {
        let (mut cx, mut cy, mut cz) = (0.0, 0.0, 0.0);
        for v in &vertices[..ring] {
            cx += v[0];
            cy += v[1];
            cz += v[2];
        }
        vertices.push([cx / ring as f64, cy / ring as f64, cz / ring as f64]);
        (vertices.len() - 1) as u32
    };
    let last_center = {
        let base = (n - 1) * ring;
        let (mut cx, mut cy, mut cz) = (0.0, 0.0, 0.0);
        for v in &vertices[base..base + ring] {
            cx += v[0];
            cy += v[1];
            cz += v[2];
        }
        vertices.push([cx / ring as f64, cy / ring as f64, cz / ring as f64]);
        (vertices.len() - 1) as u32
    };
    for k in 0..ring {
        let k1 = (k + 1) % ring;
        faces.push([first_center, (k1) as u32, k as u32]);
        let base = ((n - 1) * ring) as u32;
        faces.push([last_center, base + k as u32, base + k1 as u32]);
    }

    TriangleMesh::new(vertices, faces, StlFormat::Binary).expect("generated mesh is valid")
}

/// Ground truth matching the healthy 14-tooth arch the fixtures depict.
pub fn fixture_ground_truth(ontology: &DentalOntology, arch_label: &str) -> StructuredReport {
    baseline_report(ontology, arch_label)
}

/// Centered parabola points with optional noise and gross outliers, plus
/// the exact coefficients of the centered curve. The returned points are
/// in the canonical frame; rotate them to pose the set.
pub struct PointCloud {
    pub points: Vec<[f64; 2]>,
    /// Coefficients after exact mean-centering of the clean points.
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub fn parabola_cloud(
    a: f64,
    b: f64,
    c: f64,
    half_span: f64,
    n: usize,
    noise_sd: f64,
    outlier_fraction: f64,
    seed: u64,
) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let x = -half_span + 2.0 * half_span * i as f64 / (n - 1) as f64;
            [x, (a * x + b) * x + c]
        })
        .collect();
    let mx = clean.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let my = clean.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    // y - my = a (x - mx)^2 + (2 a mx + b)(x - mx) + (a mx^2 + b mx + c - my)
    let cb = 2.0 * a * mx + b;
    let cc = (a * mx + b) * mx + c - my;

    let mut points: Vec<[f64; 2]> = clean
        .iter()
        .map(|p| {
            let jitter = gauss(&mut rng) * noise_sd;
            [p[0] - mx, p[1] - my + jitter]
        })
        .collect();
    let outliers = ((n as f64) * outlier_fraction).round() as usize;
    for _ in 0..outliers {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = rng.gen_range(2.0 * half_span..4.0 * half_span);
        points.push([radius * angle.cos(), radius * angle.sin()]);
    }
    PointCloud { points, a, b: cb, c: cc }
}

/// Box-Muller standard normal.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
