//! Deterministic software rendering of the flattened mesh from the three
//! canonical cameras.
//!
//! Two projection styles: SSP rasterizes the triangulated surface with
//! z-buffering and Blinn-Phong shading tuned for a metallic look; UVP
//! splats bare vertices as flat discs with no shading or connectivity.
//! Everything is plain f64 arithmetic with a fixed traversal order, so
//! identical inputs produce bit-identical images. Rasterization is
//! parallelized over disjoint row bands; each pixel is owned by exactly
//! one band, which keeps the parallel output identical to sequential.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::flatten::FlattenedMesh;
use crate::math::Vec3;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("degenerate bounds: mesh has zero extent on every axis")]
    DegenerateBounds,
    #[error("png encoding failed: {0}")]
    Png(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchSide {
    Maxillary,
    Mandibular,
}

impl ArchSide {
    /// Maps the report-level arch label ("upper"/"lower").
    pub fn from_arch_label(label: &str) -> Option<ArchSide> {
        match label {
            "upper" => Some(ArchSide::Maxillary),
            "lower" => Some(ArchSide::Mandibular),
            _ => None,
        }
    }

    pub fn arch_label(self) -> &'static str {
        match self {
            ArchSide::Maxillary => "upper",
            ArchSide::Mandibular => "lower",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Ssp,
    Uvp,
}

impl RenderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RenderMode::Ssp => "ssp",
            RenderMode::Uvp => "uvp",
        }
    }
}

pub const VIEW_NAMES: [&str; 3] = ["front", "back", "bottom"];

/// Canonical camera distance from the model center, normalized units.
pub const CAMERA_DISTANCE: f64 = 2.6;
/// 35 mm-equivalent focal length on a 36 mm-wide reference frame.
pub const FOCAL_EQUIV_MM: f64 = 35.0;
const REFERENCE_FRAME_MM: f64 = 36.0;
const NEAR_PLANE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    pub focal_equiv: f64,
}

/// The fixed front/back/bottom poses. The bottom camera flips to the +z
/// side for the mandibular arch so the occlusal surface faces the camera;
/// every pose targets the origin with up (1, 0, 0) at distance 2.6.
pub fn canonical_cameras(arch_side: ArchSide) -> [CameraPose; 3] {
    let up = Vec3::new(1.0, 0.0, 0.0);
    let target = Vec3::default();
    let pose = |position: Vec3| CameraPose { position, target, up, focal_equiv: FOCAL_EQUIV_MM };
    let bottom_z = match arch_side {
        ArchSide::Maxillary => -CAMERA_DISTANCE,
        ArchSide::Mandibular => CAMERA_DISTANCE,
    };
    [
        pose(Vec3::new(0.0, CAMERA_DISTANCE, 0.0)),
        pose(Vec3::new(0.0, -CAMERA_DISTANCE, 0.0)),
        pose(Vec3::new(0.0, 0.0, bottom_z)),
    ]
}

/// `[render]` configuration section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub background: [u8; 3],
    /// Direction the light travels; `None` means a headlight along the
    /// camera's forward axis, which avoids per-view shadow asymmetry.
    pub light_direction: Option<[f64; 3]>,
    pub ambient: f64,
    pub diffuse: f64,
    pub specular: f64,
    pub specular_exponent: f64,
    /// UVP disc radius in pixels.
    pub point_radius: f64,
    /// Center-crop target ratio as width:height.
    pub crop_ratio: [u32; 2],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 1024,
            height: 768,
            background: [16, 18, 22],
            light_direction: None,
            ambient: 0.15,
            diffuse: 0.4,
            specular: 0.7,
            specular_exponent: 64.0,
            point_radius: 1.5,
            crop_ratio: [4, 3],
        }
    }
}

impl RenderConfig {
    pub fn crop_ratio_value(&self) -> f64 {
        self.crop_ratio[0] as f64 / self.crop_ratio[1] as f64
    }
}

/// Ordered front/back/bottom views of one arch.
#[derive(Debug, Clone)]
pub struct MultiViewSet {
    pub views: Vec<RgbImage>,
    pub arch_side: ArchSide,
    pub render_mode: RenderMode,
}

impl MultiViewSet {
    pub fn png_bytes(&self) -> Result<Vec<Vec<u8>>, RenderError> {
        self.views.iter().map(png_bytes).collect()
    }
}

/// Geometry handed to the renderer: either flattened `(s, d, z)` vertices
/// or the rotated-centered original mesh when flattening is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl From<&FlattenedMesh> for RenderMesh {
    fn from(fm: &FlattenedMesh) -> Self {
        RenderMesh {
            vertices: fm.flat_vertices.iter().map(|v| Vec3::from_array(*v)).collect(),
            faces: fm.faces.clone(),
        }
    }
}

impl RenderMesh {
    /// The rotated-centered original mesh (fit frame, no flattening).
    pub fn from_fitted_frame(
        mesh: &crate::mesh_io::TriangleMesh,
        curve: &crate::arch_fit::ArchCurve,
    ) -> Self {
        let rad = curve.theta_star.to_radians();
        let vertices = mesh
            .vertices
            .iter()
            .map(|v| {
                let (x, y) = crate::math::rotate_xy(
                    v[0] - curve.origin_offset[0],
                    v[1] - curve.origin_offset[1],
                    rad,
                );
                Vec3::new(x, y, v[2])
            })
            .collect();
        RenderMesh { vertices, faces: mesh.faces.clone() }
    }

    pub fn mirrored_z(&self) -> RenderMesh {
        RenderMesh {
            vertices: self.vertices.iter().map(|v| Vec3::new(v.x, v.y, -v.z)).collect(),
            faces: self.faces.clone(),
        }
    }
}

/// Centers the mesh on its bounding-box center and uniformly scales it so
/// the largest extent equals 2.0 (fits [-1, 1] on the longest axis).
pub fn normalize_for_render(mesh: &RenderMesh) -> Result<RenderMesh, RenderError> {
    if mesh.vertices.is_empty() {
        return Ok(mesh.clone());
    }
    let mut lo = mesh.vertices[0];
    let mut hi = mesh.vertices[0];
    for v in &mesh.vertices {
        lo = lo.min_component_wise(*v);
        hi = hi.max_component_wise(*v);
    }
    let extent = hi - lo;
    let max_extent = extent.x.max(extent.y).max(extent.z);
    if max_extent <= 0.0 {
        return Err(RenderError::DegenerateBounds);
    }
    let center = (lo + hi) * 0.5;
    let scale = 2.0 / max_extent;
    Ok(RenderMesh {
        vertices: mesh.vertices.iter().map(|&v| (v - center) * scale).collect(),
        faces: mesh.faces.clone(),
    })
}

/// Right-handed view basis plus perspective parameters.
#[derive(Debug, Clone, Copy)]
pub struct ViewTransform {
    pub position: Vec3,
    pub right: Vec3,
    pub true_up: Vec3,
    pub forward: Vec3,
    pub tan_half_h: f64,
    pub tan_half_v: f64,
    pub width: u32,
    pub height: u32,
}

/// Horizontal field of view in radians: `2 atan(36 / (2 * 35))`.
pub fn horizontal_fov() -> f64 {
    2.0 * (REFERENCE_FRAME_MM / (2.0 * FOCAL_EQUIV_MM)).atan()
}

pub fn look_at(pose: &CameraPose, width: u32, height: u32) -> ViewTransform {
    let forward = (pose.target - pose.position).normalized();
    let right = forward.cross(pose.up).normalized();
    let true_up = right.cross(forward);
    let tan_half_h = REFERENCE_FRAME_MM / (2.0 * FOCAL_EQUIV_MM);
    let aspect = width as f64 / height as f64;
    ViewTransform {
        position: pose.position,
        right,
        true_up,
        forward,
        tan_half_h,
        tan_half_v: tan_half_h / aspect,
        width,
        height,
    }
}

impl ViewTransform {
    /// Camera-space coordinates: (right, up, depth along forward).
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = p - self.position;
        Vec3::new(d.dot(self.right), d.dot(self.true_up), d.dot(self.forward))
    }

    /// Projects to pixel coordinates and depth; `None` behind the near plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let cam = self.to_camera(p);
        if cam.z <= NEAR_PLANE {
            return None;
        }
        let ndc_x = cam.x / (cam.z * self.tan_half_h);
        let ndc_y = cam.y / (cam.z * self.tan_half_v);
        let sx = (ndc_x + 1.0) * 0.5 * self.width as f64;
        let sy = (1.0 - ndc_y) * 0.5 * self.height as f64;
        Some((sx, sy, cam.z))
    }

    /// True when the point sits inside the symmetric frustum with the
    /// stated field of view on both axes.
    pub fn in_frustum(&self, p: Vec3, half_angle_tan: f64) -> bool {
        let cam = self.to_camera(p);
        cam.z > NEAR_PLANE
            && cam.x.abs() <= cam.z * half_angle_tan
            && cam.y.abs() <= cam.z * half_angle_tan
    }
}

/// Area-weighted vertex normals from face windings.
fn vertex_normals(mesh: &RenderMesh) -> Vec<Vec3> {
    let mut normals = vec![Vec3::default(); mesh.vertices.len()];
    for face in &mesh.faces {
        let a = mesh.vertices[face[0] as usize];
        let b = mesh.vertices[face[1] as usize];
        let c = mesh.vertices[face[2] as usize];
        let n = (b - a).cross(c - a); // length ∝ 2·area
        for &idx in face {
            normals[idx as usize] = normals[idx as usize] + n;
        }
    }
    normals
        .into_iter()
        .map(|n| {
            let u = n.normalized();
            if u.length() > 0.0 {
                u
            } else {
                Vec3::new(0.0, 0.0, 1.0)
            }
        })
        .collect()
}

const BAND_ROWS: usize = 64;
/// Base albedo for the metallic surface look.
const METAL_BASE: [f64; 3] = [0.72, 0.74, 0.78];
const UVP_COLOR: [u8; 3] = [232, 234, 238];

struct ScreenVertex {
    sx: f64,
    sy: f64,
    depth: f64,
    world: Vec3,
    normal: Vec3,
}

/// Z-buffered triangle rasterization with per-pixel Blinn-Phong shading on
/// interpolated vertex normals.
pub fn rasterize_ssp(mesh: &RenderMesh, pose: &CameraPose, config: &RenderConfig) -> RgbImage {
    let view = look_at(pose, config.width, config.height);
    let normals = vertex_normals(mesh);
    let projected: Vec<Option<ScreenVertex>> = {
        let items: Vec<usize> = (0..mesh.vertices.len()).collect();
        exec::map_slice(&items, |&i| {
            view.project(mesh.vertices[i]).map(|(sx, sy, depth)| ScreenVertex {
                sx,
                sy,
                depth,
                world: mesh.vertices[i],
                normal: normals[i],
            })
        })
    };

    let light_dir = config
        .light_direction
        .map(|d| Vec3::from_array(d).normalized())
        .unwrap_or(view.forward);

    let (w, h) = (config.width as usize, config.height as usize);
    let mut color = vec![0u8; w * h * 3];
    for px in color.chunks_exact_mut(3) {
        px.copy_from_slice(&config.background);
    }
    let mut zbuf = vec![f64::INFINITY; w * h];

    exec::for_each_chunk_pair(
        &mut zbuf,
        BAND_ROWS * w,
        &mut color,
        BAND_ROWS * w * 3,
        |band, zrows, crows| {
            let y0 = band * BAND_ROWS;
            let y1 = (y0 + zrows.len() / w).min(h);
            for face in &mesh.faces {
                let (Some(v0), Some(v1), Some(v2)) = (
                    projected[face[0] as usize].as_ref(),
                    projected[face[1] as usize].as_ref(),
                    projected[face[2] as usize].as_ref(),
                ) else {
                    continue;
                };
                raster_triangle_rows(
                    v0, v1, v2, &view, light_dir, config, y0, y1, w, zrows, crows,
                );
            }
        },
    );

    RgbImage::from_raw(config.width, config.height, color).expect("buffer sized to dimensions")
}

#[allow(clippy::too_many_arguments)]
fn raster_triangle_rows(
    v0: &ScreenVertex,
    v1: &ScreenVertex,
    v2: &ScreenVertex,
    view: &ViewTransform,
    light_dir: Vec3,
    config: &RenderConfig,
    y0: usize,
    y1: usize,
    w: usize,
    zrows: &mut [f64],
    crows: &mut [u8],
) {
    let min_x = v0.sx.min(v1.sx).min(v2.sx).floor().max(0.0) as usize;
    let max_x = (v0.sx.max(v1.sx).max(v2.sx).ceil() as isize).min(w as isize - 1);
    if max_x < 0 {
        return;
    }
    let max_x = max_x as usize;
    let tri_min_y = v0.sy.min(v1.sy).min(v2.sy).floor().max(y0 as f64) as usize;
    let tri_max_y = (v0.sy.max(v1.sy).max(v2.sy).ceil() as isize).min(y1 as isize - 1);
    if tri_max_y < tri_min_y as isize {
        return;
    }
    let tri_max_y = tri_max_y as usize;

    let area = edge_fn(v0.sx, v0.sy, v1.sx, v1.sy, v2.sx, v2.sy);
    if area == 0.0 {
        return;
    }

    for py in tri_min_y..=tri_max_y {
        let cy = py as f64 + 0.5;
        for px in min_x..=max_x {
            let cx = px as f64 + 0.5;
            let w0 = edge_fn(v1.sx, v1.sy, v2.sx, v2.sy, cx, cy);
            let w1 = edge_fn(v2.sx, v2.sy, v0.sx, v0.sy, cx, cy);
            let w2 = edge_fn(v0.sx, v0.sy, v1.sx, v1.sy, cx, cy);
            let inside = (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0)
                || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
            if !inside {
                continue;
            }
            let (b0, b1, b2) = (w0 / area, w1 / area, w2 / area);
            // perspective-correct interpolation via 1/z
            let inv_z = b0 / v0.depth + b1 / v1.depth + b2 / v2.depth;
            if inv_z <= 0.0 {
                continue;
            }
            let depth = 1.0 / inv_z;
            let zi = (py - y0) * w + px;
            if depth >= zrows[zi] {
                continue;
            }
            zrows[zi] = depth;
            let corr = |a0: f64, a1: f64, a2: f64| {
                (b0 * a0 / v0.depth + b1 * a1 / v1.depth + b2 * a2 / v2.depth) * depth
            };
            let world = Vec3::new(
                corr(v0.world.x, v1.world.x, v2.world.x),
                corr(v0.world.y, v1.world.y, v2.world.y),
                corr(v0.world.z, v1.world.z, v2.world.z),
            );
            let normal = Vec3::new(
                corr(v0.normal.x, v1.normal.x, v2.normal.x),
                corr(v0.normal.y, v1.normal.y, v2.normal.y),
                corr(v0.normal.z, v1.normal.z, v2.normal.z),
            )
            .normalized();
            let rgb = shade(world, normal, view.position, light_dir, config);
            let ci = zi * 3;
            crows[ci] = rgb[0];
            crows[ci + 1] = rgb[1];
            crows[ci + 2] = rgb[2];
        }
    }
}

fn edge_fn(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

fn shade(world: Vec3, normal: Vec3, eye: Vec3, light_dir: Vec3, config: &RenderConfig) -> [u8; 3] {
    let view_dir = (eye - world).normalized();
    let mut n = normal;
    // two-sided: scan surfaces have inconsistent winding
    if n.dot(view_dir) < 0.0 {
        n = -n;
    }
    let to_light = -light_dir;
    let diff = n.dot(to_light).max(0.0);
    let halfway = (to_light + view_dir).normalized();
    let spec = n.dot(halfway).max(0.0).powf(config.specular_exponent);
    let mut rgb = [0u8; 3];
    for k in 0..3 {
        let base = METAL_BASE[k] * (config.ambient + config.diffuse * diff);
        let value = (base + config.specular * spec).clamp(0.0, 1.0);
        rgb[k] = (value * 255.0).round() as u8;
    }
    rgb
}

/// Projects vertices and splats each as a flat filled disc: no z-buffer,
/// no shading, no connectivity.
pub fn rasterize_uvp(mesh: &RenderMesh, pose: &CameraPose, config: &RenderConfig) -> RgbImage {
    let view = look_at(pose, config.width, config.height);
    let projected: Vec<Option<(f64, f64)>> =
        exec::map_slice(&mesh.vertices, |&v| view.project(v).map(|(sx, sy, _)| (sx, sy)));

    let (w, h) = (config.width as usize, config.height as usize);
    let mut color = vec![0u8; w * h * 3];
    for px in color.chunks_exact_mut(3) {
        px.copy_from_slice(&config.background);
    }
    let r = config.point_radius.max(0.0);
    let r2 = r * r;

    exec::for_each_chunk(&mut color, BAND_ROWS * w * 3, |band, crows| {
        let y0 = band * BAND_ROWS;
        let band_rows = crows.len() / (w * 3);
        for &(sx, sy) in projected.iter().flatten() {
            let lo_y = (sy - r).floor().max(y0 as f64) as usize;
            let hi_y = (sy + r).ceil().min((y0 + band_rows) as f64 - 1.0) as isize;
            let lo_x = (sx - r).floor().max(0.0) as usize;
            let hi_x = (sx + r).ceil().min(w as f64 - 1.0) as isize;
            if hi_y < lo_y as isize || hi_x < lo_x as isize {
                continue;
            }
            for py in lo_y..=hi_y as usize {
                for px in lo_x..=hi_x as usize {
                    let dx = px as f64 + 0.5 - sx;
                    let dy = py as f64 + 0.5 - sy;
                    if dx * dx + dy * dy <= r2 {
                        let ci = ((py - y0) * w + px) * 3;
                        crows[ci..ci + 3].copy_from_slice(&UVP_COLOR);
                    }
                }
            }
        }
    });

    RgbImage::from_raw(config.width, config.height, color).expect("buffer sized to dimensions")
}

/// Center crop to the largest sub-rectangle with the target width:height
/// ratio. Idempotent on already-conforming images.
pub fn crop_to_aspect(image: &RgbImage, ratio: f64) -> RgbImage {
    assert!(ratio > 0.0, "crop ratio must be positive");
    let (w, h) = image.dimensions();
    let current = w as f64 / h as f64;
    let (tw, th) = if (current - ratio).abs() < 1e-9 {
        (w, h)
    } else if current > ratio {
        (((h as f64 * ratio).round() as u32).min(w).max(1), h)
    } else {
        (w, ((w as f64 / ratio).round() as u32).min(h).max(1))
    };
    if (tw, th) == (w, h) {
        return image.clone();
    }
    let x0 = (w - tw) / 2;
    let y0 = (h - th) / 2;
    let mut out = RgbImage::new(tw, th);
    for y in 0..th {
        for x in 0..tw {
            out.put_pixel(x, y, *image.get_pixel(x0 + x, y0 + y));
        }
    }
    out
}

/// Normalizes once, renders the three canonical poses in fixed
/// front/back/bottom order, and crops each view.
pub fn render_views(
    mesh: &RenderMesh,
    arch_side: ArchSide,
    mode: RenderMode,
    config: &RenderConfig,
) -> Result<MultiViewSet, RenderError> {
    let normalized = normalize_for_render(mesh)?;
    let ratio = config.crop_ratio_value();
    let views = canonical_cameras(arch_side)
        .iter()
        .map(|pose| {
            let img = match mode {
                RenderMode::Ssp => rasterize_ssp(&normalized, pose, config),
                RenderMode::Uvp => rasterize_uvp(&normalized, pose, config),
            };
            crop_to_aspect(&img, ratio)
        })
        .collect();
    Ok(MultiViewSet { views, arch_side, render_mode: mode })
}

/// Deterministic PNG bytes for an image.
pub fn png_bytes(image: &RgbImage) -> Result<Vec<u8>, RenderError> {
    let mut bytes = Vec::new();
    image
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| RenderError::Png(e.to_string()))?;
    Ok(bytes)
}

pub fn flip_horizontal(image: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tri_mesh(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> RenderMesh {
        RenderMesh { vertices, faces }
    }

    fn slab_mesh() -> RenderMesh {
        // arch-proportioned box: long in x, shallow in y and z
        let (hx, hy, hz) = (1.0, 0.15, 0.2);
        let mut vertices = Vec::new();
        for &x in &[-hx, hx] {
            for &y in &[-hy, hy] {
                for &z in &[-hz, hz] {
                    vertices.push(Vec3::new(x, y, z));
                }
            }
        }
        let faces = vec![
            [0, 1, 2],
            [1, 3, 2],
            [4, 6, 5],
            [5, 6, 7],
            [0, 4, 1],
            [1, 4, 5],
            [2, 3, 6],
            [3, 7, 6],
            [0, 2, 4],
            [2, 6, 4],
            [1, 5, 3],
            [3, 5, 7],
        ];
        tri_mesh(vertices, faces)
    }

    #[test]
    fn maxillary_bottom_camera_is_below() {
        let cams = canonical_cameras(ArchSide::Maxillary);
        assert_eq!(cams[2].position, Vec3::new(0.0, 0.0, -2.6));
    }

    #[test]
    fn mandibular_bottom_camera_is_mirrored() {
        let cams = canonical_cameras(ArchSide::Mandibular);
        assert_eq!(cams[2].position, Vec3::new(0.0, 0.0, 2.6));
        assert_eq!(cams[0].position, Vec3::new(0.0, 2.6, 0.0));
        assert_eq!(cams[1].position, Vec3::new(0.0, -2.6, 0.0));
    }

    #[test]
    fn all_cameras_at_distance_2_6_with_x_up() {
        for side in [ArchSide::Maxillary, ArchSide::Mandibular] {
            for cam in canonical_cameras(side) {
                assert_relative_eq!((cam.position - cam.target).length(), 2.6, epsilon = 1e-12);
                assert_eq!(cam.up, Vec3::new(1.0, 0.0, 0.0));
            }
        }
    }

    #[test]
    fn front_pose_forward_is_negative_y() {
        let cams = canonical_cameras(ArchSide::Maxillary);
        let view = look_at(&cams[0], 640, 480);
        assert_relative_eq!(view.forward.y, -1.0, epsilon = 1e-12);
        assert_relative_eq!(view.forward.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(view.forward.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn origin_projects_to_image_center() {
        for side in [ArchSide::Maxillary, ArchSide::Mandibular] {
            for cam in canonical_cameras(side) {
                let view = look_at(&cam, 800, 600);
                let (sx, sy, depth) = view.project(Vec3::default()).unwrap();
                assert_relative_eq!(sx, 400.0, epsilon = 1e-9);
                assert_relative_eq!(sy, 300.0, epsilon = 1e-9);
                assert_relative_eq!(depth, 2.6, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fov_matches_focal_arithmetic() {
        let fov_deg = horizontal_fov().to_degrees();
        let oracle = 2.0 * (36.0f64 / 70.0).atan().to_degrees();
        assert_relative_eq!(fov_deg, oracle, epsilon = 1e-12);
        assert_relative_eq!(fov_deg, 54.43, epsilon = 0.005);
    }

    #[test]
    fn normalize_scales_largest_extent_to_two() {
        let mesh = tri_mesh(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(4.0, 0.0, 0.0),
                Vec3::new(0.0, 2.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        let norm = normalize_for_render(&mesh).unwrap();
        let mut lo = norm.vertices[0];
        let mut hi = norm.vertices[0];
        for v in &norm.vertices {
            lo = lo.min_component_wise(*v);
            hi = hi.max_component_wise(*v);
        }
        let extent = hi - lo;
        assert_relative_eq!(extent.x, 2.0, epsilon = 1e-12);
        assert_relative_eq!(extent.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(extent.z, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mesh = slab_mesh();
        let once = normalize_for_render(&mesh).unwrap();
        let twice = normalize_for_render(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let mesh = tri_mesh(vec![Vec3::default(); 3], vec![[0, 1, 2]]);
        assert!(matches!(normalize_for_render(&mesh), Err(RenderError::DegenerateBounds)));
    }

    #[test]
    fn normalized_arch_fits_canonical_frustum() {
        let mesh = normalize_for_render(&slab_mesh()).unwrap();
        let tan = (horizontal_fov() / 2.0).tan();
        for side in [ArchSide::Maxillary, ArchSide::Mandibular] {
            for cam in canonical_cameras(side) {
                let view = look_at(&cam, 1024, 768);
                for &v in &mesh.vertices {
                    assert!(view.in_frustum(v, tan), "{v:?} outside frustum");
                }
            }
        }
    }

    #[test]
    fn empty_mesh_renders_background() {
        let mesh = tri_mesh(Vec::new(), Vec::new());
        let cfg = RenderConfig { width: 64, height: 48, ..Default::default() };
        let img = rasterize_ssp(&mesh, &canonical_cameras(ArchSide::Maxillary)[0], &cfg);
        assert!(img.pixels().all(|p| p.0 == cfg.background));
    }

    #[test]
    fn triangle_coverage_matches_edge_function_oracle() {
        let mesh = tri_mesh(
            vec![
                Vec3::new(-0.6, 0.0, -0.5),
                Vec3::new(0.7, 0.0, 0.1),
                Vec3::new(-0.1, 0.0, 0.6),
            ],
            vec![[0, 1, 2]],
        );
        let cfg = RenderConfig { width: 96, height: 72, ..Default::default() };
        let pose = canonical_cameras(ArchSide::Maxillary)[0];
        let img = rasterize_ssp(&mesh, &pose, &cfg);

        // independent oracle: project the corners and test pixel centers
        // against the three half-space edge functions directly
        let view = look_at(&pose, cfg.width, cfg.height);
        let p: Vec<(f64, f64)> = mesh
            .vertices
            .iter()
            .map(|&v| {
                let (sx, sy, _) = view.project(v).unwrap();
                (sx, sy)
            })
            .collect();
        let edge = |a: (f64, f64), b: (f64, f64), x: f64, y: f64| {
            (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
        };
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let e0 = edge(p[1], p[2], cx, cy);
                let e1 = edge(p[2], p[0], cx, cy);
                let e2 = edge(p[0], p[1], cx, cy);
                let inside = (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0)
                    || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0);
                let covered = img.get_pixel(x, y).0 != cfg.background;
                assert_eq!(inside, covered, "pixel ({x},{y}) mismatch");
            }
        }
    }

    #[test]
    fn nearer_coplanar_triangle_wins() {
        // both triangles cover the image center; the first sits nearer
        let near = Vec3::new(0.0, 0.5, 0.0);
        let far = Vec3::new(0.0, -0.5, 0.0);
        let tri = |c: Vec3| {
            vec![
                c + Vec3::new(-0.4, 0.0, -0.4),
                c + Vec3::new(0.4, 0.0, -0.4),
                c + Vec3::new(0.0, 0.0, 0.5),
            ]
        };
        let mut vertices = tri(near);
        vertices.extend(tri(far));
        // paint the far triangle with flipped winding; shading differs only
        // via normals, so instead compare against a render without the far one
        let both = tri_mesh(vertices.clone(), vec![[0, 1, 2], [3, 4, 5]]);
        let only_near = tri_mesh(vertices[..3].to_vec(), vec![[0, 1, 2]]);
        let cfg = RenderConfig { width: 128, height: 96, ..Default::default() };
        let pose = canonical_cameras(ArchSide::Maxillary)[0]; // looks along -y
        let a = rasterize_ssp(&both, &pose, &cfg);
        let b = rasterize_ssp(&only_near, &pose, &cfg);
        // where the near triangle covers, outputs agree
        let view = look_at(&pose, cfg.width, cfg.height);
        let (cx, cy, _) = view.project(near).unwrap();
        assert_eq!(a.get_pixel(cx as u32, cy as u32), b.get_pixel(cx as u32, cy as u32));
    }

    #[test]
    fn uvp_single_vertex_disc_at_center() {
        let mesh = tri_mesh(vec![Vec3::default()], Vec::new());
        let cfg = RenderConfig { width: 64, height: 64, point_radius: 2.0, ..Default::default() };
        let img = rasterize_uvp(&mesh, &canonical_cameras(ArchSide::Maxillary)[0], &cfg);
        assert_eq!(img.get_pixel(32, 32).0, UVP_COLOR);
        assert_eq!(img.get_pixel(2, 2).0, cfg.background);
    }

    #[test]
    fn uvp_culls_vertices_behind_camera() {
        let mesh = tri_mesh(vec![Vec3::new(0.0, 5.0, 0.0)], Vec::new()); // behind front cam at y=2.6
        let cfg = RenderConfig { width: 64, height: 64, ..Default::default() };
        let img = rasterize_uvp(&mesh, &canonical_cameras(ArchSide::Maxillary)[0], &cfg);
        assert!(img.pixels().all(|p| p.0 == cfg.background));
    }

    #[test]
    fn crop_conforming_image_unchanged() {
        let img = RgbImage::from_fn(1024, 768, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let out = crop_to_aspect(&img, 4.0 / 3.0);
        assert_eq!(out, img);
    }

    #[test]
    fn crop_cuts_height_when_too_tall() {
        let img = RgbImage::new(1000, 768);
        let out = crop_to_aspect(&img, 4.0 / 3.0);
        assert_eq!(out.dimensions(), (1000, 750));
    }

    #[test]
    fn crop_is_idempotent() {
        let img = RgbImage::from_fn(1001, 768, |x, y| image::Rgb([(x + y) as u8, 0, 0]));
        let once = crop_to_aspect(&img, 4.0 / 3.0);
        let twice = crop_to_aspect(&once, 4.0 / 3.0);
        assert_eq!(once, twice);
    }

    #[test]
    fn render_views_returns_three_ordered_views() {
        let cfg = RenderConfig { width: 160, height: 120, ..Default::default() };
        let set = render_views(&slab_mesh(), ArchSide::Maxillary, RenderMode::Ssp, &cfg).unwrap();
        assert_eq!(set.views.len(), 3);
        assert!(set.views.iter().all(|v| v.dimensions() == (160, 120)));
    }

    #[test]
    fn renders_are_byte_identical_across_runs() {
        let cfg = RenderConfig { width: 200, height: 150, ..Default::default() };
        for mode in [RenderMode::Ssp, RenderMode::Uvp] {
            let a = render_views(&slab_mesh(), ArchSide::Maxillary, mode, &cfg).unwrap();
            let b = render_views(&slab_mesh(), ArchSide::Maxillary, mode, &cfg).unwrap();
            assert_eq!(a.png_bytes().unwrap(), b.png_bytes().unwrap());
        }
    }

    #[test]
    fn ssp_and_uvp_share_camera_geometry() {
        // the projected location of an isolated vertex must coincide
        let mesh = tri_mesh(
            vec![Vec3::new(0.3, 0.0, 0.2), Vec3::new(-0.3, 0.0, -0.2), Vec3::new(0.0, 0.1, 0.0)],
            vec![[0, 1, 2]],
        );
        let cfg = RenderConfig { width: 320, height: 240, ..Default::default() };
        let pose = canonical_cameras(ArchSide::Maxillary)[0];
        let view = look_at(&pose, cfg.width, cfg.height);
        let (sx, sy, _) = view.project(mesh.vertices[0]).unwrap();
        let uvp = rasterize_uvp(&mesh, &pose, &cfg);
        assert_eq!(uvp.get_pixel(sx as u32, sy as u32).0, UVP_COLOR);
    }

    #[test]
    fn mirrored_mesh_with_mandibular_bottom_matches_flipped_maxillary() {
        let mesh = normalize_for_render(&slab_mesh()).unwrap();
        let mirrored = mesh.mirrored_z();
        let cfg = RenderConfig { width: 256, height: 192, ..Default::default() };
        let max_bottom = canonical_cameras(ArchSide::Maxillary)[2];
        let man_bottom = canonical_cameras(ArchSide::Mandibular)[2];
        let a = rasterize_ssp(&mesh, &max_bottom, &cfg);
        let b = rasterize_ssp(&mirrored, &man_bottom, &cfg);
        assert_eq!(a, flip_horizontal(&b));
    }

    #[test]
    fn ambient_only_shading_ignores_light_direction() {
        let cfg_a = RenderConfig {
            width: 128,
            height: 96,
            diffuse: 0.0,
            specular: 0.0,
            light_direction: Some([0.0, -1.0, 0.0]),
            ..Default::default()
        };
        let cfg_b = RenderConfig { light_direction: Some([1.0, 0.5, -0.2]), ..cfg_a.clone() };
        let pose = canonical_cameras(ArchSide::Maxillary)[0];
        let mesh = normalize_for_render(&slab_mesh()).unwrap();
        let a = rasterize_ssp(&mesh, &pose, &cfg_a);
        let b = rasterize_ssp(&mesh, &pose, &cfg_b);
        assert_eq!(a, b);
    }
}
