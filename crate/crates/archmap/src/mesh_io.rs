//! STL ingestion and the occlusal-projection primitives.
//!
//! Binary and ASCII STL are auto-detected. STL stores one vertex triple per
//! facet, so parsing welds duplicate vertices (within 1e-9 of the bounding
//! box diagonal) into a shared index buffer; the rest of the pipeline
//! assumes an indexed mesh. Facet normals in the file are ignored and
//! recomputed from winding on export, since scanner exports often carry
//! garbage normals.

use thiserror::Error;

const BINARY_HEADER_LEN: usize = 80;
const BINARY_FACET_LEN: usize = 50;
/// Weld tolerance as a fraction of the vertex-soup bounding box diagonal.
const WELD_EPS_FRACTION: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("truncated file: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("malformed ascii stl: {0}")]
    MalformedAscii(String),
    #[error("mesh contains no facets")]
    EmptyMesh,
    #[error("non-finite coordinate in facet {facet}")]
    NonFinite { facet: usize },
    #[error("face {face} references vertex {index} but only {count} vertices exist")]
    IndexOutOfRange { face: usize, index: u32, count: usize },
    #[error("mesh needs at least 3 vertices and 1 face")]
    TooSmall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StlFormat {
    Binary,
    Ascii,
}

/// Indexed triangle surface in model units (assumed mm on input).
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub source_format: StlFormat,
}

impl TriangleMesh {
    pub fn new(
        vertices: Vec<[f64; 3]>,
        faces: Vec<[u32; 3]>,
        source_format: StlFormat,
    ) -> Result<Self, MeshError> {
        if vertices.len() < 3 || faces.is_empty() {
            return Err(MeshError::TooSmall);
        }
        for (i, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(MeshError::NonFinite { facet: i });
            }
        }
        let count = vertices.len();
        for (fi, face) in faces.iter().enumerate() {
            for &idx in face {
                if idx as usize >= count {
                    return Err(MeshError::IndexOutOfRange { face: fi, index: idx, count });
                }
            }
        }
        Ok(TriangleMesh { vertices, faces, source_format })
    }

    /// Arithmetic mean of the (unique, welded) vertices.
    pub fn centroid(&self) -> [f64; 3] {
        let n = self.vertices.len() as f64;
        let mut acc = [0.0; 3];
        for v in &self.vertices {
            acc[0] += v[0];
            acc[1] += v[1];
            acc[2] += v[2];
        }
        [acc[0] / n, acc[1] / n, acc[2] / n]
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Drops z and centers (x, y) on their mean, recording the offset so the
    /// original plan coordinates can be recomposed.
    pub fn occlusal_projection(&self) -> Point2Set {
        let c = self.centroid();
        let points = self
            .vertices
            .iter()
            .map(|v| [v[0] - c[0], v[1] - c[1]])
            .collect();
        Point2Set { points, origin_offset: [c[0], c[1]] }
    }
}

/// Centered 2D point set; `origin_offset` holds the subtracted centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Point2Set {
    pub points: Vec<[f64; 2]>,
    pub origin_offset: [f64; 2],
}

impl Point2Set {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Parses STL bytes, auto-detecting the format.
///
/// A file is treated as binary when the u32 facet count at byte 80 is
/// consistent with `len == 84 + 50 * count`; otherwise an ASCII parse is
/// attempted, falling back to a length-lenient binary parse for content
/// that is clearly not text.
pub fn parse_stl(bytes: &[u8]) -> Result<TriangleMesh, MeshError> {
    if bytes.len() >= BINARY_HEADER_LEN + 4 {
        let count = declared_facet_count(bytes) as usize;
        let needed = BINARY_HEADER_LEN + 4 + count * BINARY_FACET_LEN;
        if needed == bytes.len() {
            return parse_binary(bytes, count);
        }
    }
    if looks_ascii(bytes) {
        return parse_ascii(bytes);
    }
    if bytes.len() < BINARY_HEADER_LEN + 4 {
        return Err(MeshError::TruncatedFile { needed: BINARY_HEADER_LEN + 4, have: bytes.len() });
    }
    let count = declared_facet_count(bytes) as usize;
    if count == 0 {
        return Err(MeshError::EmptyMesh);
    }
    let needed = BINARY_HEADER_LEN + 4 + count * BINARY_FACET_LEN;
    if needed > bytes.len() {
        return Err(MeshError::TruncatedFile { needed, have: bytes.len() });
    }
    // Declared count fits with trailing bytes left over (some exporters pad).
    parse_binary(bytes, count)
}

fn declared_facet_count(bytes: &[u8]) -> u32 {
    u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]])
}

fn looks_ascii(bytes: &[u8]) -> bool {
    let head = &bytes[..bytes.len().min(512)];
    let Ok(text) = std::str::from_utf8(head) else {
        return false;
    };
    text.trim_start().starts_with("solid")
}

fn parse_binary(bytes: &[u8], count: usize) -> Result<TriangleMesh, MeshError> {
    if count == 0 {
        return Err(MeshError::EmptyMesh);
    }
    let mut soup = Vec::with_capacity(count * 3);
    for i in 0..count {
        let base = BINARY_HEADER_LEN + 4 + i * BINARY_FACET_LEN;
        // 12 bytes of facet normal are skipped.
        for corner in 0..3 {
            let off = base + 12 + corner * 12;
            let v = [
                f32_le(bytes, off) as f64,
                f32_le(bytes, off + 4) as f64,
                f32_le(bytes, off + 8) as f64,
            ];
            if !v.iter().all(|c| c.is_finite()) {
                return Err(MeshError::NonFinite { facet: i });
            }
            soup.push(v);
        }
    }
    let (vertices, faces) = weld(&soup);
    TriangleMesh::new(vertices, faces, StlFormat::Binary)
}

fn f32_le(bytes: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

fn parse_ascii(bytes: &[u8]) -> Result<TriangleMesh, MeshError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| MeshError::MalformedAscii("not valid utf-8".into()))?;
    let mut tokens = text.split_whitespace().peekable();
    expect_token(&mut tokens, "solid")?;
    // Optional solid name: consume tokens until "facet" or "endsolid".
    while let Some(&tok) = tokens.peek() {
        if tok == "facet" || tok == "endsolid" {
            break;
        }
        tokens.next();
    }

    let mut soup: Vec<[f64; 3]> = Vec::new();
    let mut facet = 0usize;
    let mut closed = false;
    while let Some(tok) = tokens.next() {
        match tok {
            "facet" => {
                expect_token(&mut tokens, "normal")?;
                for _ in 0..3 {
                    parse_float(&mut tokens)?; // normal components, ignored
                }
                expect_token(&mut tokens, "outer")?;
                expect_token(&mut tokens, "loop")?;
                for _ in 0..3 {
                    expect_token(&mut tokens, "vertex")?;
                    let v = [
                        parse_float(&mut tokens)?,
                        parse_float(&mut tokens)?,
                        parse_float(&mut tokens)?,
                    ];
                    if !v.iter().all(|c| c.is_finite()) {
                        return Err(MeshError::NonFinite { facet });
                    }
                    soup.push(v);
                }
                expect_token(&mut tokens, "endloop")?;
                expect_token(&mut tokens, "endfacet")?;
                facet += 1;
            }
            "endsolid" => {
                closed = true;
                break;
            }
            other => {
                return Err(MeshError::MalformedAscii(format!("unexpected token `{other}`")));
            }
        }
    }
    if !closed {
        return Err(MeshError::MalformedAscii("missing `endsolid`".into()));
    }
    if facet == 0 {
        return Err(MeshError::EmptyMesh);
    }
    let (vertices, faces) = weld(&soup);
    TriangleMesh::new(vertices, faces, StlFormat::Ascii)
}

fn expect_token<'a>(
    tokens: &mut impl Iterator<Item = &'a str>,
    expected: &str,
) -> Result<(), MeshError> {
    match tokens.next() {
        Some(tok) if tok == expected => Ok(()),
        Some(tok) => Err(MeshError::MalformedAscii(format!(
            "expected `{expected}`, found `{tok}`"
        ))),
        None => Err(MeshError::MalformedAscii(format!(
            "expected `{expected}`, found end of file"
        ))),
    }
}

fn parse_float<'a>(tokens: &mut impl Iterator<Item = &'a str>) -> Result<f64, MeshError> {
    let tok = tokens
        .next()
        .ok_or_else(|| MeshError::MalformedAscii("expected number, found end of file".into()))?;
    tok.parse::<f64>()
        .map_err(|_| MeshError::MalformedAscii(format!("expected number, found `{tok}`")))
}

/// Welds a per-facet vertex soup into an indexed buffer. Vertices closer
/// than `WELD_EPS_FRACTION` of the soup's bounding-box diagonal share an
/// index. First-seen order is kept, so parsing is order-stable.
fn weld(soup: &[[f64; 3]]) -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
    use std::collections::HashMap;

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in soup {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let diag = (0..3)
        .map(|k| (hi[k] - lo[k]) * (hi[k] - lo[k]))
        .sum::<f64>()
        .sqrt();
    let eps = WELD_EPS_FRACTION * diag;

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut indices: Vec<u32> = Vec::with_capacity(soup.len());

    if eps <= 0.0 {
        // Degenerate extent: weld on exact bit equality.
        let mut map: HashMap<[u64; 3], u32> = HashMap::new();
        for v in soup {
            let key = [v[0].to_bits(), v[1].to_bits(), v[2].to_bits()];
            let idx = *map.entry(key).or_insert_with(|| {
                vertices.push(*v);
                (vertices.len() - 1) as u32
            });
            indices.push(idx);
        }
    } else {
        let cell = |c: f64, k: usize| ((c - lo[k]) / eps).floor() as i64;
        let mut grid: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for v in soup {
            let base = [cell(v[0], 0), cell(v[1], 1), cell(v[2], 2)];
            let mut found: Option<u32> = None;
            'search: for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dz in -1..=1i64 {
                        let key = [base[0] + dx, base[1] + dy, base[2] + dz];
                        if let Some(bucket) = grid.get(&key) {
                            for &idx in bucket {
                                let u = vertices[idx as usize];
                                let d2 = (0..3)
                                    .map(|k| (u[k] - v[k]) * (u[k] - v[k]))
                                    .sum::<f64>();
                                if d2 <= eps * eps {
                                    found = Some(idx);
                                    break 'search;
                                }
                            }
                        }
                    }
                }
            }
            let idx = found.unwrap_or_else(|| {
                vertices.push(*v);
                let idx = (vertices.len() - 1) as u32;
                grid.entry(base).or_default().push(idx);
                idx
            });
            indices.push(idx);
        }
    }

    let faces = indices
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    (vertices, faces)
}

/// Serializes vertices/faces as binary STL with normals recomputed from
/// winding. Coordinates are narrowed to f32 per the format.
pub fn write_binary_stl(vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + 4 + faces.len() * BINARY_FACET_LEN);
    let mut header = [0u8; BINARY_HEADER_LEN];
    let tag = b"indexed triangle export";
    header[..tag.len()].copy_from_slice(tag);
    out.extend_from_slice(&header);
    out.extend_from_slice(&(faces.len() as u32).to_le_bytes());
    for face in faces {
        let a = vertices[face[0] as usize];
        let b = vertices[face[1] as usize];
        let c = vertices[face[2] as usize];
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let n = if len > 0.0 {
            [n[0] / len, n[1] / len, n[2] / len]
        } else {
            [0.0, 0.0, 0.0]
        };
        for comp in n {
            out.extend_from_slice(&(comp as f32).to_le_bytes());
        }
        for v in [a, b, c] {
            for comp in v {
                out.extend_from_slice(&(comp as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

pub fn write_binary_stl_mesh(mesh: &TriangleMesh) -> Vec<u8> {
    write_binary_stl(&mesh.vertices, &mesh.faces)
}
