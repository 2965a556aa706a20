//! File formats: pose lists, PLY point clouds and meshes, triangle lists
//! and raw depth maps.
//!
//! Pose file: one view per line, whitespace separated,
//! `view_id width height fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz`
//! with the world-to-camera rotation row-major. Blank lines and lines
//! starting with `#` are ignored.
//!
//! Raw depth: `MCTD`, then little-endian `u32` version (1), width, height,
//! view-id byte length, the UTF-8 view id, and `width * height` `f32`
//! depths in row-major order with NaN marking absent pixels.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::camera::{CameraView, Intrinsics, Pose};
use crate::geom::Vec3;
use crate::geometry::{DepthMap, PointCloud, TriangleMesh};

/// Largest deviation from orthonormal accepted in a pose file.
pub const POSE_FILE_TOL: f64 = 1e-6;
pub const DEPTH_MAGIC: &[u8; 4] = b"MCTD";
pub const DEPTH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn parse_err(line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Parse { line, msg: msg.into() }
}

/// Reads a pose file; image paths become `images_dir/<view_id>.png`.
pub fn read_poses(r: impl Read, images_dir: &Path) -> Result<Vec<CameraView>, FormatError> {
    let mut views: Vec<CameraView> = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let ln = n + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 19 {
            return Err(parse_err(ln, format!("expected 19 fields, found {}", f.len())));
        }
        let int = |i: usize| f[i].parse::<u32>().map_err(|e| parse_err(ln, format!("field {}: {e}", i + 1)));
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| parse_err(ln, format!("field {}: {e}", i + 1)));
        let k = Intrinsics::new(num(3)?, num(4)?, num(5)?, num(6)?, int(1)?, int(2)?).map_err(|e| parse_err(ln, e.to_string()))?;
        let mut r = [0.0; 9];
        for (i, v) in r.iter_mut().enumerate() {
            *v = num(7 + i)?;
        }
        let t = Vec3::new(num(16)?, num(17)?, num(18)?);
        let pose = Pose::with_tolerance(Matrix3::from_row_slice(&r), t, POSE_FILE_TOL).map_err(|e| parse_err(ln, e.to_string()))?;
        if views.iter().any(|v| v.view_id == f[0]) {
            return Err(parse_err(ln, format!("duplicate view id {}", f[0])));
        }
        let mut view = CameraView::new(f[0], k, pose);
        view.image_path = images_dir.join(format!("{}.png", f[0]));
        views.push(view);
    }
    Ok(views)
}

pub fn write_poses(views: &[CameraView], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "# view_id width height fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz")?;
    for v in views {
        let k = &v.intrinsics;
        write!(w, "{} {} {} {} {} {} {}", v.view_id, k.width, k.height, k.fx, k.fy, k.cx, k.cy)?;
        let r = v.pose.rotation();
        for i in 0..3 {
            for j in 0..3 {
                write!(w, " {}", r[(i, j)])?;
            }
        }
        let t = v.pose.translation();
        writeln!(w, " {} {} {}", t.x, t.y, t.z)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

fn ply_header(w: &mut impl Write, format: PlyFormat, n_vertices: usize, colors: bool, n_faces: Option<usize>) -> std::io::Result<()> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0\nelement vertex {n_vertices}")?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    if colors {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    if let Some(n) = n_faces {
        writeln!(w, "element face {n}\nproperty list uchar int vertex_indices")?;
    }
    writeln!(w, "end_header")
}

fn write_vertices(w: &mut impl Write, format: PlyFormat, points: &[Vec3], colors: Option<&[[u8; 3]]>) -> std::io::Result<()> {
    for (i, p) in points.iter().enumerate() {
        match format {
            PlyFormat::Ascii => {
                write!(w, "{} {} {}", p.x, p.y, p.z)?;
                if let Some(c) = colors {
                    write!(w, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
                }
                writeln!(w)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for k in 0..3 {
                    w.write_all(&p[k].to_le_bytes())?;
                }
                if let Some(c) = colors {
                    w.write_all(&c[i])?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_ply_points(cloud: &PointCloud, format: PlyFormat, w: &mut impl Write) -> std::io::Result<()> {
    ply_header(w, format, cloud.len(), cloud.colors.is_some(), None)?;
    write_vertices(w, format, &cloud.points, cloud.colors.as_deref())
}

pub fn write_ply_mesh(mesh: &TriangleMesh, format: PlyFormat, w: &mut impl Write) -> std::io::Result<()> {
    ply_header(w, format, mesh.vertices.len(), false, Some(mesh.triangles.len()))?;
    write_vertices(w, format, &mesh.vertices, None)?;
    for t in &mesh.triangles {
        match format {
            PlyFormat::Ascii => writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?,
            PlyFormat::BinaryLittleEndian => {
                w.write_all(&[3u8])?;
                for &i in t {
                    w.write_all(&(i as i32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Contents of a PLY file: vertex positions, optional colors, optional
/// faces (polygons fan-triangulated).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyData {
    pub cloud: PointCloud,
    pub triangles: Vec<[u32; 3]>,
}

impl PlyData {
    pub fn into_mesh(self) -> TriangleMesh {
        TriangleMesh { vertices: self.cloud.points, triangles: self.triangles }
    }
}

/// Reads ASCII or binary little-endian PLY.
pub fn read_ply(r: impl Read) -> Result<PlyData, FormatError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<_>| -> Result<String, FormatError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(FormatError::Invalid("unexpected end of PLY header".into()));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(FormatError::Invalid("missing ply magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", f, _] => return Err(FormatError::Invalid(format!("unsupported PLY format {f}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| FormatError::Invalid(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                let (Some(ct), Some(it)) = (Scalar::parse(ct), Scalar::parse(it)) else {
                    return Err(FormatError::Invalid(format!("bad list property {l}")));
                };
                elements.last_mut().ok_or_else(|| FormatError::Invalid("property before element".into()))?.props.push(Property::List(name.to_string(), ct, it));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| FormatError::Invalid(format!("bad property type {ty}")))?;
                elements.last_mut().ok_or_else(|| FormatError::Invalid("property before element".into()))?.props.push(Property::Scalar(name.to_string(), ty));
            }
            _ => return Err(FormatError::Invalid(format!("unrecognised header line: {l}"))),
        }
    }
    let format = format.ok_or_else(|| FormatError::Invalid("missing format line".into()))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let mut src = Source { format, body: &body, pos: 0, tokens: Vec::new() };
    if format == PlyFormat::Ascii {
        src.tokens = std::str::from_utf8(&body).map_err(|_| FormatError::Invalid("non-UTF-8 ASCII body".into()))?.split_whitespace().collect();
    }
    let mut data = PlyData::default();
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let has_color = is_vertex && el.props.iter().any(|p| matches!(p, Property::Scalar(n, _) if n == "red"));
        if has_color {
            data.cloud.colors = Some(Vec::with_capacity(el.count));
        }
        for _ in 0..el.count {
            let mut xyz = [0.0; 3];
            let mut rgb = [0u8; 3];
            for prop in &el.props {
                match prop {
                    Property::Scalar(name, ty) => {
                        let v = src.scalar(*ty)?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            "red" => rgb[0] = v as u8,
                            "green" => rgb[1] = v as u8,
                            "blue" => rgb[2] = v as u8,
                            _ => {}
                        }
                    }
                    Property::List(name, ct, it) => {
                        let n = src.scalar(*ct)? as usize;
                        let idx: Vec<u32> = (0..n).map(|_| src.scalar(*it).map(|v| v as u32)).collect::<Result<_, _>>()?;
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            for k in 1..n.saturating_sub(1) {
                                data.triangles.push([idx[0], idx[k], idx[k + 1]]);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                data.cloud.points.push(Vec3::from(xyz));
                if let Some(c) = data.cloud.colors.as_mut() {
                    c.push(rgb);
                }
            }
        }
    }
    let n = data.cloud.points.len() as u32;
    if data.triangles.iter().flatten().any(|&i| i >= n) {
        return Err(FormatError::Invalid("face index out of range".into()));
    }
    Ok(data)
}

struct Source<'a> {
    format: PlyFormat,
    body: &'a [u8],
    pos: usize,
    tokens: Vec<&'a str>,
}

impl Source<'_> {
    fn scalar(&mut self, ty: Scalar) -> Result<f64, FormatError> {
        match self.format {
            PlyFormat::Ascii => {
                let tok = self.tokens.get(self.pos).ok_or_else(|| FormatError::Invalid("PLY body too short".into()))?;
                self.pos += 1;
                tok.parse().map_err(|_| FormatError::Invalid(format!("bad PLY value {tok}")))
            }
            PlyFormat::BinaryLittleEndian => {
                let end = self.pos + ty.size();
                let b = self.body.get(self.pos..end).ok_or_else(|| FormatError::Invalid("PLY body too short".into()))?;
                self.pos = end;
                Ok(ty.decode(b))
            }
        }
    }
}

/// One triangle per line: nine coordinates `ax ay az bx by bz cx cy cz`.
pub fn write_triangle_list(mesh: &TriangleMesh, w: &mut impl Write) -> std::io::Result<()> {
    for t in &mesh.triangles {
        let v: Vec<String> = t.iter().flat_map(|&i| mesh.vertices[i as usize].iter().map(|c| c.to_string()).collect::<Vec<_>>()).collect();
        writeln!(w, "{}", v.join(" "))?;
    }
    Ok(())
}

pub fn write_depth(map: &DepthMap, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(DEPTH_MAGIC)?;
    for v in [DEPTH_VERSION, map.width, map.height, map.view_id.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(map.view_id.as_bytes())?;
    for d in &map.depth {
        w.write_all(&d.map(|d| d as f32).unwrap_or(f32::NAN).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_depth(r: &mut impl Read) -> Result<DepthMap, FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DEPTH_MAGIC {
        return Err(FormatError::Invalid("not a depth file".into()));
    }
    let mut u32s = [0u32; 4];
    for v in u32s.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, width, height, id_len] = u32s;
    if version != DEPTH_VERSION {
        return Err(FormatError::Invalid(format!("unsupported depth version {version}")));
    }
    let mut id = vec![0u8; id_len as usize];
    r.read_exact(&mut id)?;
    let view_id = String::from_utf8(id).map_err(|_| FormatError::Invalid("view id is not UTF-8".into()))?;
    let mut raw = vec![0u8; width as usize * height as usize * 4];
    r.read_exact(&mut raw)?;
    let depth = raw
        .chunks_exact(4)
        .map(|b| {
            let d = f32::from_le_bytes(b.try_into().unwrap());
            if d.is_nan() {
                None
            } else {
                Some(d as f64)
            }
        })
        .collect();
    Ok(DepthMap { view_id, width, height, depth })
}
