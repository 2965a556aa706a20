//! Explicit geometry from trained fields: depth maps, fused point clouds,
//! TSDF volumes and marching-cubes meshes.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraView;
use crate::geom::{Aabb, Vec3};
use crate::renderer::{render_view, FieldSet, RenderConfig};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("depth map size {got:?} does not match view {view} ({want:?})")]
    SizeMismatch { view: String, got: (u32, u32), want: (u32, u32) },
    #[error("no view with id {0}")]
    UnknownView(String),
    #[error("truncation must be positive, got {0}")]
    BadTruncation(f64),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
}

/// Per-pixel distance along the pixel's unit ray; `None` where the field is
/// transparent.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub view_id: String,
    pub width: u32,
    pub height: u32,
    pub depth: Vec<Option<f64>>,
}

impl DepthMap {
    pub fn empty(view_id: impl Into<String>, width: u32, height: u32) -> Self {
        Self { view_id: view_id.into(), width, height, depth: vec![None; width as usize * height as usize] }
    }

    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        self.depth[v as usize * self.width as usize + u as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, d: Option<f64>) {
        self.depth[v as usize * self.width as usize + u as usize] = d;
    }

    pub fn present(&self) -> usize {
        self.depth.iter().filter(|d| d.is_some()).count()
    }
}

/// Deterministic render of `view`: depth map and color image. Pixels whose
/// accumulated opacity is below `min_opacity` get no depth (the renderer
/// already drops those below [`crate::renderer::EPS_OPACITY`]).
pub fn render_depth_and_color(view: &CameraView, fields: &FieldSet, cfg: &RenderConfig, min_opacity: f64) -> (DepthMap, RgbImage) {
    let (w, h) = (view.intrinsics.width, view.intrinsics.height);
    let results = render_view(view, fields, cfg);
    let depth = results.iter().map(|r| r.depth.filter(|_| r.opacity >= min_opacity)).collect();
    let depth = DepthMap { view_id: view.view_id.clone(), width: w, height: h, depth };
    let img = RgbImage::from_fn(w, h, |u, v| {
        let c = results[(v * w + u) as usize].color;
        image::Rgb(c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    (depth, img)
}

pub fn render_depth_map(view: &CameraView, fields: &FieldSet, cfg: &RenderConfig) -> DepthMap {
    render_depth_and_color(view, fields, cfg, 0.0).0
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, colors: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Averages the points (and colors) falling into each cube of side
    /// `cell`. Output is ordered by cell index.
    pub fn voxel_downsample(&self, cell: f64) -> PointCloud {
        let mut cells: BTreeMap<[i64; 3], (Vec3, [f64; 3], usize)> = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            let key = [0, 1, 2].map(|k| (p[k] / cell).floor() as i64);
            let e = cells.entry(key).or_insert((Vec3::zeros(), [0.0; 3], 0));
            e.0 += p;
            if let Some(c) = &self.colors {
                for ch in 0..3 {
                    e.1[ch] += c[i][ch] as f64;
                }
            }
            e.2 += 1;
        }
        let points = cells.values().map(|(s, _, n)| s / *n as f64).collect();
        let colors = self
            .colors
            .as_ref()
            .map(|_| cells.values().map(|(_, c, n)| c.map(|v| (v / *n as f64).round() as u8)).collect());
        PointCloud { points, colors }
    }
}

/// Back-projects every present depth to `origin + depth * direction`,
/// concatenating views in the order of `maps`. Colors are attached when an
/// image is given for every map.
pub fn fuse_point_cloud(maps: &[DepthMap], views: &[CameraView], images: Option<&[RgbImage]>) -> Result<PointCloud, GeometryError> {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (mi, map) in maps.iter().enumerate() {
        let view = views.iter().find(|v| v.view_id == map.view_id).ok_or_else(|| GeometryError::UnknownView(map.view_id.clone()))?;
        let want = (view.intrinsics.width, view.intrinsics.height);
        if (map.width, map.height) != want {
            return Err(GeometryError::SizeMismatch { view: map.view_id.clone(), got: (map.width, map.height), want });
        }
        for v in 0..map.height {
            for u in 0..map.width {
                if let Some(d) = map.get(u, v) {
                    points.push(view.cast_pixel_ray(u, v).at(d));
                    if let Some(imgs) = images {
                        colors.push(imgs[mi].get_pixel(u, v).0);
                    }
                }
            }
        }
    }
    Ok(PointCloud { points, colors: images.map(|_| colors) })
}

/// How voxels lying more than `truncation` behind the observed surface are
/// treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehindPolicy {
    /// Left untouched: they are occluded from this view.
    #[default]
    Skip,
    /// Updated with `-truncation`.
    Clamp,
}

/// Truncated signed distances sampled at voxel centers, positive in front
/// of the surface.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    resolution: [usize; 3],
    bounds: Aabb,
    truncation: f64,
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(resolution: [usize; 3], bounds: Aabb, truncation: f64) -> Result<Self, GeometryError> {
        if !(truncation > 0.0) {
            return Err(GeometryError::BadTruncation(truncation));
        }
        if resolution.iter().any(|&r| r < 2) || !bounds.is_valid() {
            return Err(GeometryError::InvalidVolume(format!("resolution {resolution:?}, bounds {bounds:?}")));
        }
        let n = resolution.iter().product();
        Ok(Self { resolution, bounds, truncation, tsdf: vec![truncation; n], weight: vec![0.0; n] })
    }

    /// Volume whose every voxel holds the clamped value of `sdf` at its
    /// center, with weight 1.
    pub fn from_fn(resolution: [usize; 3], bounds: Aabb, truncation: f64, sdf: impl Fn(&Vec3) -> f64) -> Result<Self, GeometryError> {
        let mut vol = Self::new(resolution, bounds, truncation)?;
        for idx in 0..vol.tsdf.len() {
            let p = vol.center_of(idx);
            vol.tsdf[idx] = sdf(&p).clamp(-truncation, truncation);
            vol.weight[idx] = 1.0;
        }
        Ok(vol)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn voxel_size(&self) -> Vec3 {
        let e = self.bounds.extent();
        Vec3::new(e.x / self.resolution[0] as f64, e.y / self.resolution[1] as f64, e.z / self.resolution[2] as f64)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.voxel_size();
        self.bounds.min_v() + Vec3::new((i as f64 + 0.5) * s.x, (j as f64 + 0.5) * s.y, (k as f64 + 0.5) * s.z)
    }

    fn center_of(&self, idx: usize) -> Vec3 {
        let [nx, ny, _] = self.resolution;
        self.center(idx % nx, (idx / nx) % ny, idx / (nx * ny))
    }

    /// Projective update from one depth map: each voxel projecting onto a
    /// pixel with a depth takes `sdf = depth - |voxel - camera center|`,
    /// clamped to `±truncation`, into a running average with weight 1.
    pub fn integrate(&mut self, map: &DepthMap, view: &CameraView, behind: BehindPolicy) -> Result<(), GeometryError> {
        let want = (view.intrinsics.width, view.intrinsics.height);
        if (map.width, map.height) != want || map.view_id != view.view_id {
            return Err(GeometryError::SizeMismatch { view: view.view_id.clone(), got: (map.width, map.height), want });
        }
        let trunc = self.truncation;
        let center = view.pose.center();
        let centers: Vec<Vec3> = (0..self.tsdf.len()).map(|i| self.center_of(i)).collect();
        self.tsdf
            .par_iter_mut()
            .zip(self.weight.par_iter_mut())
            .zip(centers.par_iter())
            .for_each(|((tsdf, weight), p)| {
                let proj = view.project(p);
                if !proj.in_front() {
                    return;
                }
                let (u, v) = (proj.pixel.x.floor(), proj.pixel.y.floor());
                if u < 0.0 || v < 0.0 || u >= map.width as f64 || v >= map.height as f64 {
                    return;
                }
                let Some(d) = map.get(u as u32, v as u32) else {
                    return;
                };
                let sdf = d - (p - center).norm();
                if sdf < -trunc && behind == BehindPolicy::Skip {
                    return;
                }
                let sdf = sdf.clamp(-trunc, trunc);
                *tsdf = (*tsdf * *weight + sdf) / (*weight + 1.0);
                *weight += 1.0;
            });
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise seen from the positive side of the level set.
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Undirected edge -> number of incident triangles.
    pub fn edge_counts(&self) -> BTreeMap<(u32, u32), usize> {
        let mut counts = BTreeMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// Every directed edge appears at most once, so neighbouring triangles
    /// agree on winding.
    pub fn is_consistently_wound(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.triangles.iter().all(|t| (0..3).all(|e| seen.insert((t[e], t[(e + 1) % 3]))))
    }

    /// Signed enclosed volume (positive when normals point outward).
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }
}

/// Cube corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
/// Edge `axis * 4 + n` joins the `n`-th corner lacking bit `axis` to its
/// neighbour along `axis`.
fn edge_corners(edge: usize) -> (usize, usize) {
    let axis = edge / 4;
    let a = (0..8).filter(|c| c & (1 << axis) == 0).nth(edge % 4).unwrap();
    (a, a | (1 << axis))
}

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    let n = (0..8).filter(|c| c & (1 << axis) == 0).position(|c| c == lo).unwrap();
    axis * 4 + n
}

/// Corners of each face, counter-clockwise seen from outside the cube.
fn face_cycles() -> [[usize; 4]; 6] {
    let mut out = [[0; 4]; 6];
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let corner = |a: usize, b: usize| (side << axis) | (a << u) | (b << v);
            let mut cyc = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if side == 0 {
                cyc.reverse();
            }
            out[axis * 2 + side] = cyc;
        }
    }
    out
}

/// Triangles (as edge triples) for one inside/outside corner pattern.
///
/// On each face the boundary is walked counter-clockwise and every crossing
/// into the inside is joined to the next crossing out of it, so inside
/// corners are never joined diagonally. Both cubes sharing a face make the
/// same choice, which keeps the mesh watertight.
fn build_case(mask: u8) -> Vec<[u8; 3]> {
    let inside = |c: usize| mask & (1 << c) != 0;
    let mut next = [usize::MAX; 12];
    for cyc in face_cycles() {
        let mut crossings = Vec::new();
        for j in 0..4 {
            let (a, b) = (cyc[j], cyc[(j + 1) % 4]);
            if inside(a) != inside(b) {
                crossings.push((edge_between(a, b), inside(b)));
            }
        }
        for (i, &(e, enters)) in crossings.iter().enumerate() {
            if enters {
                let leave = (1..crossings.len()).map(|k| crossings[(i + k) % crossings.len()]).find(|c| !c.1).unwrap();
                next[e] = leave.0;
            }
        }
    }
    let mut tris = Vec::new();
    let mut visited = [false; 12];
    for start in 0..12 {
        if next[start] == usize::MAX || visited[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !visited[e] {
            visited[e] = true;
            lp.push(e as u8);
            e = next[e];
        }
        for k in 1..lp.len() - 1 {
            tris.push([lp[0], lp[k], lp[k + 1]]);
        }
    }
    tris
}

fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(build_case).collect())
}

/// Isosurface at `iso` between voxel centers. A corner is inside when its
/// value is below `iso`; cubes touching an unobserved voxel (weight 0) are
/// skipped. Vertices on shared edges are shared.
pub fn marching_cubes(vol: &TsdfVolume, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = vol.resolution;
    let table = case_table();
    let mut mesh = TriangleMesh::default();
    let mut vertex_of: HashMap<(usize, usize), u32> = HashMap::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner_idx = |c: usize| vol.index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                let idx: [usize; 8] = std::array::from_fn(corner_idx);
                if idx.iter().any(|&c| vol.weight[c] <= 0.0) {
                    continue;
                }
                let mask = (0..8).fold(0u8, |m, c| if vol.tsdf[idx[c]] < iso { m | (1 << c) } else { m });
                if mask == 0 || mask == 255 {
                    continue;
                }
                let mut vertex = |edge: u8| -> u32 {
                    let (a, b) = edge_corners(edge as usize);
                    let key = (idx[a], edge as usize / 4);
                    *vertex_of.entry(key).or_insert_with(|| {
                        let (va, vb) = (vol.tsdf[idx[a]], vol.tsdf[idx[b]]);
                        let t = (iso - va) / (vb - va);
                        let pa = vol.center(i + (a & 1), j + ((a >> 1) & 1), k + ((a >> 2) & 1));
                        let pb = vol.center(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1));
                        mesh.vertices.push(pa + (pb - pa) * t);
                        (mesh.vertices.len() - 1) as u32
                    })
                };
                let tris: Vec<[u32; 3]> = table[mask as usize].iter().map(|t| t.map(&mut vertex)).collect();
                for t in tris {
                    if mesh.area(&t) > 1e-12 {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use crate::field::{GridInit, RadianceGrid, ShDegree};

    #[test]
    fn every_case_yields_closed_loops() {
        for (mask, tris) in case_table().iter().enumerate() {
            let crossing_edges = (0..12)
                .filter(|&e| {
                    let (a, b) = edge_corners(e);
                    (mask >> a & 1) != (mask >> b & 1)
                })
                .count();
            if mask == 0 || mask == 255 {
                assert!(tris.is_empty());
            } else {
                assert!(!tris.is_empty(), "case {mask}");
            }
            // Each crossing edge carries exactly one vertex of the patch.
            let used: std::collections::BTreeSet<u8> = tris.iter().flatten().copied().collect();
            assert_eq!(used.len(), crossing_edges, "case {mask}");
        }
    }

    fn sphere_volume(n: usize, r: f64) -> TsdfVolume {
        let b = Aabb::new([-1.0; 3], [1.0; 3]);
        let trunc = 3.0 * 2.0 / n as f64;
        TsdfVolume::from_fn([n; 3], b, trunc, |p| p.norm() - r).unwrap()
    }

    #[test]
    fn sphere_mesh_is_closed_and_accurate() {
        let vol = sphere_volume(40, 0.63);
        let mesh = marching_cubes(&vol, 0.0);
        assert!(mesh.is_closed());
        assert!(mesh.is_consistently_wound());
        let half_voxel = 0.5 * vol.voxel_size().x;
        for v in &mesh.vertices {
            assert!((v.norm() - 0.63).abs() <= half_voxel, "{}", v.norm());
        }
        // Normals point to the positive (outer) side.
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.63f64.powi(3);
        assert!((mesh.signed_volume() - exact).abs() < 0.02 * exact);
    }

    #[test]
    fn vertices_lie_on_sign_changes_inside_bounds() {
        let vol = TsdfVolume::from_fn([12, 9, 10], Aabb::new([0.0; 3], [1.0, 0.8, 0.9]), 0.3, |p| {
            (p.x * 7.0).sin() + (p.y * 5.0).cos() * 0.7 - p.z
        })
        .unwrap();
        let mesh = marching_cubes(&vol, 0.0);
        assert!(!mesh.triangles.is_empty());
        let inner = Aabb::new(vol.center(0, 0, 0).into(), vol.center(11, 8, 9).into());
        assert!(mesh.vertices.iter().all(|v| inner.contains(v)));
        assert!(mesh.is_consistently_wound());
    }

    #[test]
    fn trivial_volumes() {
        let vol = TsdfVolume::from_fn([5; 3], Aabb::new([0.0; 3], [1.0; 3]), 0.5, |_| 0.2).unwrap();
        assert!(marching_cubes(&vol, 0.0).triangles.is_empty());
        let mut vol = vol;
        let c = vol.index(2, 2, 2);
        vol.tsdf[c] = -0.2;
        let mesh = marching_cubes(&vol, 0.0);
        // A single inside voxel is wrapped by a small closed octahedron.
        assert_eq!(mesh.vertices.len(), 6);
        assert_eq!(mesh.triangles.len(), 8);
        assert!(mesh.is_closed() && mesh.is_consistently_wound());
        assert!(mesh.signed_volume() > 0.0);
        assert!(TsdfVolume::new([4; 3], Aabb::new([0.0; 3], [1.0; 3]), 0.0).is_err());
    }

    fn front_camera(w: u32, h: u32) -> CameraView {
        let k = Intrinsics::new(40.0, 40.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
        CameraView::new("cam", k, Pose::look_at(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0), -Vec3::y()).unwrap())
    }

    fn plane_map(view: &CameraView, z: f64) -> DepthMap {
        let mut m = DepthMap::empty(&view.view_id, view.intrinsics.width, view.intrinsics.height);
        for v in 0..m.height {
            for u in 0..m.width {
                let r = view.cast_pixel_ray(u, v);
                m.set(u, v, Some(z / r.direction.z));
            }
        }
        m
    }

    #[test]
    fn plane_integration_crosses_at_plane() {
        let view = front_camera(64, 64);
        let map = plane_map(&view, 5.0);
        let mut vol = TsdfVolume::new([16, 16, 40], Aabb::new([-0.5, -0.5, 3.0], [0.5, 0.5, 7.0]), 0.3).unwrap();
        vol.integrate(&map, &view, BehindPolicy::Clamp).unwrap();
        let dz = vol.voxel_size().z;
        for k in 0..39 {
            let (a, b) = (vol.tsdf[vol.index(8, 8, k)], vol.tsdf[vol.index(8, 8, k + 1)]);
            if a > 0.0 && b <= 0.0 {
                let za = vol.center(8, 8, k).z;
                let z0 = za + a / (a - b) * dz;
                assert!((z0 - 5.0).abs() < dz, "{z0}");
            }
        }
        // Far behind the surface the value is clamped.
        assert_eq!(vol.tsdf[vol.index(8, 8, 39)], -0.3);
        let once = vol.clone();
        vol.integrate(&map, &view, BehindPolicy::Clamp).unwrap();
        for i in 0..vol.tsdf.len() {
            assert!((vol.tsdf[i] - once.tsdf[i]).abs() < 1e-12);
            assert_eq!(vol.weight[i], 2.0 * once.weight[i]);
        }
        let mut skipped = TsdfVolume::new([16, 16, 40], *vol.bounds(), 0.3).unwrap();
        skipped.integrate(&map, &view, BehindPolicy::Skip).unwrap();
        assert_eq!(skipped.weight[skipped.index(8, 8, 39)], 0.0);
    }

    #[test]
    fn integration_order_invariant() {
        let view = front_camera(32, 32);
        let (a, b) = (plane_map(&view, 4.9), plane_map(&view, 5.05));
        let bounds = Aabb::new([-0.5, -0.5, 4.0], [0.5, 0.5, 6.0]);
        let mut ab = TsdfVolume::new([8, 8, 20], bounds, 0.4).unwrap();
        let mut ba = ab.clone();
        ab.integrate(&a, &view, BehindPolicy::Clamp).unwrap();
        ab.integrate(&b, &view, BehindPolicy::Clamp).unwrap();
        ba.integrate(&b, &view, BehindPolicy::Clamp).unwrap();
        ba.integrate(&a, &view, BehindPolicy::Clamp).unwrap();
        for i in 0..ab.tsdf.len() {
            assert!((ab.tsdf[i] - ba.tsdf[i]).abs() < 1e-9);
            assert!(ab.tsdf[i].abs() <= 0.4);
        }
    }

    #[test]
    fn fusion_back_projects_and_round_trips() {
        let view = front_camera(16, 12);
        let mut m = DepthMap::empty("cam", 16, 12);
        m.set(3, 7, Some(2.5));
        let cloud = fuse_point_cloud(&[m], &[view.clone()], None).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points[0], view.cast_pixel_ray(3, 7).at(2.5));
        let full = plane_map(&view, 5.0);
        let cloud = fuse_point_cloud(&[full], &[view.clone()], None).unwrap();
        for (i, p) in cloud.points.iter().enumerate() {
            let px = view.project(p).pixel;
            let (u, v) = ((i % 16) as f64 + 0.5, (i / 16) as f64 + 0.5);
            assert!((px.x - u).abs() < 1e-6 && (px.y - v).abs() < 1e-6);
        }
        assert!(fuse_point_cloud(&[DepthMap::empty("other", 16, 12)], &[view], None).is_err());
    }

    #[test]
    fn downsample_averages_cells() {
        let c = PointCloud::new(vec![Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.3, 0.3, 0.3), Vec3::new(1.5, 0.0, 0.0)]);
        let d = c.voxel_downsample(1.0);
        assert_eq!(d.points, vec![Vec3::new(0.2, 0.2, 0.2), Vec3::new(1.5, 0.0, 0.0)]);
    }

    /// Occupancy grid of a sphere with a sharp but smooth boundary.
    fn sphere_field(n: usize, center: Vec3, r: f64) -> RadianceGrid {
        let b = Aabb::new([-1.0; 3], [1.0; 3]);
        let mut g = RadianceGrid::new([n; 3], b, ShDegree::Zero, GridInit::default()).unwrap();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let sd = (g.voxel_center(i, j, k) - center).norm() - r;
                    let idx = g.voxel_index(i, j, k);
                    g.density[idx] = (-sd * 400.0).clamp(-20.0, 20.0);
                }
            }
        }
        g
    }

    #[test]
    fn empty_field_has_no_depth() {
        let g = RadianceGrid::empty([4; 3], Aabb::new([-1.0; 3], [1.0; 3]), ShDegree::Zero).unwrap();
        let view = CameraView::new("c", Intrinsics::new(8.0, 8.0, 4.0, 4.0, 8, 8).unwrap(), Pose::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y()).unwrap());
        assert_eq!(render_depth_map(&view, &FieldSet::single(&g), &RenderConfig::default()).present(), 0);
    }

    #[test]
    fn sphere_depth_matches_intersection() {
        let center = Vec3::new(0.1, -0.05, 0.0);
        let r = 0.5;
        let g = sphere_field(64, center, r);
        let eye = Vec3::new(0.0, 0.0, 3.0);
        let view = CameraView::new("c", Intrinsics::new(60.0, 60.0, 16.0, 16.0, 32, 32).unwrap(), Pose::look_at(eye, Vec3::zeros(), Vec3::y()).unwrap());
        let cfg = RenderConfig { n_coarse: 64, n_fine: 64, background: [0.0; 3] };
        let fields = FieldSet::single(&g);
        let map = render_depth_map(&view, &fields, &cfg);
        let mut hits = 0;
        for v in 0..32 {
            for u in 0..32 {
                let ray = view.cast_pixel_ray(u, v);
                // Quadratic ray-sphere intersection.
                let oc = ray.origin - center;
                let bq = oc.dot(&ray.direction);
                let disc = bq * bq - (oc.norm_squared() - r * r);
                let Some((t0, t1)) = fields.clip(&ray) else { continue };
                let spacing = (t1 - t0) / cfg.n_coarse as f64;
                if disc > 0.05 {
                    let t_hit = -bq - disc.sqrt();
                    let d = map.get(u, v).expect("hit pixel has depth");
                    assert!((d - t_hit).abs() <= spacing, "pixel ({u},{v}): {d} vs {t_hit}");
                    hits += 1;
                }
            }
        }
        assert!(hits > 100);
    }

}
