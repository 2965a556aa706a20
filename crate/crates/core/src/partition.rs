//! Top-down scene partitioning, location-specific view indexing and
//! multi-camera tiling.
//!
//! A sub-region's expanded box is projected into every view; the bounding
//! box of the projected corners becomes a crop whose camera keeps the source
//! focal lengths and pose and only moves the principal point:
//! `c_new = c - crop_origin`. Every tile pixel therefore casts exactly the
//! ray of the source pixel it was cut from.

use std::collections::BTreeMap;

use image::RgbImage;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraView, Intrinsics};
use crate::geom::{Aabb, Rect, Vec3};

/// Crops smaller than this in either dimension are dropped.
pub const MIN_TILE_SIZE: u32 = 8;

/// Near-plane offset used when a box straddles the camera plane.
const NEAR_CLIP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("degenerate scene bounds {0:?}")]
    DegenerateBounds(Aabb),
    #[error("grid must have at least one row and column, got {0}x{1}")]
    EmptyGrid(usize, usize),
    #[error("overlap factor must be >= 1, got {0}")]
    BadOverlap(f64),
}

/// Axis-aligned box around the whole scene; `z` is up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds(pub Aabb);

impl SceneBounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, PartitionError> {
        let b = Aabb::new(min, max);
        if !b.is_valid() {
            return Err(PartitionError::DegenerateBounds(b));
        }
        Ok(Self(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubRegion {
    /// `(row, col)`; rows run along `y`, columns along `x`.
    pub index: (usize, usize),
    pub nominal: Aabb,
    pub expanded: Aabb,
}

impl SubRegion {
    pub fn name(&self) -> String {
        format!("r{}_{}", self.index.0, self.index.1)
    }

    /// Replaces the z-range of both boxes.
    pub fn with_z_range(mut self, z0: f64, z1: f64) -> Self {
        self.nominal.min[2] = z0;
        self.nominal.max[2] = z1;
        self.expanded.min[2] = z0;
        self.expanded.max[2] = z1;
        self
    }
}

/// Splits the ground plan into `rows x cols` equal cells. Each expanded cell
/// has lateral sides `overlap_factor` times the nominal ones, centered on the
/// nominal cell and clipped to the scene; z spans the whole scene.
pub fn partition_scene(
    bounds: &SceneBounds,
    grid: (usize, usize),
    overlap_factor: f64,
) -> Result<Vec<SubRegion>, PartitionError> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(PartitionError::EmptyGrid(rows, cols));
    }
    if !(overlap_factor >= 1.0 && overlap_factor.is_finite()) {
        return Err(PartitionError::BadOverlap(overlap_factor));
    }
    let b = bounds.0;
    if !b.is_valid() {
        return Err(PartitionError::DegenerateBounds(b));
    }
    // Exact shared edges between neighbours, exact outer edges.
    let edge = |lo: f64, hi: f64, n: usize, i: usize| {
        if i == n {
            hi
        } else {
            lo + (hi - lo) * i as f64 / n as f64
        }
    };
    let scene_rect = b.ground_rect();
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let nominal = Rect {
                x0: edge(b.min[0], b.max[0], cols, col),
                x1: edge(b.min[0], b.max[0], cols, col + 1),
                y0: edge(b.min[1], b.max[1], rows, row),
                y1: edge(b.min[1], b.max[1], rows, row + 1),
            };
            let (cx, cy) = (0.5 * (nominal.x0 + nominal.x1), 0.5 * (nominal.y0 + nominal.y1));
            let hx = 0.5 * overlap_factor * (nominal.x1 - nominal.x0);
            let hy = 0.5 * overlap_factor * (nominal.y1 - nominal.y0);
            let expanded = if overlap_factor == 1.0 {
                nominal
            } else {
                Rect { x0: cx - hx, x1: cx + hx, y0: cy - hy, y1: cy + hy }.intersection(&scene_rect)
            };
            out.push(SubRegion {
                index: (row, col),
                nominal: nominal.with_z(b.min[2], b.max[2]),
                expanded: expanded.with_z(b.min[2], b.max[2]),
            });
        }
    }
    Ok(out)
}

/// One crop of one source view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub source_view_id: String,
    pub crop_origin: (u32, u32),
    pub crop_size: (u32, u32),
    pub new_principal_point: (f64, f64),
}

impl TileSpec {
    /// Builds the tile for a crop rectangle of `source`, rewriting the
    /// principal point.
    pub fn for_crop(source: &CameraView, crop_origin: (u32, u32), crop_size: (u32, u32)) -> Self {
        let k = &source.intrinsics;
        Self {
            source_view_id: source.view_id.clone(),
            crop_origin,
            crop_size,
            new_principal_point: (k.cx - crop_origin.0 as f64, k.cy - crop_origin.1 as f64),
        }
    }

    /// The camera of the cropped image: same focal lengths and pose, crop
    /// size and rewritten principal point.
    pub fn tiled_view(&self, source: &CameraView, view_id: impl Into<String>) -> CameraView {
        let k = &source.intrinsics;
        let intrinsics = Intrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: self.new_principal_point.0,
            cy: self.new_principal_point.1,
            width: self.crop_size.0,
            height: self.crop_size.1,
        };
        CameraView { view_id: view_id.into(), intrinsics, pose: source.pose, image_path: Default::default() }
    }

    pub fn bytes(&self) -> u64 {
        frame_bytes(self.crop_size.0, self.crop_size.1)
    }
}

/// Points of `bbox` that lie in front of the camera: the corners with
/// positive depth plus the crossings of the box edges with a plane just in
/// front of the camera.
fn visible_box_points(view: &CameraView, bbox: &Aabb) -> Vec<Vec3> {
    let corners = bbox.corners();
    let cam: Vec<Vec3> = corners.iter().map(|c| view.pose.transform_point(c)).collect();
    let mut pts: Vec<Vec3> = corners.iter().zip(&cam).filter(|(_, pc)| pc.z > NEAR_CLIP).map(|(c, _)| *c).collect();
    if pts.len() == 8 || pts.is_empty() {
        return pts;
    }
    for a in 0..8usize {
        for k in 0..3 {
            let b = a | 1 << k;
            if b == a {
                continue;
            }
            let (za, zb) = (cam[a].z - NEAR_CLIP, cam[b].z - NEAR_CLIP);
            if (za > 0.0) != (zb > 0.0) {
                let s = za / (za - zb);
                let p = corners[a] + (corners[b] - corners[a]) * s;
                // Nudge onto the visible side.
                let pc = view.pose.transform_point(&p);
                if pc.z > 0.0 {
                    pts.push(p);
                }
            }
        }
    }
    pts
}

/// Crop rectangle covering the projection of `bbox` in `view`, or `None` when
/// the box is behind the camera, outside the frame or smaller than
/// [`MIN_TILE_SIZE`].
pub fn crop_for_box(view: &CameraView, bbox: &Aabb) -> Option<((u32, u32), (u32, u32))> {
    let pts = visible_box_points(view, bbox);
    if pts.is_empty() {
        return None;
    }
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        let px = view.project(p).pixel;
        u0 = u0.min(px.x);
        v0 = v0.min(px.y);
        u1 = u1.max(px.x);
        v1 = v1.max(px.y);
    }
    let (w, h) = (view.intrinsics.width as f64, view.intrinsics.height as f64);
    let x0 = u0.floor().clamp(0.0, w);
    let y0 = v0.floor().clamp(0.0, h);
    let x1 = u1.ceil().clamp(0.0, w);
    let y1 = v1.ceil().clamp(0.0, h);
    if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
        return None;
    }
    let (cw, ch) = ((x1 - x0) as u32, (y1 - y0) as u32);
    if cw < MIN_TILE_SIZE || ch < MIN_TILE_SIZE {
        return None;
    }
    Some(((x0 as u32, y0 as u32), (cw, ch)))
}

/// Location-specific view indexing: one [`TileSpec`] for every view that
/// sees the region's expanded box.
pub fn index_views(region: &SubRegion, views: &[CameraView]) -> Vec<TileSpec> {
    views
        .iter()
        .filter_map(|v| crop_for_box(v, &region.expanded).map(|(o, s)| TileSpec::for_crop(v, o, s)))
        .collect()
}

/// Source of full-frame pixels, keyed by view.
pub trait ImageStore {
    fn load(&self, view: &CameraView) -> Result<RgbImage, String>;
}

/// Loads PNGs from each view's `image_path`.
pub struct DiskImageStore;

impl ImageStore for DiskImageStore {
    fn load(&self, view: &CameraView) -> Result<RgbImage, String> {
        image::open(&view.image_path).map(|i| i.to_rgb8()).map_err(|e| format!("{}: {e}", view.image_path.display()))
    }
}

/// In-memory store keyed by view id.
#[derive(Default)]
pub struct MemoryImageStore(pub BTreeMap<String, RgbImage>);

impl ImageStore for MemoryImageStore {
    fn load(&self, view: &CameraView) -> Result<RgbImage, String> {
        self.0.get(&view.view_id).cloned().ok_or_else(|| format!("no image for view {}", view.view_id))
    }
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub spec: TileSpec,
    pub view: CameraView,
    pub image: RgbImage,
}

#[derive(Debug, Default)]
pub struct TileSet {
    pub tiles: Vec<Tile>,
    /// `(source_view_id, reason)` for every tile that could not be cut.
    pub failures: Vec<(String, String)>,
}

/// Cuts every tile out of its source image. A failed load or an out-of-frame
/// crop skips that tile and is reported in [`TileSet::failures`].
pub fn extract_tiles(specs: &[TileSpec], views: &[CameraView], store: &dyn ImageStore) -> TileSet {
    let by_id: BTreeMap<&str, &CameraView> = views.iter().map(|v| (v.view_id.as_str(), v)).collect();
    let mut out = TileSet::default();
    let mut cache: Option<(String, RgbImage)> = None;
    for spec in specs {
        let Some(source) = by_id.get(spec.source_view_id.as_str()) else {
            out.failures.push((spec.source_view_id.clone(), "unknown view".into()));
            continue;
        };
        if cache.as_ref().map(|(id, _)| id != &spec.source_view_id).unwrap_or(true) {
            match store.load(source) {
                Ok(img) => cache = Some((spec.source_view_id.clone(), img)),
                Err(e) => {
                    cache = None;
                    out.failures.push((spec.source_view_id.clone(), e));
                    continue;
                }
            }
        }
        let img = &cache.as_ref().unwrap().1;
        let (ox, oy) = spec.crop_origin;
        let (w, h) = spec.crop_size;
        if img.width() != source.intrinsics.width || img.height() != source.intrinsics.height {
            out.failures.push((spec.source_view_id.clone(), "image size does not match intrinsics".into()));
            continue;
        }
        if ox as u64 + w as u64 > img.width() as u64 || oy as u64 + h as u64 > img.height() as u64 {
            out.failures.push((spec.source_view_id.clone(), "crop exceeds source frame".into()));
            continue;
        }
        let image = image::imageops::crop_imm(img, ox, oy, w, h).to_image();
        let view = spec.tiled_view(source, format!("{}@{}_{}", spec.source_view_id, ox, oy));
        out.tiles.push(Tile { spec: spec.clone(), view, image });
    }
    out
}

/// Bytes of an 8-bit RGB frame.
pub fn frame_bytes(width: u32, height: u32) -> u64 {
    width as u64 * height as u64 * 3
}

pub fn mebibytes(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub bytes_full_frames: u64,
    pub bytes_tiles: u64,
    /// `bytes_full_frames / bytes_tiles`; infinite when there are no tiles.
    pub reduction_factor: f64,
}

impl MemoryEstimate {
    pub fn new(bytes_full_frames: u64, bytes_tiles: u64) -> Self {
        let reduction_factor = match (bytes_full_frames, bytes_tiles) {
            (0, 0) => 1.0,
            (_, 0) => f64::INFINITY,
            (f, t) => f as f64 / t as f64,
        };
        Self { bytes_full_frames, bytes_tiles, reduction_factor }
    }
}

/// Full-frame versus tile RAM for the views and the tiles cut from them.
pub fn estimate_memory(views: &[CameraView], specs: &[TileSpec]) -> MemoryEstimate {
    let full = views.iter().map(|v| frame_bytes(v.intrinsics.width, v.intrinsics.height)).sum();
    let tiles = specs.iter().map(TileSpec::bytes).sum();
    MemoryEstimate::new(full, tiles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMemory {
    pub region: (usize, usize),
    pub estimate: MemoryEstimate,
}

/// Per-region estimates plus the total over all regions. Each region is
/// compared against the full frames of the views it uses.
pub fn estimate_region_memory(views: &[CameraView], regions: &[(SubRegion, Vec<TileSpec>)]) -> (Vec<RegionMemory>, MemoryEstimate) {
    let by_id: BTreeMap<&str, &CameraView> = views.iter().map(|v| (v.view_id.as_str(), v)).collect();
    let mut per = Vec::new();
    let (mut full_total, mut tile_total) = (0u64, 0u64);
    for (region, specs) in regions {
        let full: u64 = specs
            .iter()
            .filter_map(|s| by_id.get(s.source_view_id.as_str()))
            .map(|v| frame_bytes(v.intrinsics.width, v.intrinsics.height))
            .sum();
        let tiles: u64 = specs.iter().map(TileSpec::bytes).sum();
        full_total += full;
        tile_total += tiles;
        per.push(RegionMemory { region: region.index, estimate: MemoryEstimate::new(full, tiles) });
    }
    (per, MemoryEstimate::new(full_total, tile_total))
}

/// Ray of tile pixel `p` expressed as a source-view pixel.
pub fn tile_to_source_pixel(spec: &TileSpec, p: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(p.x + spec.crop_origin.0 as f64, p.y + spec.crop_origin.1 as f64)
}
