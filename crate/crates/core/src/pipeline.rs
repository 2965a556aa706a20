//! Config-driven pipeline stages. Stages talk to each other only through
//! files under the output directory:
//!
//! ```text
//! partition/regions.json      sub-region boxes
//! tiles/views.txt             (down-scaled) source cameras, pose-file format
//! tiles/manifest.json         tiles per region
//! tiles/memory.csv            full-frame vs tile bytes per region
//! tiles/r{row}_{col}/*.png    tile images
//! checkpoints/r{row}_{col}.grid
//! traces/r{row}_{col}.csv     iter, wall_clock_s, loss, aoi_psnr
//! train/status.json           per-region outcome
//! renders/{view}.png, renders/psnr.csv
//! depth/{view}.depth
//! geometry/cloud.ply, geometry/mesh.ply, geometry/mesh.txt
//! eval/c2c.txt, eval/curves.csv, eval/sampling_r{row}_{col}.csv
//! report/memory.csv, report/convergence.csv, report/curves.csv, report/summary.txt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraView, Intrinsics};
use crate::field::{GridInit, RadianceGrid, ShDegree};
use crate::geom::Aabb;
use crate::geometry::{fuse_point_cloud, marching_cubes, render_depth_and_color, BehindPolicy, DepthMap, TsdfVolume};
use crate::io::{read_depth, read_ply, read_poses, write_depth, write_ply_mesh, write_ply_points, write_poses, write_triangle_list, PlyFormat};
use crate::metrics::{cloud_to_cloud, psnr_rgb8, threshold_curves};
use crate::partition::{estimate_region_memory, extract_tiles, index_views, partition_scene, ImageStore, SceneBounds, SubRegion, TileSpec};
use crate::renderer::{FieldSet, RenderConfig};
use crate::synth::{build_camera_rig, render_ground_truth, sample_ground_truth_cloud, AnalyticScene, RigPattern, RigSpec};
use crate::trainer::{compare_sampling, run_schedule, write_trace_csv, AdamConfig, LossConfig, PixelSet, RegionTrainer, SamplingComparison, TrainConfig, TrainError, TrainSchedule};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input {path}: {msg}", path = .0.display(), msg = .1)]
    MissingInput(PathBuf, String),
    #[error("training diverged in {}", .0.join(", "))]
    Diverged(Vec<String>),
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Other(_) => 1,
            PipelineError::MissingInput(..) => 3,
            PipelineError::Config(_) => 4,
            PipelineError::Diverged(_) => 5,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn other(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Other(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub output: PathBuf,
    pub poses: PathBuf,
    pub images: PathBuf,
    /// Analytic scene used by `synth` and for default scene bounds.
    #[serde(default)]
    pub scene: Option<PathBuf>,
    /// Reference point cloud for `eval`.
    #[serde(default)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub rig: RigPattern,
    pub count: usize,
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    #[serde(default = "default_reference_points")]
    pub reference_points: usize,
}

fn default_reference_points() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    /// Defaults to the scene file's bounds.
    #[serde(default)]
    pub bounds: Option<Aabb>,
}

fn default_overlap() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    /// Integer image down-scaling applied before tiling.
    pub downsample: u32,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self { downsample: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    /// Voxels per region grid along x, y, z.
    pub resolution: [usize; 3],
    pub sh_degree: ShDegree,
    pub init: GridInit,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { resolution: [32, 32, 16], sh_degree: ShDegree::One, init: GridInit::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub rays_per_batch: usize,
    /// Steps per region visit.
    pub iters_per_region: u64,
    /// Total steps over all regions; defaults to one visit per region.
    pub total_iters: Option<u64>,
    pub eval_every: u64,
    pub eval_pixels: usize,
    pub tv_weight: f64,
    /// Loss weight of the coarse pass relative to the fine pass.
    pub coarse_weight: f64,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { rays_per_batch: 5000, iters_per_region: 500, total_iters: None, eval_every: 100, eval_pixels: 4096, tv_weight: 1e-4, coarse_weight: 1.0, adam: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyEncoding {
    Ascii,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub tsdf_resolution: [usize; 3],
    /// Truncation distance in TSDF voxels.
    pub truncation_voxels: f64,
    pub behind: BehindPolicy,
    /// Cell size for point-cloud thinning; none keeps every point.
    pub cloud_voxel: Option<f64>,
    pub ply: PlyEncoding,
    /// Rendered pixels below this opacity get no depth.
    pub min_opacity: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { tsdf_resolution: [96, 96, 48], truncation_voxels: 3.0, behind: BehindPolicy::Skip, cloud_voxel: None, ply: PlyEncoding::Binary, min_opacity: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub compare_sampling: bool,
    /// Rays per arm in the sampling comparison.
    pub compare_budget: u64,
    pub compare_checkpoints: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: vec![0.005, 0.01, 0.02, 0.05, 0.1], compare_sampling: false, compare_budget: 500_000, compare_checkpoints: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub tiling: TilingConfig,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Parses and validates TOML. Relative paths are resolved against
    /// `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let p = &mut cfg.paths;
        for path in [&mut p.output, &mut p.poses, &mut p.images].into_iter().chain(p.scene.as_mut()).chain(p.reference.as_mut()) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::MissingInput(path.to_path_buf(), e.to_string()))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        let p = &self.partition;
        if p.rows == 0 || p.cols == 0 {
            return bad("partition.rows and partition.cols must be at least 1");
        }
        if !(p.overlap >= 1.0 && p.overlap.is_finite()) {
            return bad("partition.overlap must be >= 1");
        }
        if p.bounds.is_none() && self.paths.scene.is_none() {
            return bad("partition.bounds is required when paths.scene is not set");
        }
        if p.bounds.is_some_and(|b| !b.is_valid()) {
            return bad("partition.bounds is empty");
        }
        if self.tiling.downsample == 0 {
            return bad("tiling.downsample must be at least 1");
        }
        if self.field.resolution.iter().any(|&n| n < 2) || self.geometry.tsdf_resolution.iter().any(|&n| n < 2) {
            return bad("grid resolutions must be at least 2 along every axis");
        }
        let t = &self.train;
        if t.rays_per_batch == 0 || t.iters_per_region == 0 {
            return bad("train.rays_per_batch and train.iters_per_region must be positive");
        }
        if !(t.adam.lr >= 0.0 && (0.0..1.0).contains(&t.adam.beta1) && (0.0..1.0).contains(&t.adam.beta2) && t.adam.eps > 0.0) {
            return bad("train.adam parameters out of range");
        }
        if !(t.adam.decay > 0.0 && t.adam.decay <= 1.0 && t.adam.lr_min >= 0.0) {
            return bad("train.adam.decay must lie in (0, 1] and lr_min must be non-negative");
        }
        if t.tv_weight < 0.0 || !(t.coarse_weight >= 0.0) {
            return bad("train.tv_weight and train.coarse_weight must be non-negative");
        }
        if self.render.n_coarse < 2 {
            return bad("render.n_coarse must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.geometry.min_opacity) {
            return bad("geometry.min_opacity must lie in [0, 1]");
        }
        if !(self.geometry.truncation_voxels > 0.0) {
            return bad("geometry.truncation_voxels must be positive");
        }
        let th = &self.eval.thresholds;
        if th.is_empty() || th.windows(2).any(|w| !(w[1] > w[0])) || th[0] < 0.0 {
            return bad("eval.thresholds must be non-empty, non-negative and ascending");
        }
        if let Some(s) = &self.synth {
            if s.count == 0 || s.width == 0 || s.height == 0 || !(s.hfov_deg > 0.0 && s.hfov_deg < 180.0) {
                return bad("synth rig parameters out of range");
            }
        }
        Ok(())
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.paths.output.join(rel)
    }

    fn scene(&self) -> Result<AnalyticScene> {
        let path = self.paths.scene.as_ref().ok_or_else(|| PipelineError::Config("paths.scene is not set".into()))?;
        let text = read_text(path)?;
        AnalyticScene::from_json(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    fn scene_bounds(&self) -> Result<Aabb> {
        match self.partition.bounds {
            Some(b) => Ok(b),
            None => Ok(self.scene()?.bounds),
        }
    }
}

/// Options shared by all commands.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    /// Restrict training (and the sampling comparison) to one region.
    pub region: Option<(usize, usize)>,
    /// Zero wall-clock columns so outputs are byte-reproducible.
    pub deterministic: bool,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| PipelineError::MissingInput(path.to_path_buf(), e.to_string()))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| PipelineError::MissingInput(path.to_path_buf(), e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| other(format!("{}: {e}", dir.display())))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| other(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    create(path)?.write_all(text.as_bytes()).map_err(other)
}

fn load_png(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(path.to_path_buf(), "not found".into()));
    }
    image::open(path).map(|i| i.to_rgb8()).map_err(|e| other(format!("{}: {e}", path.display())))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(other)?;
    }
    img.save(path).map_err(|e| other(format!("{}: {e}", path.display())))
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

/// Renders the synthetic scene from the configured rig: pose file, images
/// and (when `paths.reference` is set) a reference point cloud.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<usize> {
    let s = cfg.synth.as_ref().ok_or_else(|| PipelineError::Config("no [synth] section".into()))?;
    let scene = cfg.scene()?;
    let spec = RigSpec { pattern: s.rig, count: s.count, width: s.width, height: s.height, hfov_deg: s.hfov_deg };
    let views = build_camera_rig(&scene, &spec).map_err(other)?;
    for v in &views {
        let (img, _) = render_ground_truth(&scene, v);
        save_png(&img, &cfg.paths.images.join(format!("{}.png", v.view_id)))?;
    }
    write_poses(&views, &mut create(&cfg.paths.poses)?).map_err(other)?;
    if let Some(r) = &cfg.paths.reference {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cloud = sample_ground_truth_cloud(&scene, s.reference_points, &mut rng);
        write_ply_points(&cloud, PlyFormat::BinaryLittleEndian, &mut create(r)?).map_err(other)?;
    }
    Ok(views.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionsManifest {
    pub rows: usize,
    pub cols: usize,
    pub overlap: f64,
    pub bounds: Aabb,
    pub regions: Vec<SubRegion>,
}

pub fn cmd_partition(cfg: &PipelineConfig) -> Result<RegionsManifest> {
    let bounds = cfg.scene_bounds()?;
    let sb = SceneBounds::new(bounds.min, bounds.max).map_err(|e| PipelineError::Config(e.to_string()))?;
    let p = &cfg.partition;
    let regions = partition_scene(&sb, (p.rows, p.cols), p.overlap).map_err(|e| PipelineError::Config(e.to_string()))?;
    let m = RegionsManifest { rows: p.rows, cols: p.cols, overlap: p.overlap, bounds, regions };
    write_text(&cfg.out("partition/regions.json"), &serde_json::to_string_pretty(&m).map_err(other)?)?;
    Ok(m)
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| other(format!("{}: {e}", path.display())))
}

/// Camera of `view` after shrinking its image by an integer factor.
pub fn scale_view(view: &CameraView, factor: u32) -> CameraView {
    if factor == 1 {
        return view.clone();
    }
    let k = &view.intrinsics;
    let (w, h) = ((k.width / factor).max(1), (k.height / factor).max(1));
    let (sx, sy) = (w as f64 / k.width as f64, h as f64 / k.height as f64);
    let intrinsics = Intrinsics { fx: k.fx * sx, fy: k.fy * sy, cx: k.cx * sx, cy: k.cy * sy, width: w, height: h };
    CameraView { intrinsics, ..view.clone() }
}

/// Loads each view's image from disk, resized to the view's size.
struct ScaledStore;

impl ImageStore for ScaledStore {
    fn load(&self, view: &CameraView) -> std::result::Result<RgbImage, String> {
        let img = image::open(&view.image_path).map_err(|e| format!("{}: {e}", view.image_path.display()))?.to_rgb8();
        let (w, h) = (view.intrinsics.width, view.intrinsics.height);
        if img.dimensions() == (w, h) {
            Ok(img)
        } else {
            Ok(image::imageops::resize(&img, w, h, image::imageops::FilterType::Triangle))
        }
    }
}

fn load_source_views(cfg: &PipelineConfig) -> Result<Vec<CameraView>> {
    let views = read_poses(open(&cfg.paths.poses)?, &cfg.paths.images).map_err(|e| PipelineError::Config(format!("{}: {e}", cfg.paths.poses.display())))?;
    Ok(views.iter().map(|v| scale_view(v, cfg.tiling.downsample)).collect())
}

/// Views written by `tile` (already down-scaled).
fn load_tiled_sources(cfg: &PipelineConfig) -> Result<Vec<CameraView>> {
    read_poses(open(&cfg.out("tiles/views.txt"))?, &cfg.paths.images).map_err(other)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub view_id: String,
    /// Relative to the tiles directory.
    pub file: String,
    pub spec: TileSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTiles {
    pub region: SubRegion,
    pub tiles: Vec<TileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub downsample: u32,
    pub regions: Vec<RegionTiles>,
    /// `(view_id, reason)` for tiles that could not be cut.
    pub failures: Vec<(String, String)>,
}

pub fn cmd_tile(cfg: &PipelineConfig) -> Result<TileManifest> {
    let regions: RegionsManifest = load_json(&cfg.out("partition/regions.json"))?;
    let views = load_source_views(cfg)?;
    let tiles_dir = cfg.out("tiles");
    if tiles_dir.exists() {
        fs::remove_dir_all(&tiles_dir).map_err(other)?;
    }
    write_poses(&views, &mut create(&tiles_dir.join("views.txt"))?).map_err(other)?;
    let mut manifest = TileManifest { downsample: cfg.tiling.downsample, regions: Vec::new(), failures: Vec::new() };
    let mut specs_per_region = Vec::new();
    for region in &regions.regions {
        let specs = index_views(region, &views);
        let set = extract_tiles(&specs, &views, &ScaledStore);
        let mut entries = Vec::new();
        for t in &set.tiles {
            let file = format!("{}/{}.png", region.name(), t.view.view_id);
            save_png(&t.image, &tiles_dir.join(&file))?;
            entries.push(TileEntry { view_id: t.view.view_id.clone(), file, spec: t.spec.clone() });
        }
        manifest.failures.extend(set.failures);
        specs_per_region.push((*region, entries.iter().map(|e| e.spec.clone()).collect::<Vec<_>>()));
        manifest.regions.push(RegionTiles { region: *region, tiles: entries });
    }
    let (per, total) = estimate_region_memory(&views, &specs_per_region);
    let mut csv = String::from("region,tiles,bytes_full_frames,bytes_tiles,reduction_factor\n");
    for (r, (_, specs)) in per.iter().zip(&specs_per_region) {
        let e = &r.estimate;
        writeln!(csv, "r{}_{},{},{},{},{}", r.region.0, r.region.1, specs.len(), e.bytes_full_frames, e.bytes_tiles, fmt_f64(e.reduction_factor)).unwrap();
    }
    writeln!(csv, "total,{},{},{},{}", specs_per_region.iter().map(|s| s.1.len()).sum::<usize>(), total.bytes_full_frames, total.bytes_tiles, fmt_f64(total.reduction_factor)).unwrap();
    write_text(&tiles_dir.join("memory.csv"), &csv)?;
    write_text(&tiles_dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest).map_err(other)?)?;
    Ok(manifest)
}

/// Pixels of one region's tiles.
fn region_pixels(cfg: &PipelineConfig, rt: &RegionTiles, sources: &[CameraView]) -> Result<PixelSet> {
    let by_id: BTreeMap<&str, &CameraView> = sources.iter().map(|v| (v.view_id.as_str(), v)).collect();
    let mut pairs = Vec::new();
    for e in &rt.tiles {
        let src = by_id.get(e.spec.source_view_id.as_str()).ok_or_else(|| other(format!("tile {} has no source view", e.view_id)))?;
        let view = e.spec.tiled_view(src, e.view_id.clone());
        let img = load_png(&cfg.out("tiles").join(&e.file))?;
        pairs.push((view, img));
    }
    Ok(PixelSet::from_images(pairs.iter().map(|(v, i)| (v, i))))
}

fn region_grid(cfg: &PipelineConfig, region: &SubRegion) -> Result<RadianceGrid> {
    RadianceGrid::new(cfg.field.resolution, region.expanded, cfg.field.sh_degree, cfg.field.init).map_err(other)
}

fn region_seed(seed: u64, index: (usize, usize)) -> u64 {
    seed.wrapping_add(((index.0 as u64) << 32 | index.1 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn train_config(cfg: &PipelineConfig, opts: &RunOptions) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        loss: LossConfig { render: cfg.render, tv_weight: t.tv_weight, coarse_weight: t.coarse_weight },
        adam: t.adam,
        rays_per_batch: t.rays_per_batch,
        eval_every: t.eval_every,
        eval_pixels: t.eval_pixels,
        deterministic: opts.deterministic,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStatus {
    pub region: String,
    pub iters: u64,
    pub outcome: String,
}

/// Trains every region (or the one selected) round-robin, then writes
/// checkpoints, traces and a status file. Regions that diverge or have no
/// tiles are reported; the others still get checkpoints.
pub fn cmd_train(cfg: &PipelineConfig, opts: &RunOptions) -> Result<Vec<RegionStatus>> {
    let manifest: TileManifest = load_json(&cfg.out("tiles/manifest.json"))?;
    let sources = load_tiled_sources(cfg)?;
    let tcfg = train_config(cfg, opts);
    let mut trainers = Vec::new();
    let mut status = Vec::new();
    for rt in manifest.regions.iter().filter(|rt| opts.region.is_none_or(|r| r == rt.region.index)) {
        let pixels = region_pixels(cfg, rt, &sources)?;
        let grid = region_grid(cfg, &rt.region)?;
        match RegionTrainer::new(rt.region, grid, pixels, tcfg, region_seed(cfg.seed, rt.region.index)) {
            Ok(t) => trainers.push(t),
            Err(e) => status.push(RegionStatus { region: rt.region.name(), iters: 0, outcome: e.to_string() }),
        }
    }
    if opts.region.is_some() && trainers.is_empty() && status.is_empty() {
        return Err(PipelineError::Config(format!("region {:?} does not exist", opts.region.unwrap())));
    }
    let schedule = TrainSchedule {
        region_order: (0..trainers.len()).collect(),
        iters_per_region: cfg.train.iters_per_region,
        total_iters: cfg.train.total_iters.unwrap_or(cfg.train.iters_per_region * trainers.len() as u64),
    };
    let outcomes = run_schedule(&mut trainers, &schedule);
    let mut diverged = Vec::new();
    for (t, outcome) in trainers.iter().zip(&outcomes) {
        let name = t.region.name();
        let mut trace = create(&cfg.out(&format!("traces/{name}.csv")))?;
        write_trace_csv(&t.trace, &mut trace).map_err(other)?;
        match outcome {
            None => {
                let mut w = create(&cfg.out(&format!("checkpoints/{name}.grid")))?;
                t.grid.write_checkpoint(&mut w).map_err(other)?;
                status.push(RegionStatus { region: name, iters: t.iter, outcome: "ok".into() });
            }
            Some(e) => {
                if matches!(e, TrainError::Diverged { .. }) {
                    diverged.push(name.clone());
                }
                status.push(RegionStatus { region: name, iters: t.iter, outcome: e.to_string() });
            }
        }
    }
    status.sort_by(|a, b| a.region.cmp(&b.region));
    write_text(&cfg.out("train/status.json"), &serde_json::to_string_pretty(&status).map_err(other)?)?;
    if !diverged.is_empty() {
        return Err(PipelineError::Diverged(diverged));
    }
    Ok(status)
}

/// Trained grids with their nominal ground-plan cells as owners.
fn load_fields(cfg: &PipelineConfig) -> Result<Vec<(SubRegion, RadianceGrid)>> {
    let regions: RegionsManifest = load_json(&cfg.out("partition/regions.json"))?;
    let mut out = Vec::new();
    for r in regions.regions {
        let path = cfg.out(&format!("checkpoints/{}.grid", r.name()));
        if !path.exists() {
            continue;
        }
        let grid = RadianceGrid::read_checkpoint(&mut std::io::BufReader::new(open(&path)?)).map_err(|e| other(format!("{}: {e}", path.display())))?;
        out.push((r, grid));
    }
    if out.is_empty() {
        return Err(PipelineError::MissingInput(cfg.out("checkpoints"), "no trained regions".into()));
    }
    Ok(out)
}

fn field_set(fields: &[(SubRegion, RadianceGrid)]) -> FieldSet<'_> {
    FieldSet::regions(fields.iter().map(|(r, g)| (g, r.nominal.ground_rect())))
}

/// Renders every source view: color, depth and PSNR against the input.
pub fn cmd_render(cfg: &PipelineConfig) -> Result<Vec<(String, f64)>> {
    let fields = load_fields(cfg)?;
    let set = field_set(&fields);
    let views = load_tiled_sources(cfg)?;
    let mut rows = Vec::new();
    let mut csv = String::from("view_id,psnr\n");
    for v in &views {
        let (depth, img) = render_depth_and_color(v, &set, &cfg.render, cfg.geometry.min_opacity);
        save_png(&img, &cfg.out(&format!("renders/{}.png", v.view_id)))?;
        write_depth(&depth, &mut create(&cfg.out(&format!("depth/{}.depth", v.view_id)))?).map_err(other)?;
        let reference = ScaledStore.load(v).map_err(|e| PipelineError::MissingInput(v.image_path.clone(), e))?;
        let psnr = psnr_rgb8(&img, &reference).map_err(other)?;
        writeln!(csv, "{},{}", v.view_id, fmt_f64(psnr)).unwrap();
        rows.push((v.view_id.clone(), psnr));
    }
    write_text(&cfg.out("renders/psnr.csv"), &csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractSummary {
    pub points: usize,
    pub vertices: usize,
    pub triangles: usize,
}

/// Fuses rendered depth maps into a point cloud and a TSDF mesh.
pub fn cmd_extract(cfg: &PipelineConfig) -> Result<ExtractSummary> {
    let views = load_tiled_sources(cfg)?;
    let bounds = load_json::<RegionsManifest>(&cfg.out("partition/regions.json"))?.bounds;
    let mut maps: Vec<DepthMap> = Vec::new();
    let mut images = Vec::new();
    for v in &views {
        maps.push(read_depth(&mut std::io::BufReader::new(open(&cfg.out(&format!("depth/{}.depth", v.view_id)))?)).map_err(other)?);
        images.push(load_png(&cfg.out(&format!("renders/{}.png", v.view_id)))?);
    }
    let mut cloud = fuse_point_cloud(&maps, &views, Some(&images)).map_err(other)?;
    if let Some(cell) = cfg.geometry.cloud_voxel {
        cloud = cloud.voxel_downsample(cell);
    }
    let g = &cfg.geometry;
    let voxel = {
        let e = bounds.extent();
        (0..3).map(|k| e[k] / g.tsdf_resolution[k] as f64).fold(f64::INFINITY, f64::min)
    };
    let mut tsdf = TsdfVolume::new(g.tsdf_resolution, bounds, g.truncation_voxels * voxel).map_err(other)?;
    for (m, v) in maps.iter().zip(&views) {
        tsdf.integrate(m, v, g.behind).map_err(other)?;
    }
    let mesh = marching_cubes(&tsdf, 0.0);
    let fmt = match g.ply {
        PlyEncoding::Ascii => PlyFormat::Ascii,
        PlyEncoding::Binary => PlyFormat::BinaryLittleEndian,
    };
    write_ply_points(&cloud, fmt, &mut create(&cfg.out("geometry/cloud.ply"))?).map_err(other)?;
    write_ply_mesh(&mesh, fmt, &mut create(&cfg.out("geometry/mesh.ply"))?).map_err(other)?;
    write_triangle_list(&mesh, &mut create(&cfg.out("geometry/mesh.txt"))?).map_err(other)?;
    Ok(ExtractSummary { points: cloud.len(), vertices: mesh.vertices.len(), triangles: mesh.triangles.len() })
}

/// Cloud-to-cloud statistics and threshold curves against the reference
/// cloud, plus the sampling comparison when enabled.
pub fn cmd_eval(cfg: &PipelineConfig, opts: &RunOptions) -> Result<()> {
    let reference_path = cfg.paths.reference.as_ref().ok_or_else(|| PipelineError::Config("paths.reference is not set".into()))?;
    let reference = read_ply(open(reference_path)?).map_err(other)?.cloud;
    let test = read_ply(open(&cfg.out("geometry/cloud.ply"))?).map_err(other)?.cloud;
    let c2c = cloud_to_cloud(&test.points, &reference.points).map_err(other)?;
    write_text(&cfg.out("eval/c2c.txt"), &c2c.summary())?;
    let curves = threshold_curves(&test.points, &reference.points, &cfg.eval.thresholds).map_err(other)?;
    curves.write_csv(&mut create(&cfg.out("eval/curves.csv"))?).map_err(other)?;
    if cfg.eval.compare_sampling {
        for (name, cmp) in cmd_compare(cfg, opts)? {
            cmp.write_csv(&mut create(&cfg.out(&format!("eval/sampling_{name}.csv")))?).map_err(other)?;
        }
    }
    Ok(())
}

/// Location-specific against whole-frame sampling for each region (or the
/// one selected), from fresh grids and equal ray budgets. Needs the tiles.
pub fn cmd_compare(cfg: &PipelineConfig, opts: &RunOptions) -> Result<Vec<(String, SamplingComparison)>> {
    let manifest: TileManifest = load_json(&cfg.out("tiles/manifest.json"))?;
    let sources = load_tiled_sources(cfg)?;
    let mut frames = Vec::new();
    for v in &sources {
        frames.push(ScaledStore.load(v).map_err(|e| PipelineError::MissingInput(v.image_path.clone(), e))?);
    }
    let whole = PixelSet::from_images(sources.iter().zip(&frames));
    let tcfg = TrainConfig { eval_every: 0, ..train_config(cfg, opts) };
    let mut out = Vec::new();
    for rt in manifest.regions.iter().filter(|rt| opts.region.is_none_or(|r| r == rt.region.index)) {
        let local = region_pixels(cfg, rt, &sources)?;
        if local.is_empty() {
            continue;
        }
        let aoi = local.aoi(&rt.region.nominal);
        let grid = region_grid(cfg, &rt.region)?;
        let seed = region_seed(cfg.seed, rt.region.index);
        let cmp = compare_sampling(rt.region, &grid, &local, &whole, &aoi, cfg.eval.compare_budget, cfg.eval.compare_checkpoints, tcfg, seed)
            .map_err(|e| match e {
                TrainError::Diverged { .. } => PipelineError::Diverged(vec![rt.region.name()]),
                e => other(e),
            })?;
        out.push((rt.region.name(), cmp));
    }
    Ok(out)
}

fn last_trace_row(path: &Path) -> Result<Option<Vec<String>>> {
    let text = read_text(path)?;
    Ok(text.lines().skip(1).last().map(|l| l.split(',').map(str::to_string).collect()))
}

/// Collects memory, convergence and metric outputs into `report/`.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<String> {
    let mut summary = String::new();
    let memory = read_text(&cfg.out("tiles/memory.csv"))?;
    write_text(&cfg.out("report/memory.csv"), &memory)?;
    if let Some(total) = memory.lines().find(|l| l.starts_with("total,")) {
        let f: Vec<&str> = total.split(',').collect();
        writeln!(summary, "tiles: {}\nfull-frame bytes: {}\ntile bytes: {}\nreduction factor: {}", f[1], f[2], f[3], f[4]).unwrap();
    }
    let regions: RegionsManifest = load_json(&cfg.out("partition/regions.json"))?;
    let mut conv = String::from("region,iter,loss,aoi_psnr\n");
    for r in &regions.regions {
        let path = cfg.out(&format!("traces/{}.csv", r.name()));
        if !path.exists() {
            continue;
        }
        if let Some(row) = last_trace_row(&path)? {
            writeln!(conv, "{},{},{},{}", r.name(), row[0], row[2], row[3]).unwrap();
            writeln!(summary, "{}: {} iterations, AOI PSNR {} dB", r.name(), row[0], row[3]).unwrap();
        }
    }
    write_text(&cfg.out("report/convergence.csv"), &conv)?;
    let psnr_path = cfg.out("renders/psnr.csv");
    if psnr_path.exists() {
        let vals: Vec<f64> = read_text(&psnr_path)?.lines().skip(1).filter_map(|l| l.split(',').nth(1)?.parse().ok()).collect();
        if !vals.is_empty() {
            writeln!(summary, "mean view PSNR: {} dB over {} views", fmt_f64(vals.iter().sum::<f64>() / vals.len() as f64), vals.len()).unwrap();
        }
    }
    let c2c_path = cfg.out("eval/c2c.txt");
    if c2c_path.exists() {
        summary.push_str(&read_text(&c2c_path)?);
    }
    let curves_path = cfg.out("eval/curves.csv");
    if curves_path.exists() {
        write_text(&cfg.out("report/curves.csv"), &read_text(&curves_path)?)?;
    }
    write_text(&cfg.out("report/summary.txt"), &summary)?;
    Ok(summary)
}

/// partition, tile, train, render, extract, eval (when a reference cloud is
/// configured) and report; `synth` first when configured.
pub fn run_all(cfg: &PipelineConfig, opts: &RunOptions) -> Result<String> {
    if cfg.synth.is_some() {
        cmd_synth(cfg)?;
    }
    cmd_partition(cfg)?;
    cmd_tile(cfg)?;
    cmd_train(cfg, opts)?;
    cmd_render(cfg)?;
    cmd_extract(cfg)?;
    if cfg.paths.reference.is_some() {
        cmd_eval(cfg, opts)?;
    }
    cmd_report(cfg)
}
