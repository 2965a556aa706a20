//! Analytic test scenes with exact ground truth: flat-shaded renders, exact
//! depth, surface point samples and camera rigs.
//!
//! Scenes are stored as JSON, e.g.
//!
//! ```json
//! {
//!   "bounds": {"min": [0, 0, 0], "max": [1, 1, 0.5]},
//!   "background": [0, 0, 0],
//!   "primitives": [
//!     {"type": "ground", "z": 0, "rect": {"x0": 0, "x1": 1, "y0": 0, "y1": 1},
//!      "albedo": {"checker": {"a": [0.2, 0.2, 0.2], "b": [0.8, 0.8, 0.8], "cell": 0.1}},
//!      "shadows": [{"rect": {"x0": 0.1, "x1": 0.3, "y0": 0.6, "y1": 0.9}}]},
//!     {"type": "sphere", "center": [0.3, 0.3, 0.1], "radius": 0.1,
//!      "albedo": {"uniform": [0.9, 0.3, 0.2]}}
//!   ]
//! }
//! ```
//!
//! Shadow factors default to 0.3.

use std::f64::consts::PI;

use image::RgbImage;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraView, Intrinsics, Pose, Ray};
use crate::geom::{Aabb, Rect, Vec3};
use crate::geometry::{DepthMap, PointCloud};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("primitive {primitive} is visible in only {views} views")]
    Coverage { primitive: usize, views: usize },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("camera rig needs at least one camera")]
    EmptyRig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Albedo {
    Uniform([f64; 3]),
    /// 3-d checkerboard of cubes with side `cell`.
    Checker { a: [f64; 3], b: [f64; 3], cell: f64 },
}

impl Albedo {
    pub fn at(&self, p: &Vec3) -> [f64; 3] {
        match *self {
            Albedo::Uniform(c) => c,
            Albedo::Checker { a, b, cell } => {
                // Nudged so faces lying exactly on a cell boundary get a
                // stable color.
                let parity: i64 = (0..3).map(|k| ((p[k] + 1e-9) / cell).floor() as i64).sum();
                if parity.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }

    fn colors(&self) -> Vec<[f64; 3]> {
        match *self {
            Albedo::Uniform(c) => vec![c],
            Albedo::Checker { a, b, .. } => vec![a, b],
        }
    }
}

fn default_shadow_factor() -> f64 {
    0.3
}

/// Ground-plan rectangle in which albedo is scaled by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shadow {
    pub rect: Rect,
    #[serde(default = "default_shadow_factor")]
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: Albedo,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        shadows: Vec<Shadow>,
    },
    Box {
        bounds: Aabb,
        albedo: Albedo,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        shadows: Vec<Shadow>,
    },
    /// Horizontal rectangle at height `z`.
    Ground {
        z: f64,
        rect: Rect,
        albedo: Albedo,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        shadows: Vec<Shadow>,
    },
}

impl Primitive {
    fn albedo(&self) -> &Albedo {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Box { albedo, .. } | Primitive::Ground { albedo, .. } => albedo,
        }
    }

    fn shadows(&self) -> &[Shadow] {
        match self {
            Primitive::Sphere { shadows, .. } | Primitive::Box { shadows, .. } | Primitive::Ground { shadows, .. } => shadows,
        }
    }

    pub fn bounding_box(&self) -> Aabb {
        match *self {
            Primitive::Sphere { center: c, radius: r, .. } => Aabb::new([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r]),
            Primitive::Box { bounds, .. } => bounds,
            Primitive::Ground { z, rect, .. } => rect.with_z(z, z),
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Box { bounds, .. } => {
                let e = bounds.extent();
                2.0 * (e.x * e.y + e.y * e.z + e.x * e.z)
            }
            Primitive::Ground { rect, .. } => rect.area(),
        }
    }

    /// Nearest intersection distance beyond [`HIT_EPS`].
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        let (o, d) = (&ray.origin, &ray.direction);
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = o - Vec3::from(center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let a = d.norm_squared();
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [(-b - s) / a, (-b + s) / a].into_iter().find(|&t| t > HIT_EPS)
            }
            Primitive::Box { bounds, .. } => {
                let (t0, t1) = bounds.intersect_ray(o, d, 0.0, f64::INFINITY)?;
                [t0, t1].into_iter().find(|&t| t > HIT_EPS)
            }
            Primitive::Ground { z, rect, .. } => {
                if d.z == 0.0 {
                    return None;
                }
                let t = (z - o.z) / d.z;
                let p = o + d * t;
                (t > HIT_EPS && rect.contains_xy(p.x, p.y)).then_some(t)
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius, .. } => ((p - Vec3::from(center)).norm() - radius).abs(),
            Primitive::Box { bounds, .. } => {
                let (lo, hi) = (bounds.min_v(), bounds.max_v());
                let outside = Vec3::from_fn(|k, _| (lo[k] - p[k]).max(p[k] - hi[k]).max(0.0));
                if outside.norm() > 0.0 {
                    outside.norm()
                } else {
                    (0..3).map(|k| (p[k] - lo[k]).min(hi[k] - p[k])).fold(f64::INFINITY, f64::min)
                }
            }
            Primitive::Ground { z, rect, .. } => {
                let dx = (rect.x0 - p.x).max(p.x - rect.x1).max(0.0);
                let dy = (rect.y0 - p.y).max(p.y - rect.y1).max(0.0);
                (dx * dx + dy * dy + (p.z - z).powi(2)).sqrt()
            }
        }
    }

    /// Surface color at a point on the primitive.
    pub fn shade(&self, p: &Vec3) -> [f64; 3] {
        let mut c = self.albedo().at(p);
        for s in self.shadows() {
            if s.rect.contains_xy(p.x, p.y) {
                c = c.map(|v| v * s.factor);
            }
        }
        c
    }

    /// Uniform point on the surface.
    fn sample_surface(&self, rng: &mut dyn RngCore) -> Vec3 {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let phi = rng.gen_range(0.0..2.0 * PI);
                let s = (1.0 - z * z).sqrt();
                Vec3::from(center) + Vec3::new(s * phi.cos(), s * phi.sin(), z) * radius
            }
            Primitive::Box { bounds, .. } => {
                let e = bounds.extent();
                let faces = [e.y * e.z, e.y * e.z, e.x * e.z, e.x * e.z, e.x * e.y, e.x * e.y];
                let face = pick(&faces, rng);
                let axis = face / 2;
                let mut p = Vec3::from_fn(|k, _| bounds.min[k] + rng.gen::<f64>() * e[k]);
                p[axis] = if face % 2 == 0 { bounds.min[axis] } else { bounds.max[axis] };
                p
            }
            Primitive::Ground { z, rect, .. } => Vec3::new(rng.gen_range(rect.x0..=rect.x1), rng.gen_range(rect.y0..=rect.y1), z),
        }
    }
}

/// Index drawn with probability proportional to `weights`.
fn pick(weights: &[f64], rng: &mut dyn RngCore) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub bounds: Aabb,
    #[serde(default)]
    pub background: [f64; 3],
    pub primitives: Vec<Primitive>,
}

/// Nearest primitive hit along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub primitive: usize,
    pub t: f64,
}

impl AnalyticScene {
    pub fn from_json(s: &str) -> Result<Self, SynthError> {
        let scene: Self = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidScene(m));
        if !self.bounds.is_valid() {
            return bad("scene bounds are empty".into());
        }
        let tol = Aabb::new(self.bounds.min.map(|v| v - 1e-9), self.bounds.max.map(|v| v + 1e-9));
        for (i, p) in self.primitives.iter().enumerate() {
            match *p {
                Primitive::Sphere { radius, .. } if !(radius > 0.0) => return bad(format!("primitive {i}: radius must be positive")),
                Primitive::Box { bounds, .. } if !bounds.is_valid() => return bad(format!("primitive {i}: empty box")),
                Primitive::Ground { rect, .. } if !(rect.x1 > rect.x0 && rect.y1 > rect.y0) => return bad(format!("primitive {i}: empty ground rectangle")),
                _ => {}
            }
            if !tol.contains_box(&p.bounding_box()) {
                return bad(format!("primitive {i} extends outside the scene bounds"));
            }
            if let Albedo::Checker { cell, .. } = p.albedo() {
                if !(*cell > 0.0) {
                    return bad(format!("primitive {i}: checker cell must be positive"));
                }
            }
            let colors = p.albedo().colors();
            if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(format!("primitive {i}: albedo outside [0, 1]"));
            }
            if p.shadows().iter().any(|s| !(0.0..=1.0).contains(&s.factor)) {
                return bad(format!("primitive {i}: shadow factor outside [0, 1]"));
            }
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background outside [0, 1]".into());
        }
        Ok(())
    }

    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(ray).map(|t| Hit { primitive: i, t }))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    /// Color and depth seen along a ray.
    pub fn trace(&self, ray: &Ray) -> ([f64; 3], Option<f64>) {
        match self.intersect(ray) {
            Some(h) => (self.primitives[h.primitive].shade(&ray.at(h.t)), Some(h.t)),
            None => (self.background, None),
        }
    }

    /// Ground-plane checkerboard on the unit square with a shadowed strip,
    /// a sphere, a box and a thin pillar.
    pub fn acceptance() -> Self {
        let grey = |v: f64| [v, v, v];
        Self {
            bounds: Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 0.5]),
            background: [0.6, 0.7, 0.9],
            primitives: vec![
                Primitive::Ground {
                    z: 0.0,
                    rect: Rect { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 },
                    albedo: Albedo::Checker { a: grey(0.25), b: grey(0.85), cell: 0.125 },
                    shadows: vec![Shadow { rect: Rect { x0: 0.05, x1: 0.4, y0: 0.6, y1: 0.9 }, factor: 0.3 }],
                },
                Primitive::Sphere {
                    center: [0.3, 0.3, 0.1],
                    radius: 0.1,
                    albedo: Albedo::Checker { a: [0.9, 0.35, 0.2], b: [0.5, 0.15, 0.1], cell: 0.05 },
                    shadows: vec![],
                },
                Primitive::Box {
                    bounds: Aabb::new([0.6, 0.2, 0.0], [0.85, 0.4, 0.15]),
                    albedo: Albedo::Checker { a: [0.2, 0.4, 0.9], b: [0.1, 0.2, 0.5], cell: 0.05 },
                    shadows: vec![],
                },
                Primitive::Box {
                    bounds: Aabb::new([0.685, 0.685, 0.0], [0.715, 0.715, 0.35]),
                    albedo: Albedo::Uniform([0.95, 0.9, 0.2]),
                    shadows: vec![],
                },
            ],
        }
    }

    /// A single checkered sphere floating in an empty cube.
    pub fn sphere(radius: f64) -> Self {
        Self {
            bounds: Aabb::new([-0.5; 3], [0.5; 3]),
            background: [0.6, 0.7, 0.9],
            primitives: vec![Primitive::Sphere {
                center: [0.0; 3],
                radius,
                albedo: Albedo::Checker { a: [0.9, 0.6, 0.2], b: [0.2, 0.4, 0.8], cell: 0.1 },
                shadows: vec![],
            }],
        }
    }
}

fn to_u8(c: [f64; 3]) -> image::Rgb<u8> {
    image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// Flat-shaded render and exact per-pixel ray distance.
pub fn render_ground_truth(scene: &AnalyticScene, view: &CameraView) -> (RgbImage, DepthMap) {
    let (w, h) = (view.intrinsics.width, view.intrinsics.height);
    let px: Vec<([f64; 3], Option<f64>)> = (0..w as usize * h as usize)
        .into_par_iter()
        .map(|i| scene.trace(&view.cast_pixel_ray((i % w as usize) as u32, (i / w as usize) as u32)))
        .collect();
    let img = RgbImage::from_fn(w, h, |u, v| to_u8(px[(v * w + u) as usize].0));
    let depth = DepthMap { view_id: view.view_id.clone(), width: w, height: h, depth: px.iter().map(|p| p.1).collect() };
    (img, depth)
}

/// `n` points on the primitive surfaces, area weighted.
pub fn sample_ground_truth_cloud(scene: &AnalyticScene, n: usize, rng: &mut dyn RngCore) -> PointCloud {
    sample_labeled(scene, n, rng).0
}

/// Samples plus the primitive index of each point.
fn sample_labeled(scene: &AnalyticScene, n: usize, rng: &mut dyn RngCore) -> (PointCloud, Vec<usize>) {
    if scene.primitives.is_empty() {
        return (PointCloud::default(), Vec::new());
    }
    let areas: Vec<f64> = scene.primitives.iter().map(Primitive::area).collect();
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let i = pick(&areas, rng);
        let p = &scene.primitives[i];
        let x = p.sample_surface(rng);
        colors.push(to_u8(p.shade(&x)).0);
        points.push(x);
        labels.push(i);
    }
    (PointCloud { points, colors: Some(colors) }, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RigPattern {
    /// Downward cameras at `height` over a near-square grid covering the
    /// scene's ground plan.
    NadirGrid { height: f64 },
    /// Cameras evenly spaced in azimuth on a horizontal circle around the
    /// scene center, looking at it.
    ObliqueRing { radius: f64, height: f64 },
    /// Cameras spread over a sphere around the scene center.
    Orbit { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    pub pattern: RigPattern,
    pub count: usize,
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
}

/// Minimum number of views in which every primitive must appear.
pub const MIN_VIEWS_PER_PRIMITIVE: usize = 3;

pub fn build_camera_rig(scene: &AnalyticScene, spec: &RigSpec) -> Result<Vec<CameraView>, SynthError> {
    if spec.count == 0 {
        return Err(SynthError::EmptyRig);
    }
    let k = Intrinsics::from_fov(spec.width, spec.height, spec.hfov_deg)?;
    let center = scene.bounds.center();
    let mut views = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let pose = match spec.pattern {
            RigPattern::NadirGrid { height } => {
                let cols = (spec.count as f64).sqrt().ceil() as usize;
                let rows = spec.count.div_ceil(cols);
                let (r, c) = (i / cols, i % cols);
                let g = scene.bounds.ground_rect();
                let eye = Vec3::new(
                    g.x0 + (c as f64 + 0.5) / cols as f64 * (g.x1 - g.x0),
                    g.y0 + (r as f64 + 0.5) / rows as f64 * (g.y1 - g.y0),
                    scene.bounds.max[2] + height,
                );
                Pose::look_at(eye, eye - Vec3::z(), Vec3::y())?
            }
            RigPattern::ObliqueRing { radius, height } => {
                let a = 2.0 * PI * i as f64 / spec.count as f64;
                let eye = center + Vec3::new(radius * a.cos(), radius * a.sin(), height);
                Pose::look_at(eye, center, Vec3::z())?
            }
            RigPattern::Orbit { radius } => {
                // Fibonacci lattice.
                let z = 1.0 - (2.0 * i as f64 + 1.0) / spec.count as f64;
                let phi = i as f64 * PI * (3.0 - 5f64.sqrt());
                let s = (1.0 - z * z).sqrt();
                let dir = Vec3::new(s * phi.cos(), s * phi.sin(), z);
                let up = if dir.z.abs() > 0.99 { Vec3::y() } else { Vec3::z() };
                Pose::look_at(center + dir * radius, center, up)?
            }
        };
        views.push(CameraView::new(format!("view_{i:03}"), k, pose));
    }
    for (pi, p) in scene.primitives.iter().enumerate() {
        let n = views.iter().filter(|v| sees(v, &p.bounding_box().center())).count();
        if n < MIN_VIEWS_PER_PRIMITIVE {
            return Err(SynthError::Coverage { primitive: pi, views: n });
        }
    }
    Ok(views)
}

fn sees(view: &CameraView, p: &Vec3) -> bool {
    let proj = view.project(p);
    proj.in_front() && view.intrinsics.contains(&proj.pixel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere_scene() -> AnalyticScene {
        AnalyticScene {
            bounds: Aabb::new([-1.0; 3], [1.0; 3]),
            background: [0.0; 3],
            primitives: vec![Primitive::Sphere { center: [0.0; 3], radius: 1.0, albedo: Albedo::Uniform([1.0; 3]), shadows: vec![] }],
        }
    }

    fn axis_view(w: u32, f: f64) -> CameraView {
        let k = Intrinsics::new(f, f, w as f64 / 2.0, w as f64 / 2.0, w, w).unwrap();
        CameraView::new("v", k, Pose::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y()).unwrap())
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = AnalyticScene { bounds: Aabb::new([0.0; 3], [1.0; 3]), background: [0.2, 0.4, 0.6], primitives: vec![] };
        let (img, depth) = render_ground_truth(&scene, &axis_view(8, 8.0));
        assert!(img.pixels().all(|p| p.0 == [51, 102, 153]));
        assert_eq!(depth.present(), 0);
    }

    #[test]
    fn on_axis_depth_is_exact() {
        let scene = unit_sphere_scene();
        let view = axis_view(2, 2.0);
        // The four pixels straddle the axis; the exact center ray is cast
        // directly.
        let ray = view.cast_ray(&nalgebra::Vector2::new(1.0, 1.0));
        assert_eq!(scene.intersect(&ray).unwrap().t, 2.0);
    }

    #[test]
    fn silhouette_area_matches_projected_disk() {
        let scene = unit_sphere_scene();
        let f = 300.0;
        let (_, depth) = render_ground_truth(&scene, &axis_view(512, f));
        let alpha = (1.0f64 / 3.0).asin();
        let expected = PI * (f * alpha.tan()).powi(2);
        let got = depth.present() as f64;
        assert!((got - expected).abs() < 0.01 * expected, "{got} vs {expected}");
    }

    #[test]
    fn depths_back_project_onto_surfaces() {
        let scene = AnalyticScene::acceptance();
        let rig = build_camera_rig(&scene, &RigSpec { pattern: RigPattern::ObliqueRing { radius: 1.0, height: 0.8 }, count: 4, width: 64, height: 48, hfov_deg: 60.0 }).unwrap();
        for view in &rig {
            let (_, depth) = render_ground_truth(&scene, view);
            assert!(depth.present() > 0);
            for v in 0..depth.height {
                for u in 0..depth.width {
                    if let Some(d) = depth.get(u, v) {
                        let p = view.cast_pixel_ray(u, v).at(d);
                        let dist = scene.primitives.iter().map(|pr| pr.surface_distance(&p)).fold(f64::INFINITY, f64::min);
                        assert!(dist < 1e-9, "{dist}");
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = AnalyticScene::acceptance();
        let view = &build_camera_rig(&scene, &RigSpec { pattern: RigPattern::NadirGrid { height: 1.0 }, count: 4, width: 40, height: 40, hfov_deg: 70.0 }).unwrap()[0];
        assert_eq!(render_ground_truth(&scene, view), render_ground_truth(&scene, view));
    }

    #[test]
    fn sphere_samples_lie_on_sphere() {
        let scene = AnalyticScene::sphere(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = sample_ground_truth_cloud(&scene, 2000, &mut rng);
        assert!(cloud.points.iter().all(|p| (p.norm() - 0.3).abs() < 1e-12));
        assert!(sample_ground_truth_cloud(&scene, 0, &mut rng).is_empty());
    }

    #[test]
    fn samples_split_by_area() {
        let scene = AnalyticScene::acceptance();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cloud, labels) = sample_labeled(&scene, n, &mut rng);
        let total: f64 = scene.primitives.iter().map(Primitive::area).sum();
        let mut counts = vec![0usize; scene.primitives.len()];
        for (p, &i) in cloud.points.iter().zip(&labels) {
            assert!(scene.primitives[i].surface_distance(p) < 1e-12);
            counts[i] += 1;
        }
        for (i, prim) in scene.primitives.iter().enumerate() {
            let p = prim.area() / total;
            let mean = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[i] as f64 - mean).abs() < 3.0 * sd, "primitive {i}: {} vs {mean}", counts[i]);
        }
    }

    #[test]
    fn ring_spacing_is_even() {
        let scene = AnalyticScene::acceptance();
        let rig = build_camera_rig(&scene, &RigSpec { pattern: RigPattern::ObliqueRing { radius: 1.2, height: 0.6 }, count: 8, width: 64, height: 64, hfov_deg: 60.0 }).unwrap();
        let c = scene.bounds.center();
        let az: Vec<f64> = rig.iter().map(|v| (v.pose.center().y - c.y).atan2(v.pose.center().x - c.x)).collect();
        for i in 0..8 {
            let d = (az[(i + 1) % 8] - az[i]).rem_euclid(2.0 * PI);
            assert!((d.to_degrees() - 45.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nadir_axes_point_down() {
        let scene = AnalyticScene::acceptance();
        let rig = build_camera_rig(&scene, &RigSpec { pattern: RigPattern::NadirGrid { height: 1.5 }, count: 9, width: 64, height: 64, hfov_deg: 60.0 }).unwrap();
        assert_eq!(rig.len(), 9);
        for v in &rig {
            assert!((v.pose.optical_axis() + Vec3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn coverage_is_checked() {
        let scene = AnalyticScene::acceptance();
        // Narrow cameras far away see only the middle of the scene.
        let spec = RigSpec { pattern: RigPattern::NadirGrid { height: 0.05 }, count: 4, width: 16, height: 16, hfov_deg: 5.0 };
        assert!(matches!(build_camera_rig(&scene, &spec), Err(SynthError::Coverage { .. })));
        // Visibility agrees with a direct corner projection.
        let rig = build_camera_rig(&scene, &RigSpec { pattern: RigPattern::Orbit { radius: 2.0 }, count: 12, width: 64, height: 64, hfov_deg: 50.0 }).unwrap();
        for v in &rig {
            let p = scene.bounds.center();
            let cam = v.pose.transform_point(&p);
            let u = v.intrinsics.fx * cam.x / cam.z + v.intrinsics.cx;
            let w = v.intrinsics.fy * cam.y / cam.z + v.intrinsics.cy;
            assert_eq!(sees(v, &p), cam.z > 0.0 && u >= 0.0 && w >= 0.0 && u < 64.0 && w < 64.0);
        }
    }

    #[test]
    fn scene_json_round_trip_and_validation() {
        let s = AnalyticScene::acceptance();
        assert_eq!(AnalyticScene::from_json(&s.to_json()).unwrap(), s);
        let mut bad = s.clone();
        bad.primitives.push(Primitive::Sphere { center: [2.0, 0.5, 0.1], radius: 0.1, albedo: Albedo::Uniform([0.5; 3]), shadows: vec![] });
        assert!(bad.validate().is_err());
        let mut bad = s.clone();
        bad.primitives[1] = Primitive::Sphere { center: [0.5; 3], radius: 0.1, albedo: Albedo::Uniform([1.5, 0.0, 0.0]), shadows: vec![] };
        assert!(bad.validate().is_err());
        assert!(AnalyticScene::from_json(r#"{"bounds": {"min": [0,0,0], "max": [1,1,1]}, "primitives": [], "extra": 1}"#).is_err());
        let shadow: Shadow = serde_json::from_str(r#"{"rect": {"x0": 0, "x1": 1, "y0": 0, "y1": 1}}"#).unwrap();
        assert_eq!(shadow.factor, 0.3);
    }

    #[test]
    fn shadow_scales_albedo() {
        let s = AnalyticScene::acceptance();
        let ground = &s.primitives[0];
        let lit = ground.shade(&Vec3::new(0.55, 0.55, 0.0));
        let p = Vec3::new(0.3, 0.7, 0.0);
        let shaded = ground.shade(&p);
        let raw = ground.albedo().at(&p);
        assert_eq!(shaded, raw.map(|v| v * 0.3));
        assert!(lit[0] >= 0.25);
    }
}
