use mctnerf::camera::{CameraView, Intrinsics, Pose};
use mctnerf::geom::Vec3;
use mctnerf::partition::{partition_scene, SceneBounds, TileSpec};
use nalgebra::Vector2;
use proptest::prelude::*;

fn view(eye: [f64; 3], target: [f64; 3], f: f64, w: u32, h: u32) -> Option<CameraView> {
    let pose = Pose::look_at(Vec3::from(eye), Vec3::from(target), Vec3::z()).ok()?;
    let k = Intrinsics::new(f, f * 1.1, w as f64 / 2.0 + 3.0, h as f64 / 2.0 - 2.0, w, h).ok()?;
    Some(CameraView::new("v", k, pose))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nominal_cells_tile_the_plan(
        x0 in -10.0..10.0f64, y0 in -10.0..10.0f64, w in 0.5..20.0f64, h in 0.5..20.0f64,
        rows in 1usize..7, cols in 1usize..7, overlap in 1.0..3.0f64,
    ) {
        let b = SceneBounds::new([x0, y0, 0.0], [x0 + w, y0 + h, 1.0]).unwrap();
        let regions = partition_scene(&b, (rows, cols), overlap).unwrap();
        prop_assert_eq!(regions.len(), rows * cols);
        let total: f64 = regions.iter().map(|r| r.nominal.ground_rect().area()).sum();
        prop_assert!((total - w * h).abs() <= 1e-9 * w * h);
        for (i, a) in regions.iter().enumerate() {
            prop_assert!(a.expanded.contains_box(&a.nominal));
            prop_assert!(b.0.contains_box(&a.expanded));
            for c in &regions[i + 1..] {
                prop_assert!(a.nominal.ground_rect().intersection(&c.nominal.ground_rect()).area() <= 1e-9);
            }
        }
    }

    #[test]
    fn projection_inverts_ray_casting(
        eye in prop::array::uniform3(-5.0..5.0f64), u in 0.0..640.0f64, v in 0.0..480.0f64,
        t in 0.1..50.0f64, f in 100.0..2000.0f64,
    ) {
        prop_assume!(Vec3::from(eye).xy().norm() > 0.5);
        let cam = view(eye, [0.0, 0.0, 0.0], f, 640, 480).unwrap();
        let p = Vector2::new(u, v);
        let ray = cam.cast_ray(&p);
        let proj = cam.project(&ray.at(t));
        prop_assert!(proj.in_front());
        prop_assert!((proj.pixel - p).norm() <= 1e-7);
    }

    #[test]
    fn tiled_rays_match_offset_source_rays(
        ox in 0u32..500, oy in 0u32..300, cw in 1u32..140, ch in 1u32..180,
        fu in 0.0..1.0f64, fv in 0.0..1.0f64,
    ) {
        let src = view([3.0, -2.0, 4.0], [0.2, 0.1, 0.0], 700.0, 640, 480).unwrap();
        let spec = TileSpec::for_crop(&src, (ox, oy), (cw, ch));
        let tiled = spec.tiled_view(&src, "t");
        let p = Vector2::new(fu * cw as f64, fv * ch as f64);
        let a = tiled.cast_ray(&p);
        let b = src.cast_ray(&(p + Vector2::new(ox as f64, oy as f64)));
        prop_assert_eq!(a.origin, b.origin);
        prop_assert!((a.direction - b.direction).norm() <= 1e-9);
    }
}
