//! Volume rendering along rays.
//!
//! Samples `t_0 < t_1 < ... < t_N` split the ray into intervals
//! `[t_{i-1}, t_i]` of length `delta_i`, each carrying the field value at
//! `t_i`. The leading sample only opens the first interval and never
//! receives weight:
//!
//! ```text
//! T_i   = exp(-sum_{1<=j<i} delta_j sigma_j)
//! w_i   = T_i (1 - exp(-delta_i sigma_i))
//! color = sum_i w_i c_i
//! depth = sum_i w_i (t_i + t_{i-1}) / 2 / sum_i w_i
//! ```

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraView, Ray};
use crate::field::{FieldSample, RadianceGrid, MAX_COLOR_COEFFS};
use crate::geom::{Rect, Vec3};

/// Below this accumulated opacity a ray reports no depth.
pub const EPS_OPACITY: f64 = 1e-4;
/// Added to every coarse weight before inverse-CDF resampling.
pub const PDF_FLOOR: f64 = 1e-5;
/// Merged samples closer than this are collapsed.
pub const DEDUP_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("sample and field-sample counts differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid density {0} at sample {1}")]
    InvalidSigma(f64, usize),
    #[error("samples are not strictly ascending at index {0}")]
    NotAscending(usize),
    #[error("need at least {0} samples")]
    TooFewSamples(usize),
}

/// Strictly ascending distances along a ray.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    t: Vec<f64>,
}

impl SampleSet {
    pub fn new(t: Vec<f64>) -> Result<Self, RenderError> {
        if let Some(i) = (1..t.len()).find(|&i| !(t[i] > t[i - 1])) {
            return Err(RenderError::NotAscending(i));
        }
        Ok(Self { t })
    }

    /// Sorts, then drops samples within [`DEDUP_EPS`] of their predecessor.
    pub fn from_unsorted(mut t: Vec<f64>) -> Self {
        t.sort_by(f64::total_cmp);
        t.dedup_by(|b, a| *b - *a < DEDUP_EPS);
        Self { t }
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `delta_i = t_i - t_{i-1}` for `i >= 1`; zero for the leading sample.
    pub fn deltas(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.t.len()];
        for i in 1..self.t.len() {
            d[i] = self.t[i] - self.t[i - 1];
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    /// `T_i` at every sample.
    pub transmittances: Vec<f64>,
    /// Transmittance past the last sample.
    pub transmittance: f64,
    pub depth: Option<f64>,
    pub opacity: f64,
}

impl RenderResult {
    /// Result for a ray that touches no field.
    pub fn background(background: [f64; 3]) -> Self {
        Self { color: background, weights: Vec::new(), transmittances: Vec::new(), transmittance: 1.0, depth: None, opacity: 0.0 }
    }
}

/// Stratified samples over `[t_near, t_far]`: one per equal bin, jittered
/// when `rng` is given, at bin midpoints otherwise.
pub fn sample_coarse(ray: &Ray, n: usize, rng: Option<&mut dyn RngCore>) -> SampleSet {
    assert!(n >= 2, "sample_coarse needs n >= 2");
    let (a, b) = (ray.t_near, ray.t_far);
    let step = (b - a) / n as f64;
    let t = match rng {
        Some(rng) => (0..n).map(|i| a + (i as f64 + rng.gen::<f64>()) * step).collect(),
        None => (0..n).map(|i| a + (i as f64 + 0.5) * step).collect(),
    };
    SampleSet::from_unsorted(t)
}

/// Alpha compositing of per-sample density and color.
pub fn composite(samples: &SampleSet, field: &[FieldSample]) -> Result<RenderResult, RenderError> {
    let t = samples.t();
    if t.len() != field.len() {
        return Err(RenderError::LengthMismatch(t.len(), field.len()));
    }
    if let Some((i, s)) = field.iter().enumerate().find(|(_, s)| !(s.sigma >= 0.0)) {
        return Err(RenderError::InvalidSigma(s.sigma, i));
    }
    let n = t.len();
    let mut weights = vec![0.0; n];
    let mut trans = vec![1.0; n];
    let mut color = [0.0; 3];
    let mut optical = 0.0;
    let (mut wsum, mut wdepth) = (0.0, 0.0);
    let mut t_cur = 1.0;
    for i in 1..n {
        let delta = t[i] - t[i - 1];
        let tau = delta * field[i].sigma;
        trans[i] = t_cur;
        let t_next = (-(optical + tau)).exp();
        let w = t_cur - t_next;
        optical += tau;
        weights[i] = w;
        for ch in 0..3 {
            color[ch] += w * field[i].color[ch];
        }
        wsum += w;
        wdepth += w * 0.5 * (t[i] + t[i - 1]);
        t_cur = t_next;
    }
    let depth = if wsum >= EPS_OPACITY { Some((wdepth / wsum).clamp(t[0], t[n - 1])) } else { None };
    Ok(RenderResult { color, weights, transmittances: trans, transmittance: t_cur, depth, opacity: wsum })
}

/// Gradients of `loss` w.r.t. each sample's sigma and color given
/// `d loss / d color_out`, where `color_out = color + T_final * background`.
pub fn composite_backward(
    samples: &SampleSet,
    field: &[FieldSample],
    result: &RenderResult,
    d_color: [f64; 3],
    background: [f64; 3],
) -> Vec<(f64, [f64; 3])> {
    let t = samples.t();
    let n = t.len();
    let mut out = vec![(0.0, [0.0; 3]); n];
    // Suffix sums of w_i c_i over i > k, seeded with the background term.
    let mut suffix = [0, 1, 2].map(|ch| result.transmittance * background[ch]);
    for k in (1..n).rev() {
        let delta = t[k] - t[k - 1];
        let w = result.weights[k];
        let t_next = result.transmittances[k] - w;
        let mut ds = 0.0;
        for ch in 0..3 {
            ds += d_color[ch] * delta * (t_next * field[k].color[ch] - suffix[ch]);
        }
        out[k] = (ds, d_color.map(|g| g * w));
        for ch in 0..3 {
            suffix[ch] += w * field[k].color[ch];
        }
    }
    out
}

/// Inverse-CDF resampling from the piecewise-constant PDF given by the
/// weights of `coarse`, merged with the coarse samples.
pub fn resample_fine(coarse: &SampleSet, weights: &[f64], n_fine: usize, rng: Option<&mut dyn RngCore>) -> SampleSet {
    let t = coarse.t();
    if t.len() < 2 || n_fine == 0 {
        return coarse.clone();
    }
    let pdf: Vec<f64> = (1..t.len()).map(|i| weights[i].max(0.0) + PDF_FLOOR).collect();
    let total: f64 = pdf.iter().sum();
    let mut cdf = Vec::with_capacity(pdf.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p / total;
        cdf.push(acc);
    }
    let draw = |u: f64| {
        // Largest bin with cdf[bin] <= u.
        let bin = cdf.partition_point(|&c| c <= u).clamp(1, pdf.len()) - 1;
        let p = pdf[bin] / total;
        let f = ((u - cdf[bin]) / p).clamp(0.0, 1.0);
        t[bin] + f * (t[bin + 1] - t[bin])
    };
    let mut all = t.to_vec();
    match rng {
        Some(rng) => {
            for k in 0..n_fine {
                let u = (k as f64 + rng.gen::<f64>()) / n_fine as f64;
                all.push(draw(u));
            }
        }
        None => {
            for k in 0..n_fine {
                all.push(draw((k as f64 + 0.5) / n_fine as f64));
            }
        }
    }
    SampleSet::from_unsorted(all)
}

/// One grid plus the ground-plan cell it answers for when several grids
/// overlap.
#[derive(Debug, Clone, Copy)]
pub struct FieldRef<'a> {
    pub grid: &'a RadianceGrid,
    pub owner: Option<Rect>,
}

/// The fields active for a render. A point is answered by the first grid
/// whose owner cell contains it, else by the first grid whose bounds do.
#[derive(Debug, Clone, Default)]
pub struct FieldSet<'a> {
    pub members: Vec<FieldRef<'a>>,
}

impl<'a> FieldSet<'a> {
    pub fn single(grid: &'a RadianceGrid) -> Self {
        Self { members: vec![FieldRef { grid, owner: None }] }
    }

    pub fn regions(members: impl IntoIterator<Item = (&'a RadianceGrid, Rect)>) -> Self {
        Self { members: members.into_iter().map(|(grid, r)| FieldRef { grid, owner: Some(r) }).collect() }
    }

    pub fn route(&self, p: &Vec3) -> Option<usize> {
        let inside = |m: &FieldRef| m.grid.bounds().contains(p);
        self.members
            .iter()
            .position(|m| inside(m) && m.owner.map(|r| r.contains_xy(p.x, p.y)).unwrap_or(true))
            .or_else(|| self.members.iter().position(inside))
    }

    pub fn query(&self, p: &Vec3, dir: &Vec3) -> FieldSample {
        match self.route(p) {
            Some(m) => self.members[m].grid.query_unchecked(p, dir),
            None => FieldSample::default(),
        }
    }

    /// Parametric interval where the ray overlaps any member's bounds.
    pub fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut span: Option<(f64, f64)> = None;
        for m in &self.members {
            if let Some((a, b)) = m.grid.bounds().intersect_ray(&ray.origin, &ray.direction, ray.t_near, ray.t_far) {
                span = Some(match span {
                    Some((x, y)) => (x.min(a), y.max(b)),
                    None => (a, b),
                });
            }
        }
        span
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { n_coarse: 64, n_fine: 128, background: [0.0; 3] }
    }
}

/// Samples, field values and compositing result of one pass.
#[derive(Debug, Clone)]
pub struct Pass {
    pub samples: SampleSet,
    pub field: Vec<FieldSample>,
    pub result: RenderResult,
}

/// Both passes of one ray; `None` when the ray misses every field.
#[derive(Debug, Clone)]
pub struct RayTrace {
    pub ray: Ray,
    pub passes: Option<(Pass, Pass)>,
}

/// Evaluates the field at every sample except the leading one, which never
/// carries weight.
fn evaluate(fields: &FieldSet, ray: &Ray, samples: &SampleSet) -> Vec<FieldSample> {
    let mut out = Vec::with_capacity(samples.len());
    for (i, &t) in samples.t().iter().enumerate() {
        out.push(if i == 0 { FieldSample::default() } else { fields.query(&ray.at(t), &ray.direction) });
    }
    out
}

pub fn run_pass(fields: &FieldSet, ray: &Ray, samples: SampleSet) -> Pass {
    let field = evaluate(fields, ray, &samples);
    let result = composite(&samples, &field).expect("field densities are non-negative");
    Pass { samples, field, result }
}

/// Sample positions of a two-pass trace, reusable to re-evaluate the same
/// ray after the fields change.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub coarse: SampleSet,
    pub fine: SampleSet,
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Coarse then fine pass along `ray`, clipped to the fields' bounds.
pub fn trace_ray(fields: &FieldSet, ray: &Ray, cfg: &RenderConfig, mut rng: Option<&mut dyn RngCore>) -> RayTrace {
    let Some((t0, t1)) = fields.clip(ray) else {
        return RayTrace { ray: *ray, passes: None };
    };
    let clipped = Ray { t_near: t0, t_far: t1, ..*ray };
    let coarse = run_pass(fields, &clipped, sample_coarse(&clipped, cfg.n_coarse.max(2), reborrow(&mut rng)));
    let fine_samples = resample_fine(&coarse.samples, &coarse.result.weights, cfg.n_fine, reborrow(&mut rng));
    let fine = run_pass(fields, &clipped, fine_samples);
    RayTrace { ray: clipped, passes: Some((coarse, fine)) }
}

/// Re-traces a ray with fixed sample positions.
pub fn trace_planned(fields: &FieldSet, ray: &Ray, plan: &SamplePlan) -> RayTrace {
    let coarse = run_pass(fields, ray, plan.coarse.clone());
    let fine = run_pass(fields, ray, plan.fine.clone());
    RayTrace { ray: *ray, passes: Some((coarse, fine)) }
}

/// Final color of a pass including the background behind it.
pub fn with_background(result: &RenderResult, background: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|ch| result.color[ch] + result.transmittance * background[ch])
}

/// Renders one ray: the fine-pass result with background added.
pub fn render_ray(fields: &FieldSet, ray: &Ray, cfg: &RenderConfig, rng: Option<&mut dyn RngCore>) -> RenderResult {
    let trace = trace_ray(fields, ray, cfg, rng);
    match trace.passes {
        None => RenderResult::background(cfg.background),
        Some((_, fine)) => {
            let mut r = fine.result;
            r.color = with_background(&r, cfg.background);
            r
        }
    }
}

/// Renders the center of integer pixel `(u, v)`.
pub fn render_pixel(view: &CameraView, u: u32, v: u32, fields: &FieldSet, cfg: &RenderConfig) -> RenderResult {
    render_ray(fields, &view.cast_pixel_ray(u, v), cfg, None)
}

/// Deterministic full-frame render, row-major.
pub fn render_view(view: &CameraView, fields: &FieldSet, cfg: &RenderConfig) -> Vec<RenderResult> {
    use rayon::prelude::*;
    let (w, h) = (view.intrinsics.width, view.intrinsics.height);
    (0..w as usize * h as usize)
        .into_par_iter()
        .map(|i| render_pixel(view, (i % w as usize) as u32, (i / w as usize) as u32, fields, cfg))
        .collect()
}

/// Pushes the parameter gradient of one pass into `sink`, keyed by field
/// member index.
pub fn backprop_pass(
    fields: &FieldSet,
    ray: &Ray,
    pass: &Pass,
    d_color: [f64; 3],
    background: [f64; 3],
    sink: &mut impl FnMut(usize, usize, f64, &[f64; MAX_COLOR_COEFFS]),
) {
    let grads = composite_backward(&pass.samples, &pass.field, &pass.result, d_color, background);
    for (i, &t) in pass.samples.t().iter().enumerate().skip(1) {
        let (ds, dc) = grads[i];
        if ds == 0.0 && dc.iter().all(|&g| g == 0.0) {
            continue;
        }
        let p = ray.at(t);
        if let Some(m) = fields.route(&p) {
            fields.members[m].grid.query_grad(&p, &ray.direction, ds, dc, |v, dd, dcc| sink(m, v, dd, dcc));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GridInit, ShDegree};
    use crate::test_util::chi2_crit_99;
    use crate::geom::Aabb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray01() -> Ray {
        Ray { origin: Vec3::zeros(), direction: Vec3::z(), t_near: 0.0, t_far: 1.0 }
    }

    fn const_field(n: usize, sigma: f64, color: [f64; 3]) -> Vec<FieldSample> {
        vec![FieldSample { sigma, color }; n]
    }

    #[test]
    fn midpoint_stratification() {
        let s = sample_coarse(&ray01(), 2, None);
        assert_eq!(s.t(), &[0.25, 0.75]);
    }

    #[test]
    fn jittered_samples_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a: f64 = rng.gen_range(0.0..5.0);
            let ray = Ray { origin: Vec3::zeros(), direction: Vec3::x(), t_near: a, t_far: a + rng.gen_range(0.1..3.0) };
            let s = sample_coarse(&ray, 64, Some(&mut rng));
            assert!(s.t().windows(2).all(|w| w[1] > w[0]));
            assert!(s.t()[0] >= ray.t_near && *s.t().last().unwrap() <= ray.t_far);
        }
    }

    #[test]
    fn jitter_is_uniform_within_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n_draws = 100_000;
        let sub = 10;
        let mut hist = vec![0usize; sub];
        for _ in 0..n_draws {
            let s = sample_coarse(&ray01(), 4, Some(&mut rng));
            // Position of the first sample inside its bin [0, 0.25).
            let f = s.t()[0] / 0.25;
            hist[((f * sub as f64) as usize).min(sub - 1)] += 1;
        }
        let e = n_draws as f64 / sub as f64;
        let chi2: f64 = hist.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < chi2_crit_99((sub - 1) as f64), "chi2 {chi2}");
    }

    #[test]
    fn empty_space() {
        let s = sample_coarse(&ray01(), 16, None);
        let r = composite(&s, &const_field(16, 0.0, [0.3; 3])).unwrap();
        assert_eq!(r.color, [0.0; 3]);
        assert!(r.weights.iter().all(|&w| w == 0.0));
        assert_eq!(r.transmittance, 1.0);
        assert_eq!(r.depth, None);
    }

    #[test]
    fn opaque_sample() {
        let s = SampleSet::new(vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut f = const_field(5, 0.0, [0.0; 3]);
        f[2] = FieldSample { sigma: 50.0, color: [0.2, 0.4, 0.6] };
        let r = composite(&s, &f).unwrap();
        assert!((r.weights[2] - 1.0).abs() < 1e-12);
        for ch in 0..3 {
            assert!((r.color[ch] - f[2].color[ch]).abs() < 1e-12);
        }
        assert!((r.depth.unwrap() - 1.5).abs() < 1e-6);
    }

    #[test]
    fn constant_density_closed_form() {
        let l = 2.0;
        for sigma in [0.1, 1.0, 3.0, 10.0] {
            let n = 1024;
            let s = SampleSet::new((0..=n).map(|i| l * i as f64 / n as f64).collect()).unwrap();
            let r = composite(&s, &const_field(n + 1, sigma, [1.0; 3])).unwrap();
            let opacity = 1.0 - (-sigma * l).exp();
            assert!((r.opacity - opacity).abs() < 1e-6);
            // E[t] = int_0^L t sigma e^{-sigma t} dt / (1 - e^{-sigma L}).
            let et = (1.0 - (-sigma * l).exp() * (1.0 + sigma * l)) / sigma / opacity;
            assert!((r.depth.unwrap() - et).abs() < 1e-3 * l, "sigma {sigma}");
        }
    }

    #[test]
    fn weights_and_transmittance_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let n = rng.gen_range(2..100);
            let s = sample_coarse(&ray01(), n, Some(&mut rng));
            let f: Vec<_> = (0..s.len()).map(|_| FieldSample { sigma: rng.gen_range(0.0..200.0), color: [rng.gen(); 3] }).collect();
            let r = composite(&s, &f).unwrap();
            let sum: f64 = r.weights.iter().sum();
            assert!((sum + r.transmittance - 1.0).abs() < 1e-9);
            assert!(r.transmittances.windows(2).all(|w| w[1] <= w[0]));
            assert!(r.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            if let Some(d) = r.depth {
                assert!(d >= s.t()[0] && d <= *s.t().last().unwrap());
            }
        }
    }

    #[test]
    fn rejects_bad_sigma() {
        let s = SampleSet::new(vec![0.0, 1.0]).unwrap();
        let bad = [FieldSample::default(), FieldSample { sigma: f64::NAN, color: [0.0; 3] }];
        assert!(matches!(composite(&s, &bad), Err(RenderError::InvalidSigma(_, 1))));
        let neg = [FieldSample::default(), FieldSample { sigma: -1.0, color: [0.0; 3] }];
        assert!(composite(&s, &neg).is_err());
        assert!(composite(&s, &neg[..1]).is_err());
    }

    #[test]
    fn permuting_then_sorting_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_coarse(&ray01(), 32, Some(&mut rng));
        let f: Vec<_> = s.t().iter().map(|t| FieldSample { sigma: 5.0 * t, color: [*t, 1.0 - t, 0.5] }).collect();
        let base = composite(&s, &f).unwrap();
        let mut pairs: Vec<(f64, FieldSample)> = s.t().iter().copied().zip(f.iter().copied()).collect();
        use rand::seq::SliceRandom;
        pairs.shuffle(&mut rng);
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let s2 = SampleSet::new(pairs.iter().map(|p| p.0).collect()).unwrap();
        let f2: Vec<_> = pairs.iter().map(|p| p.1).collect();
        assert_eq!(composite(&s2, &f2).unwrap(), base);
    }

    #[test]
    fn refinement_converges_linearly() {
        // Smooth field: sigma(t) = 2 + sin(3t), color varying with t.
        let field_at = |t: f64| FieldSample { sigma: 2.0 + (3.0 * t).sin(), color: [t, 0.5 + 0.4 * (5.0 * t).cos(), 0.3] };
        let render = |n: usize| {
            let s = sample_coarse(&ray01(), n, None);
            let f: Vec<_> = s.t().iter().map(|&t| field_at(t)).collect();
            composite(&s, &f).unwrap().color
        };
        let diff = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max);
        let cs: Vec<_> = [32, 64, 128, 256, 512].iter().map(|&n| render(n)).collect();
        for k in 0..3 {
            let ratio = diff(cs[k + 2], cs[k + 1]) / diff(cs[k + 1], cs[k]);
            assert!(ratio <= 0.6, "ratio {ratio}");
        }
    }

    fn histogram(t: &[f64], bins: usize) -> Vec<usize> {
        let mut h = vec![0; bins];
        for &x in t {
            h[((x * bins as f64) as usize).min(bins - 1)] += 1;
        }
        h
    }

    #[test]
    fn flat_pdf_resamples_uniformly() {
        let coarse = SampleSet::new((0..=16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let w = vec![1.0 / 16.0; 17];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut all = Vec::new();
        for _ in 0..200 {
            let fine = resample_fine(&coarse, &w, 64, Some(&mut rng));
            all.extend(fine.t().iter().filter(|t| !coarse.t().contains(t)));
        }
        let h = histogram(&all, 16);
        let e = all.len() as f64 / 16.0;
        let chi2: f64 = h.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < chi2_crit_99(15.0), "chi2 {chi2}");
    }

    #[test]
    fn delta_pdf_concentrates() {
        let coarse = SampleSet::new((0..=64).map(|i| i as f64 / 64.0).collect()).unwrap();
        let mut w = vec![0.0; 65];
        w[20] = 1.0;
        let fine = resample_fine(&coarse, &w, 128, None);
        let (lo, hi) = (coarse.t()[19], coarse.t()[20]);
        let new: Vec<_> = fine.t().iter().filter(|t| !coarse.t().contains(t)).collect();
        assert_eq!(new.len(), 128);
        assert!(new.iter().all(|&&t| t >= lo && t <= hi));
    }

    #[test]
    fn resampled_histogram_follows_weights() {
        let bins = 8;
        let coarse = SampleSet::new((0..=bins).map(|i| i as f64 / bins as f64).collect()).unwrap();
        let mut w = vec![0.0];
        w.extend([0.05, 0.1, 0.3, 0.2, 0.05, 0.15, 0.1, 0.05]);
        let total: f64 = w.iter().map(|x| x + PDF_FLOOR).sum::<f64>() - PDF_FLOOR;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut all = Vec::new();
        for _ in 0..500 {
            let fine = resample_fine(&coarse, &w, 32, Some(&mut rng));
            all.extend(fine.t().iter().copied().filter(|t| !coarse.t().contains(t)));
        }
        let h = histogram(&all, bins);
        let n = all.len() as f64;
        for b in 0..bins {
            let p = (w[b + 1] + PDF_FLOOR) / total;
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((h[b] as f64 - n * p).abs() <= 3.0 * sd, "bin {b}: {} vs {}", h[b], n * p);
        }
    }

    fn box_grid(density_pre: f64) -> RadianceGrid {
        RadianceGrid::new([4, 4, 4], Aabb::new([-1.0; 3], [1.0; 3]), ShDegree::One, GridInit { density_pre, color: [0.2, 0.5, 0.7] }).unwrap()
    }

    #[test]
    fn miss_returns_background() {
        let g = box_grid(2.0);
        let fields = FieldSet::single(&g);
        let cfg = RenderConfig { background: [0.1, 0.2, 0.3], ..Default::default() };
        let ray = Ray { origin: Vec3::new(5.0, 5.0, 5.0), direction: Vec3::x(), t_near: 0.0, t_far: f64::INFINITY };
        let r = render_ray(&fields, &ray, &cfg, None);
        assert_eq!(r.color, [0.1, 0.2, 0.3]);
        assert_eq!(r.opacity, 0.0);
    }

    #[test]
    fn dense_box_renders_its_color() {
        let g = box_grid(8.0);
        let fields = FieldSet::single(&g);
        let ray = Ray { origin: Vec3::new(0.0, 0.0, -3.0), direction: Vec3::z(), t_near: 0.0, t_far: f64::INFINITY };
        let r = render_ray(&fields, &ray, &RenderConfig::default(), None);
        assert!(r.opacity > 0.999);
        assert!((r.color[1] - 0.5).abs() < 1e-3);
        let d = r.depth.unwrap();
        assert!(d > 2.0 && d < 2.1, "{d}");
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bg = [0.3, 0.1, 0.9];
        for _ in 0..50 {
            let s = sample_coarse(&ray01(), 12, Some(&mut rng));
            let mut f: Vec<_> = (0..s.len()).map(|_| FieldSample { sigma: rng.gen_range(0.0..8.0), color: [rng.gen(), rng.gen(), rng.gen()] }).collect();
            let up = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let obj = |f: &[FieldSample]| {
                let r = composite(&s, f).unwrap();
                let c = with_background(&r, bg);
                (0..3).map(|ch| up[ch] * c[ch]).sum::<f64>()
            };
            let r = composite(&s, &f).unwrap();
            let g = composite_backward(&s, &f, &r, up, bg);
            let k = rng.gen_range(1..s.len());
            let h = 1e-6;
            let orig = f[k].sigma;
            f[k].sigma = orig + h;
            let fp = obj(&f);
            f[k].sigma = orig - h;
            let fm = obj(&f);
            f[k].sigma = orig;
            let num = (fp - fm) / (2.0 * h);
            assert!((num - g[k].0).abs() < 1e-6, "{num} vs {}", g[k].0);
            let ch = rng.gen_range(0..3);
            let orig = f[k].color[ch];
            f[k].color[ch] = orig + h;
            let fp = obj(&f);
            f[k].color[ch] = orig - h;
            let fm = obj(&f);
            f[k].color[ch] = orig;
            assert!(((fp - fm) / (2.0 * h) - g[k].1[ch]).abs() < 1e-6);
        }
    }
}
