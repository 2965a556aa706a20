//! Explicit voxel radiance field for one sub-region.
//!
//! Each voxel stores a density pre-activation and, per color channel, the
//! coefficients of a degree-0 or degree-1 real spherical-harmonic expansion.
//! Queries interpolate trilinearly between voxel centers, then
//! `sigma = density_scale * softplus(pre)` and
//! `color = clamp(sh(dir) . coeffs, 0, 1)`.
//!
//! Parameters live in `f64`; checkpoints store them as little-endian `f32`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Aabb, Vec3};

/// Above this pre-activation softplus is the identity.
pub const SOFTPLUS_THRESHOLD: f64 = 20.0;
/// Density pre-activation of an empty voxel; `softplus` underflows to 0.
pub const EMPTY_DENSITY: f64 = -1000.0;

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCTG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Maximum color coefficients per voxel (3 channels x 4 basis functions).
pub const MAX_COLOR_COEFFS: usize = 12;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("direction is not unit length (norm {0})")]
    NonUnitDirection(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShDegree {
    Zero,
    One,
}

impl ShDegree {
    pub fn basis_count(self) -> usize {
        match self {
            ShDegree::Zero => 1,
            ShDegree::One => 4,
        }
    }

    fn as_u32(self) -> u32 {
        match self {
            ShDegree::Zero => 0,
            ShDegree::One => 1,
        }
    }

    fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(ShDegree::Zero),
            1 => Some(ShDegree::One),
            _ => None,
        }
    }
}

/// Real SH basis evaluated at a unit direction; unused slots are zero.
pub fn sh_basis(dir: &Vec3, degree: ShDegree) -> [f64; 4] {
    match degree {
        ShDegree::Zero => [SH_C0, 0.0, 0.0, 0.0],
        ShDegree::One => [SH_C0, -SH_C1 * dir.y, SH_C1 * dir.z, -SH_C1 * dir.x],
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_THRESHOLD {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn softplus_grad(x: f64) -> f64 {
    if x > SOFTPLUS_THRESHOLD {
        1.0
    } else {
        1.0 / (1.0 + (-x).exp())
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > SOFTPLUS_THRESHOLD {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Density and color at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// Initial parameter values for a fresh grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridInit {
    pub density_pre: f64,
    /// Constant RGB the DC coefficients reproduce.
    pub color: [f64; 3],
}

impl Default for GridInit {
    fn default() -> Self {
        Self { density_pre: -5.0, color: [0.5; 3] }
    }
}

/// Trilinear stencil: 8 voxel indices and their weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub voxels: [usize; 8],
    pub weights: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceGrid {
    resolution: [usize; 3],
    bounds: Aabb,
    sh_degree: ShDegree,
    density_scale: f64,
    /// Per-voxel density pre-activation, `x` fastest.
    pub density: Vec<f64>,
    /// Per-voxel color coefficients, laid out `[voxel][channel][basis]`.
    pub color: Vec<f64>,
}

impl RadianceGrid {
    pub fn new(resolution: [usize; 3], bounds: Aabb, sh_degree: ShDegree, init: GridInit) -> Result<Self, FieldError> {
        if resolution.iter().any(|&n| n == 0) {
            return Err(FieldError::InvalidGrid(format!("resolution {resolution:?}")));
        }
        if !bounds.is_valid() {
            return Err(FieldError::InvalidGrid(format!("bounds {bounds:?}")));
        }
        let n = resolution.iter().product::<usize>();
        let nb = sh_degree.basis_count();
        let mut color = vec![0.0; n * 3 * nb];
        for v in 0..n {
            for ch in 0..3 {
                color[v * 3 * nb + ch * nb] = init.color[ch] / SH_C0;
            }
        }
        let ext = bounds.extent();
        let voxel = (0..3).map(|k| ext[k] / resolution[k] as f64).fold(f64::INFINITY, f64::min);
        Ok(Self { resolution, bounds, sh_degree, density_scale: 1.0 / voxel, density: vec![init.density_pre; n], color })
    }

    /// Grid with zero density and zero color everywhere.
    pub fn empty(resolution: [usize; 3], bounds: Aabb, sh_degree: ShDegree) -> Result<Self, FieldError> {
        let mut g = Self::new(resolution, bounds, sh_degree, GridInit { density_pre: EMPTY_DENSITY, color: [0.0; 3] })?;
        g.color.iter_mut().for_each(|c| *c = 0.0);
        Ok(g)
    }

    pub fn with_density_scale(mut self, scale: f64) -> Self {
        self.density_scale = scale;
        self
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn sh_degree(&self) -> ShDegree {
        self.sh_degree
    }

    pub fn density_scale(&self) -> f64 {
        self.density_scale
    }

    pub fn voxel_count(&self) -> usize {
        self.density.len()
    }

    pub fn coeffs_per_voxel(&self) -> usize {
        3 * self.sh_degree.basis_count()
    }

    pub fn voxel_size(&self) -> Vec3 {
        let e = self.bounds.extent();
        Vec3::new(e.x / self.resolution[0] as f64, e.y / self.resolution[1] as f64, e.z / self.resolution[2] as f64)
    }

    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.voxel_size();
        Vec3::new(
            self.bounds.min[0] + (i as f64 + 0.5) * s.x,
            self.bounds.min[1] + (j as f64 + 0.5) * s.y,
            self.bounds.min[2] + (k as f64 + 0.5) * s.z,
        )
    }

    /// Trilinear stencil at `p`, or `None` outside the bounds. Between the
    /// boundary and the outermost voxel centers the edge values are held.
    pub fn stencil(&self, p: &Vec3) -> Option<Stencil> {
        if !self.bounds.contains(p) {
            return None;
        }
        let s = self.voxel_size();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let g = ((p[a] - self.bounds.min[a]) / s[a] - 0.5).clamp(0.0, (n - 1) as f64);
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
            } else {
                let i0 = (g.floor() as usize).min(n - 2);
                base[a] = i0;
                frac[a] = g - i0 as f64;
            }
        }
        let mut voxels = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for c in 0..8 {
            let mut idx = [0usize; 3];
            let mut w = 1.0;
            for a in 0..3 {
                let hi = c >> a & 1 == 1;
                let n = self.resolution[a];
                idx[a] = if hi && n > 1 { base[a] + 1 } else { base[a] };
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            voxels[c] = self.voxel_index(idx[0], idx[1], idx[2]);
            weights[c] = w;
        }
        Some(Stencil { voxels, weights })
    }

    fn check_direction(dir: &Vec3) -> Result<(), FieldError> {
        let n = dir.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(FieldError::NonUnitDirection(n));
        }
        Ok(())
    }

    /// Interpolated pre-activation and raw (unclamped) color.
    fn interpolate(&self, st: &Stencil, basis: &[f64; 4]) -> (f64, [f64; 3]) {
        let nb = self.sh_degree.basis_count();
        let stride = 3 * nb;
        let mut pre = 0.0;
        let mut raw = [0.0; 3];
        for c in 0..8 {
            let w = st.weights[c];
            let v = st.voxels[c];
            pre += w * self.density[v];
            let coeffs = &self.color[v * stride..(v + 1) * stride];
            for ch in 0..3 {
                let mut acc = 0.0;
                for b in 0..nb {
                    acc += basis[b] * coeffs[ch * nb + b];
                }
                raw[ch] += w * acc;
            }
        }
        (pre, raw)
    }

    /// Density and color at `p` seen from direction `dir`. Points outside the
    /// bounds are empty.
    pub fn query(&self, p: &Vec3, dir: &Vec3) -> Result<FieldSample, FieldError> {
        Self::check_direction(dir)?;
        Ok(self.query_unchecked(p, dir))
    }

    pub(crate) fn query_unchecked(&self, p: &Vec3, dir: &Vec3) -> FieldSample {
        let Some(st) = self.stencil(p) else {
            return FieldSample::default();
        };
        let basis = sh_basis(dir, self.sh_degree);
        let (pre, raw) = self.interpolate(&st, &basis);
        FieldSample { sigma: self.density_scale * softplus(pre), color: raw.map(|c| c.clamp(0.0, 1.0)) }
    }

    /// Pushes `d loss / d param` for the 8 stencil voxels of `p` to `sink`
    /// as `(voxel, d_density_pre, d_color_coeffs)`, given upstream gradients
    /// on sigma and on the clamped color. Clamped channels pass no gradient.
    pub fn query_grad(
        &self,
        p: &Vec3,
        dir: &Vec3,
        d_sigma: f64,
        d_color: [f64; 3],
        mut sink: impl FnMut(usize, f64, &[f64; MAX_COLOR_COEFFS]),
    ) {
        let Some(st) = self.stencil(p) else {
            return;
        };
        let nb = self.sh_degree.basis_count();
        let basis = sh_basis(dir, self.sh_degree);
        let (pre, raw) = self.interpolate(&st, &basis);
        let d_pre = d_sigma * self.density_scale * softplus_grad(pre);
        let d_raw = [0, 1, 2].map(|ch| if (0.0..=1.0).contains(&raw[ch]) { d_color[ch] } else { 0.0 });
        if d_pre == 0.0 && d_raw.iter().all(|&g| g == 0.0) {
            return;
        }
        for c in 0..8 {
            let w = st.weights[c];
            if w == 0.0 {
                continue;
            }
            let mut dc = [0.0; MAX_COLOR_COEFFS];
            for ch in 0..3 {
                for b in 0..nb {
                    dc[ch * nb + b] = w * basis[b] * d_raw[ch];
                }
            }
            sink(st.voxels[c], w * d_pre, &dc);
        }
    }

    /// Total-variation penalty on the density pre-activation: the sum of
    /// squared differences between axis neighbours. Adds `weight * d/dpre`
    /// to `grad` and returns `weight * tv`.
    pub fn tv_loss_and_grad(&self, weight: f64, grad: Option<&mut GridGradient>) -> f64 {
        if weight == 0.0 {
            return 0.0;
        }
        let [nx, ny, nz] = self.resolution;
        let mut tv = 0.0;
        let mut g = grad;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let a = self.voxel_index(i, j, k);
                    let neighbours = [
                        (i + 1 < nx).then(|| self.voxel_index(i + 1, j, k)),
                        (j + 1 < ny).then(|| self.voxel_index(i, j + 1, k)),
                        (k + 1 < nz).then(|| self.voxel_index(i, j, k + 1)),
                    ];
                    for b in neighbours.into_iter().flatten() {
                        let d = self.density[a] - self.density[b];
                        tv += d * d;
                        if let Some(g) = g.as_deref_mut() {
                            g.density[a] += weight * 2.0 * d;
                            g.density[b] -= weight * 2.0 * d;
                        }
                    }
                }
            }
        }
        weight * tv
    }

    /// Mutable view of every parameter: density first, then color.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.density, &mut self.color)
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), FieldError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for n in self.resolution {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        w.write_all(&self.sh_degree.as_u32().to_le_bytes())?;
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.density_scale.to_le_bytes())?;
        let mut buf = Vec::with_capacity(4 * (self.density.len() + self.color.len()));
        for v in self.density.iter().chain(self.color.iter()) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self, FieldError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FieldError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(FieldError::Checkpoint(format!("unsupported version {version}")));
        }
        let resolution = [read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize];
        let sh = ShDegree::from_u32(read_u32(r)?).ok_or_else(|| FieldError::Checkpoint("bad SH degree".into()))?;
        let mut b = [0.0f64; 6];
        for v in &mut b {
            *v = read_f64(r)?;
        }
        let scale = read_f64(r)?;
        let bounds = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]);
        let mut grid = Self::new(resolution, bounds, sh, GridInit::default())?.with_density_scale(scale);
        let n_total = grid.density.len() + grid.color.len();
        let mut buf = vec![0u8; 4 * n_total];
        r.read_exact(&mut buf)?;
        let mut vals = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        grid.density.iter_mut().chain(grid.color.iter_mut()).for_each(|v| *v = vals.next().unwrap());
        Ok(grid)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, FieldError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, FieldError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Dense gradient buffer with the layout of a [`RadianceGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

impl GridGradient {
    pub fn zeros_like(grid: &RadianceGrid) -> Self {
        Self { density: vec![0.0; grid.density.len()], color: vec![0.0; grid.color.len()] }
    }

    pub fn add(&mut self, voxel: usize, d_density: f64, d_color: &[f64], coeffs_per_voxel: usize) {
        self.density[voxel] += d_density;
        let dst = &mut self.color[voxel * coeffs_per_voxel..(voxel + 1) * coeffs_per_voxel];
        for (d, s) in dst.iter_mut().zip(d_color) {
            *d += s;
        }
    }

    pub fn clear(&mut self) {
        self.density.iter_mut().for_each(|v| *v = 0.0);
        self.color.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.density.iter().chain(self.color.iter()).all(|&v| v == 0.0)
    }
}
