//! Evaluation metrics: PSNR, cloud-to-cloud distances and
//! accuracy/completeness threshold curves.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec3;
use crate::kdtree::KdTree;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("image sizes differ ({0} vs {1} values)")]
    SizeMismatch(usize, usize),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("thresholds must be ascending")]
    UnsortedThresholds,
}

/// `10 log10(max^2 / MSE)` over all channel values. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(rendered: &[f64], reference: &[f64], max_value: f64) -> Result<f64, MetricsError> {
    if rendered.len() != reference.len() {
        return Err(MetricsError::SizeMismatch(rendered.len(), reference.len()));
    }
    if rendered.is_empty() {
        return Err(MetricsError::SizeMismatch(0, 0));
    }
    let sse: f64 = rendered.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(psnr_from_mse(sse / rendered.len() as f64, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// PSNR of two 8-bit RGB images, `max_value` 255.
pub fn psnr_rgb8(rendered: &image::RgbImage, reference: &image::RgbImage) -> Result<f64, MetricsError> {
    if rendered.dimensions() != reference.dimensions() {
        return Err(MetricsError::SizeMismatch(rendered.len(), reference.len()));
    }
    let a: Vec<f64> = rendered.as_raw().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = reference.as_raw().iter().map(|&v| v as f64).collect();
    psnr(&a, &b, 255.0)
}

/// Nearest-neighbour distance from every query point to `reference`.
pub fn nearest_distances(query: &[Vec3], reference: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(reference);
    query.par_iter().map(|p| tree.nearest(p).map(|(_, d2)| d2.sqrt()).unwrap_or(f64::INFINITY)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2CReport {
    pub mean_error: f64,
    /// Population standard deviation of the distances.
    pub std: f64,
    pub distances: Vec<f64>,
}

/// Point-to-point distance from each test point to its nearest reference
/// point.
pub fn cloud_to_cloud(test: &[Vec3], reference: &[Vec3]) -> Result<C2CReport, MetricsError> {
    if test.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let distances = nearest_distances(test, reference);
    let n = distances.len() as f64;
    let mean_error = distances.iter().sum::<f64>() / n;
    let var = distances.iter().map(|d| (d - mean_error).powi(2)).sum::<f64>() / n;
    Ok(C2CReport { mean_error, std: var.sqrt(), distances })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub thresholds: Vec<f64>,
    /// Fraction of test points within each threshold of the reference.
    pub accuracy: Vec<f64>,
    /// Fraction of reference points within each threshold of the test.
    pub completeness: Vec<f64>,
}

fn fraction_within(distances: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    thresholds.iter().map(|&tau| sorted.partition_point(|&d| d <= tau) as f64 / sorted.len() as f64).collect()
}

pub fn threshold_curves(test: &[Vec3], reference: &[Vec3], thresholds: &[f64]) -> Result<ThresholdCurve, MetricsError> {
    if test.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    if thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(MetricsError::UnsortedThresholds);
    }
    let to_ref = nearest_distances(test, reference);
    let to_test = nearest_distances(reference, test);
    Ok(ThresholdCurve {
        thresholds: thresholds.to_vec(),
        accuracy: fraction_within(&to_ref, thresholds),
        completeness: fraction_within(&to_test, thresholds),
    })
}

impl ThresholdCurve {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "threshold,accuracy,completeness")?;
        for i in 0..self.thresholds.len() {
            writeln!(w, "{},{:.6},{:.6}", self.thresholds[i], self.accuracy[i], self.completeness[i])?;
        }
        Ok(())
    }
}

impl C2CReport {
    pub fn summary(&self) -> String {
        format!("points: {}\nmean error: {:.6}\nstd: {:.6}\n", self.distances.len(), self.mean_error, self.std)
    }
}
