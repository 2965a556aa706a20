//! Radiance-field reconstruction for large image sets: scene partitioning,
//! multi-camera tiling, per-region voxel fields trained with
//! location-specific ray sampling, geometry extraction and point-cloud
//! evaluation.

pub mod camera;
pub mod field;
pub mod geom;
pub mod geometry;
pub mod io;
pub mod kdtree;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod renderer;
pub mod synth;
pub mod trainer;
