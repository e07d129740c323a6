//! Emerging / disappearing point detection by thresholded mean-kNN distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChangeReport, GaussianMap, PointCloud, ReportParams, RigidTransform, Vec3};
use crate::registration::apply_transform_points;
use crate::spatial::KdIndex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    /// Neighbours averaged per query.
    pub h: usize,
    /// Emerging threshold (meters).
    pub r: f64,
    /// Disappearing threshold (meters).
    pub r_prime: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            h: 10,
            r: 1.0,
            r_prime: 1.0,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::InvalidParam("h must be at least 1".into()));
        }
        if !(self.r > 0.0) || !(self.r_prime > 0.0) {
            return Err(Error::InvalidParam("thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Indices flagged by one detector plus every query's mean distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub indices: Vec<usize>,
    pub mean_dist: Vec<f64>,
    /// Neighbours actually averaged (`min(h, database size)`).
    pub h_used: usize,
}

fn threshold_queries(queries: &[Vec3], database: &[Vec3], h: usize, r: f64) -> Result<Detection> {
    if database.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index = KdIndex::from_points(database)?;
    let mean_dist: Vec<f64> = queries
        .par_iter()
        .map_init(
            || Vec::with_capacity(h),
            |buf, q| index.mean_knn_distance_with(q, h, buf),
        )
        .collect();
    let indices = mean_dist
        .iter()
        .enumerate()
        .filter(|(_, &d)| d >= r)
        .map(|(i, _)| i)
        .collect();
    Ok(Detection {
        indices,
        mean_dist,
        h_used: h.min(database.len()),
    })
}

/// Submap points whose mean distance to their `h` nearest map positions is at least `r`.
pub fn detect_emerging(
    submap: &PointCloud,
    map_positions: &PointCloud,
    params: &DetectionParams,
) -> Result<Detection> {
    params.validate()?;
    threshold_queries(&submap.points, &map_positions.points, params.h, params.r)
}

/// Map positions whose mean distance to their `h` nearest submap points is at least `r'`.
pub fn detect_disappearing(
    map_positions: &PointCloud,
    submap: &PointCloud,
    params: &DetectionParams,
) -> Result<Detection> {
    params.validate()?;
    threshold_queries(&map_positions.points, &submap.points, params.h, params.r_prime)
}

/// Runs both detectors on map positions already expressed in the submap frame.
pub fn detect_aligned(
    aligned_positions: &PointCloud,
    submap: &PointCloud,
    params: &DetectionParams,
) -> Result<ChangeReport> {
    let ep = detect_emerging(submap, aligned_positions, params)?;
    let dp = detect_disappearing(aligned_positions, submap, params)?;
    Ok(ChangeReport {
        ep_indices: ep.indices,
        dp_indices: dp.indices,
        ep_mean_dist: ep.mean_dist,
        dp_mean_dist: dp.mean_dist,
        params: ReportParams {
            h: params.h,
            r: params.r,
            r_prime: params.r_prime,
            h_used_ep: ep.h_used,
            h_used_dp: dp.h_used,
        },
    })
}

/// Moves the map positions by `transform` (map frame → submap frame) and detects changes.
pub fn detect_changes(
    old_map: &GaussianMap,
    submap: &PointCloud,
    transform: &RigidTransform,
    params: &DetectionParams,
) -> Result<ChangeReport> {
    let positions: Vec<Vec3> = old_map.gaussians.iter().map(|g| g.position).collect();
    let aligned = PointCloud::new(apply_transform_points(&positions, transform));
    detect_aligned(&aligned, submap, params)
}
