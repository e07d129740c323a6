//! Builds the updated map prior: carry the old map into the new frame, drop
//! disappearing Gaussians, seed emerging points from their nearest survivors.

use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::change::{detect_aligned, DetectionParams};
use crate::error::{Error, Result, Stage};
use crate::model::{
    logit, ChangeReport, Gaussian, GaussianMap, Origin, PointCloud, RigidTransform, Vec3,
};
use crate::registration::{icp_align, IcpParams, IcpResult};
use crate::sh::{rotate_quaternion, sh_rotation_from};
use crate::spatial::KdIndex;

/// Attributes given to an emerging point when no donor Gaussians exist.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// Log-scale.
    pub scale: Vec3,
    pub rotation: [f64; 4],
    pub sh: Vec<f64>,
    /// Logit opacity.
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateParams {
    /// Donors averaged per emerging point.
    pub e: usize,
    pub fallback_features: Option<Features>,
}

impl Default for UpdateParams {
    fn default() -> Self {
        UpdateParams {
            e: 10,
            fallback_features: None,
        }
    }
}

/// Carries a map into a new frame: positions, orientations and SH are
/// rotated; scale and opacity pass through. Order and provenance are kept.
pub fn transform_map(map: &GaussianMap, transform: &RigidTransform) -> Result<GaussianMap> {
    let rotate = transform.rotation != nalgebra::Matrix3::identity();
    let sh_rot = if rotate {
        Some(sh_rotation_from(&transform.rotation, map.sh_degree)?)
    } else {
        None
    };
    let gaussians: Vec<Gaussian> = map
        .gaussians
        .par_iter()
        .map(|g| {
            let mut out = g.clone();
            out.position = transform.apply(&g.position);
            if let Some(rot) = &sh_rot {
                out.rotation = rotate_quaternion(g.rotation, &transform.rotation);
                let n = g.coeffs_per_channel();
                for (src, dst) in g.sh.chunks_exact(n).zip(out.sh.chunks_exact_mut(n)) {
                    rot.apply_channel(src, dst);
                }
            }
            out
        })
        .collect();
    Ok(GaussianMap {
        gaussians,
        sh_degree: map.sh_degree,
        frame_label: map.frame_label.clone(),
        origins: map.origins.clone(),
    })
}

fn removal_mask(len: usize, dp_indices: &[usize]) -> Result<Vec<bool>> {
    let mut drop = vec![false; len];
    for &i in dp_indices {
        if i >= len {
            return Err(Error::IndexOutOfRange { index: i, len });
        }
        drop[i] = true;
    }
    Ok(drop)
}

/// Removes the Gaussians at `dp_indices`; survivors keep their order and original index.
pub fn remove_disappearing(map: &GaussianMap, dp_indices: &[usize]) -> Result<GaussianMap> {
    remove_disappearing_owned(map.clone(), dp_indices)
}

pub(crate) fn remove_disappearing_owned(map: GaussianMap, dp_indices: &[usize]) -> Result<GaussianMap> {
    let drop = removal_mask(map.len(), dp_indices)?;
    let origins = map.origins_vec();
    let mut kept = Vec::with_capacity(map.len());
    let mut kept_origins = Vec::with_capacity(map.len());
    for (i, g) in map.gaussians.into_iter().enumerate() {
        if !drop[i] {
            kept.push(g);
            kept_origins.push(origins[i]);
        }
    }
    Ok(GaussianMap {
        gaussians: kept,
        sh_degree: map.sh_degree,
        frame_label: map.frame_label,
        origins: Some(kept_origins),
    })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-12, 1.0 - 1e-12)
}

/// Averages donor attributes: scale and opacity in activated space,
/// quaternions sign-aligned to the first donor then normalized, SH componentwise.
pub(crate) fn average_features(position: Vec3, donors: &[&Gaussian]) -> Gaussian {
    let k = donors.len() as f64;
    let first = donors[0];
    let mut scale = Vec3::zeros();
    let mut opacity = 0.0;
    let mut quat = [0.0f64; 4];
    let mut sh = vec![0.0; first.sh.len()];
    for g in donors {
        scale += g.activated_scale();
        opacity += g.activated_opacity();
        let d: f64 = (0..4).map(|c| g.rotation[c] * first.rotation[c]).sum();
        let sign = if d < 0.0 { -1.0 } else { 1.0 };
        for c in 0..4 {
            quat[c] += sign * g.rotation[c];
        }
        for (acc, v) in sh.iter_mut().zip(&g.sh) {
            *acc += v;
        }
    }
    let scale = (scale / k).map(f64::ln);
    let opacity = logit(clamp_prob(opacity / k));
    let quat = quat.map(|v| v / k);
    let rotation = crate::model::normalize_quaternion(quat).unwrap_or(first.rotation);
    sh.iter_mut().for_each(|v| *v /= k);
    Gaussian {
        position,
        scale,
        rotation,
        sh,
        opacity,
    }
}

/// Turns each emerging point into a Gaussian whose attributes average its
/// `e` nearest donors (all donors if fewer exist).
pub fn assign_features(
    ep_points: &PointCloud,
    donors: &GaussianMap,
    params: &UpdateParams,
) -> Result<Vec<Gaussian>> {
    if params.e == 0 {
        return Err(Error::InvalidParam("e must be at least 1".into()));
    }
    if ep_points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if donors.is_empty() {
        let f = params.fallback_features.as_ref().ok_or(Error::NoDonors)?;
        let expected = 3 * crate::model::sh_coeffs_per_channel(donors.sh_degree);
        if f.sh.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: f.sh.len(),
            });
        }
        return Ok(ep_points
            .points
            .iter()
            .map(|p| Gaussian {
                position: *p,
                scale: f.scale,
                rotation: f.rotation,
                sh: f.sh.clone(),
                opacity: f.opacity,
            })
            .collect());
    }
    let positions: Vec<Vec3> = donors.gaussians.iter().map(|g| g.position).collect();
    let index = KdIndex::from_points(&positions)?;
    let out = ep_points
        .points
        .par_iter()
        .map_init(
            || Vec::with_capacity(params.e),
            |buf, p| {
                index.knn_into(p, params.e, buf);
                let near: Vec<&Gaussian> = buf.iter().map(|&(_, i)| &donors.gaussians[i as usize]).collect();
                average_features(*p, &near)
            },
        )
        .collect();
    Ok(out)
}

/// Appends emerging Gaussians after the kept ones.
pub fn merge_prior(kept: GaussianMap, emerging: Vec<Gaussian>) -> Result<GaussianMap> {
    let expected = 3 * crate::model::sh_coeffs_per_channel(kept.sh_degree);
    if let Some(g) = emerging.iter().find(|g| g.sh.len() != expected) {
        let other = (((g.sh.len() / 3) as f64).sqrt() as usize).saturating_sub(1);
        return Err(Error::DegreeMismatch(kept.sh_degree, other));
    }
    let mut origins = kept.origins_vec();
    origins.extend(std::iter::repeat(Origin::Emerging).take(emerging.len()));
    let mut gaussians = kept.gaussians;
    gaussians.extend(emerging);
    Ok(GaussianMap {
        gaussians,
        sh_degree: kept.sh_degree,
        frame_label: kept.frame_label,
        origins: Some(origins),
    })
}

/// Sidecar written next to an updated map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub carried: Vec<usize>,
    pub emerging: usize,
    pub transform: RigidTransform,
}

impl Provenance {
    pub fn from_map(map: &GaussianMap, transform: &RigidTransform) -> Self {
        let mut carried = Vec::new();
        let mut emerging = 0;
        for o in map.origins_vec() {
            match o {
                Origin::Carried(i) => carried.push(i),
                Origin::Emerging => emerging += 1,
            }
        }
        Provenance {
            carried,
            emerging,
            transform: *transform,
        }
    }
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub register: f64,
    pub transform: f64,
    pub detect: f64,
    pub update: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.register + self.transform + self.detect + self.update
    }
}

#[derive(Debug, Clone)]
pub struct UpdateOutput {
    pub map: GaussianMap,
    pub report: ChangeReport,
    pub icp: IcpResult,
    pub timings: StageTimings,
}

/// Register → transform → detect → remove → assign → merge.
///
/// Errors carry the label of the stage that failed.
pub fn update_pipeline(
    old_map: &GaussianMap,
    submap: &PointCloud,
    icp_params: &IcpParams,
    det_params: &DetectionParams,
    upd_params: &UpdateParams,
) -> Result<UpdateOutput> {
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let icp = icp_align(&old_map.positions(), submap, icp_params).map_err(|e| e.at(Stage::Register))?;
    timings.register = t0.elapsed().as_secs_f64();
    info!(
        "registered: rmse {:.4e} after {} iterations, {} correspondences",
        icp.final_rmse, icp.iterations_used, icp.correspondence_count
    );

    let t0 = Instant::now();
    let moved = transform_map(old_map, &icp.transform).map_err(|e| e.at(Stage::Transform))?;
    timings.transform = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let report =
        detect_aligned(&moved.positions(), submap, det_params).map_err(|e| e.at(Stage::Detect))?;
    timings.detect = t0.elapsed().as_secs_f64();
    info!(
        "detected {} emerging, {} disappearing",
        report.ep_indices.len(),
        report.dp_indices.len()
    );

    let t0 = Instant::now();
    let kept = remove_disappearing_owned(moved, &report.dp_indices).map_err(|e| e.at(Stage::Remove))?;
    let emerging = if report.ep_indices.is_empty() {
        Vec::new()
    } else {
        assign_features(&submap.select(&report.ep_indices), &kept, upd_params)
            .map_err(|e| e.at(Stage::AssignFeatures))?
    };
    let map = merge_prior(kept, emerging).map_err(|e| e.at(Stage::Merge))?;
    timings.update = t0.elapsed().as_secs_f64();

    Ok(UpdateOutput {
        map,
        report,
        icp,
        timings,
    })
}
