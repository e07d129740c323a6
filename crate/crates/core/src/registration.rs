//! Rigid alignment of map positions to a LiDAR submap: closed-form
//! least-squares pose from matched pairs, and point-to-point ICP around it.

use log::debug;
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PointCloud, RigidTransform, Vec3};
use crate::spatial::KdIndex;

/// Fixed chunk length for parallel reductions; keeps sums independent of thread count.
pub(crate) const REDUCE_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    /// Correspondences farther apart than this are discarded (meters).
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    /// Stop once the RMSE improves by less than this (meters).
    pub convergence_epsilon: f64,
    /// Starting guess for the source → target transform.
    pub initial: RigidTransform,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams {
            max_correspondence_distance: 2.0,
            max_iterations: 100,
            convergence_epsilon: 1e-7,
            initial: RigidTransform::identity(),
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_correspondence_distance > 0.0) {
            return Err(Error::InvalidParam("max correspondence distance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParam("max iterations must be positive".into()));
        }
        if !(self.convergence_epsilon > 0.0) {
            return Err(Error::InvalidParam("convergence epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps the source frame onto the target frame.
    pub transform: RigidTransform,
    /// Gated RMSE at `transform`: residuals beyond the gate count as the gate distance.
    pub final_rmse: f64,
    pub iterations_used: usize,
    pub correspondence_count: usize,
    /// Gated RMSE evaluated before each update and at the final transform.
    pub rmse_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct IcpResultJson {
    matrix: Vec<f64>,
    rmse: f64,
    iterations: usize,
    correspondences: usize,
}

impl IcpResult {
    /// `{"matrix": [16 floats], "rmse": .., "iterations": .., "correspondences": ..}`
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(IcpResultJson {
            matrix: self.transform.to_row_major().to_vec(),
            rmse: self.final_rmse,
            iterations: self.iterations_used,
            correspondences: self.correspondence_count,
        })
        .expect("plain struct serializes")
    }
}

/// `p ↦ R·p + t` for every point.
pub fn apply_transform(cloud: &PointCloud, transform: &RigidTransform) -> PointCloud {
    PointCloud::new(apply_transform_points(&cloud.points, transform))
}

pub fn apply_transform_points(points: &[Vec3], transform: &RigidTransform) -> Vec<Vec3> {
    points.par_iter().map(|p| transform.apply(p)).collect()
}

fn chunked_sum<T, F>(n: usize, f: F) -> T
where
    T: Send + Copy + std::ops::Add<Output = T> + Default,
    F: Fn(usize) -> T + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(REDUCE_CHUNK).collect();
    let partials: Vec<T> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = T::default();
            for i in s..(s + REDUCE_CHUNK).min(n) {
                acc = acc + f(i);
            }
            acc
        })
        .collect();
    partials.into_iter().fold(T::default(), |a, b| a + b)
}

/// Least-squares rigid motion taking `source[i]` onto `target[i]`
/// (centroid subtraction, SVD of the cross-covariance, reflection guard).
pub fn estimate_rigid_transform(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: source.len(),
            actual: target.len(),
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::TooFewCorrespondences(n));
    }
    let inv_n = 1.0 / n as f64;
    let cs = chunked_sum(n, |i| source[i]) * inv_n;
    let ct = chunked_sum(n, |i| target[i]) * inv_n;
    let h: Matrix3<f64> = chunked_sum(n, |i| (source[i] - cs) * (target[i] - ct).transpose());

    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let smax = sv.max();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(smax > 0.0) || sorted[1] <= 1e-10 * sorted[0] {
        return Err(Error::DegenerateGeometry(format!(
            "correspondences are collinear or coincident (singular values {sorted:?})"
        )));
    }
    let u = svd.u.ok_or_else(|| Error::DegenerateGeometry("svd failed".into()))?;
    let v = svd
        .v_t
        .ok_or_else(|| Error::DegenerateGeometry("svd failed".into()))?
        .transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    let t = ct - r * cs;
    Ok(RigidTransform {
        rotation: r,
        translation: t,
    })
}

struct Matches {
    src: Vec<u32>,
    dst: Vec<u32>,
    rmse: f64,
}

fn correspond(
    index: &KdIndex,
    source: &[Vec3],
    transform: &RigidTransform,
    gate: f64,
) -> Matches {
    let gate2 = gate * gate;
    let nn: Vec<(f64, u32)> = source
        .par_iter()
        .map(|p| {
            index
                .nearest_within(&transform.apply(p), gate2)
                .unwrap_or((f64::INFINITY, u32::MAX))
        })
        .collect();
    let sse = chunked_sum(nn.len(), |i| nn[i].0.min(gate2));
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (i, &(d2, j)) in nn.iter().enumerate() {
        if d2 <= gate2 {
            src.push(i as u32);
            dst.push(j);
        }
    }
    Matches {
        src,
        dst,
        rmse: (sse / source.len() as f64).sqrt(),
    }
}

/// Point-to-point ICP aligning `source` to `target`.
///
/// Each iteration matches every transformed source point to its nearest
/// target point, drops pairs beyond the gate, and composes the closed-form
/// update. The gated RMSE it tracks is non-increasing from step to step.
pub fn icp_align(source: &PointCloud, target: &PointCloud, params: &IcpParams) -> Result<IcpResult> {
    params.validate()?;
    if source.len() < 3 {
        return Err(Error::TooFewCorrespondences(source.len()));
    }
    if target.len() < 3 {
        return Err(Error::TooFewCorrespondences(target.len()));
    }
    let index = KdIndex::build(target)?;
    let src = &source.points;
    let mut transform = params.initial;
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let m = correspond(&index, src, &transform, params.max_correspondence_distance);
        if m.src.is_empty() {
            return Err(Error::NoOverlap {
                iteration: iterations + 1,
            });
        }
        let prev = history.last().copied();
        history.push(m.rmse);
        debug!(
            "icp iteration {iterations}: rmse {:.6e}, {} correspondences",
            m.rmse,
            m.src.len()
        );
        let converged = m.rmse == 0.0
            || prev.is_some_and(|p: f64| p - m.rmse < params.convergence_epsilon);
        if converged || iterations == params.max_iterations {
            return Ok(IcpResult {
                transform,
                final_rmse: m.rmse,
                iterations_used: iterations,
                correspondence_count: m.src.len(),
                rmse_history: history,
            });
        }
        let moved: Vec<Vec3> = m.src.iter().map(|&i| transform.apply(&src[i as usize])).collect();
        let matched: Vec<Vec3> = m.dst.iter().map(|&j| target.points[j as usize]).collect();
        let delta = estimate_rigid_transform(&moved, &matched)?;
        transform = delta.compose(&transform);
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect()
    }

    #[test]
    fn identical_sets_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = cloud(&mut rng, 50);
        let t = estimate_rigid_transform(&pts, &pts).unwrap();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_quarter_turn_with_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = cloud(&mut rng, 100);
        let truth = RigidTransform::from_axis_angle(
            Vec3::z(),
            std::f64::consts::FRAC_PI_2,
            Vec3::new(1.0, 2.0, 3.0),
        );
        let tgt: Vec<Vec3> = pts.iter().map(|p| truth.apply(p)).collect();
        let t = estimate_rigid_transform(&pts, &tgt).unwrap();
        assert!((t.rotation - truth.rotation).abs().max() < 1e-9);
        assert!((t.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn reflection_is_corrected_to_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = cloud(&mut rng, 60);
        let tgt: Vec<Vec3> = pts.iter().map(|p| Vec3::new(p.x, p.y, -p.z)).collect();
        let t = estimate_rigid_transform(&pts, &tgt).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        let sse: f64 = pts
            .iter()
            .zip(&tgt)
            .map(|(p, q)| (t.apply(p) - q).norm_squared())
            .sum();
        assert!(sse > 1e-3);
    }

    #[test]
    fn too_few_and_collinear_rejected() {
        let a = vec![Vec3::zeros(), Vec3::x()];
        assert!(matches!(
            estimate_rigid_transform(&a, &a),
            Err(Error::TooFewCorrespondences(2))
        ));
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(
            estimate_rigid_transform(&line, &line),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn apply_transform_basics() {
        let c = PointCloud::new(vec![Vec3::zeros()]);
        let out = apply_transform(&c, &RigidTransform::from_translation(Vec3::x()));
        assert_eq!(out.points[0], Vec3::x());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = PointCloud::new(cloud(&mut rng, 100));
        assert_eq!(apply_transform(&c, &RigidTransform::identity()), c);
        let t = RigidTransform::from_axis_angle(Vec3::new(0.2, 1.0, -0.4), 1.3, Vec3::new(3.0, -1.0, 2.0));
        let back = apply_transform(&apply_transform(&c, &t), &t.inverse());
        for (a, b) in back.points.iter().zip(&c.points) {
            assert!((a - b).norm() < 1e-12);
        }
        let moved = apply_transform(&c, &t);
        for i in 0..20 {
            let d0 = (c.points[i] - c.points[i + 1]).norm();
            let d1 = (moved.points[i] - moved.points[i + 1]).norm();
            assert!((d0 - d1).abs() < 1e-9);
        }
    }

    #[test]
    fn icp_on_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = PointCloud::new(cloud(&mut rng, 500));
        let r = icp_align(&c, &c, &IcpParams::default()).unwrap();
        assert!(r.final_rmse < 1e-12);
        assert!(r.iterations_used <= 1);
        assert!((r.transform.rotation - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn icp_recovers_small_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = PointCloud::new(cloud(&mut rng, 3000));
        let truth = RigidTransform::from_axis_angle(Vec3::z(), 3f64.to_radians(), Vec3::new(0.2, -0.1, 0.05));
        let tgt = apply_transform(&src, &truth);
        let r = icp_align(&src, &tgt, &IcpParams::default()).unwrap();
        let (rot, trans) = r.transform.error_to(&truth);
        assert!(rot.to_degrees() < 0.1 && trans < 0.01, "{rot} {trans}");
        for w in r.rmse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(r.iterations_used <= 100);
    }

    #[test]
    fn icp_without_overlap_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = PointCloud::new(cloud(&mut rng, 200));
        let tgt = apply_transform(&src, &RigidTransform::from_translation(Vec3::new(100.0, 0.0, 0.0)));
        assert!(matches!(
            icp_align(&src, &tgt, &IcpParams::default()),
            Err(Error::NoOverlap { iteration: 1 })
        ));
    }

    #[test]
    fn icp_params_validated() {
        let c = PointCloud::new(vec![Vec3::zeros(); 4]);
        let p = IcpParams {
            max_correspondence_distance: 0.0,
            ..Default::default()
        };
        assert!(matches!(icp_align(&c, &c, &p), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn result_json_shape() {
        let r = IcpResult {
            transform: RigidTransform::identity(),
            final_rmse: 0.5,
            iterations_used: 3,
            correspondence_count: 10,
            rmse_history: vec![],
        };
        let v = r.to_json();
        assert_eq!(v["matrix"].as_array().unwrap().len(), 16);
        assert_eq!(v["iterations"], 3);
        assert_eq!(v["correspondences"], 10);
        assert_eq!(v["rmse"], 0.5);
    }
}
