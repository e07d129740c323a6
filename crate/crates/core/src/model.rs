//! Domain types shared by every stage: splat primitives, maps, point clouds,
//! rigid transforms and change reports.

use std::fmt;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::change::DetectionParams;
use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Highest SH degree the toolkit handles.
pub const MAX_SH_DEGREE: usize = 3;

/// Coefficients per colour channel for a given SH degree.
pub const fn sh_coeffs_per_channel(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Normalizes a (w, x, y, z) quaternion. `None` when the norm is zero or not finite.
pub fn normalize_quaternion(q: [f64; 4]) -> Option<[f64; 4]> {
    let n = quaternion_norm(q);
    if !n.is_finite() || n == 0.0 {
        return None;
    }
    Some([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

pub fn quaternion_norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of a (w, x, y, z) quaternion. The quaternion is normalized first.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    uq.to_rotation_matrix().into_inner()
}

/// One splat primitive.
///
/// Scale is stored as log-scale and opacity as a logit, the pre-activation
/// convention of splat PLY files. SH coefficients are channel-major:
/// `sh[c * n + k]` is coefficient `k` (band-major, DC first) of channel `c`,
/// with `n = (degree + 1)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vec3,
    pub scale: Vec3,
    /// Unit quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    pub sh: Vec<f64>,
    pub opacity: f64,
}

impl Gaussian {
    /// An isotropic, identity-oriented Gaussian with zero colour coefficients.
    pub fn new(position: Vec3, degree: usize) -> Self {
        Gaussian {
            position,
            scale: Vec3::zeros(),
            rotation: [1.0, 0.0, 0.0, 0.0],
            sh: vec![0.0; 3 * sh_coeffs_per_channel(degree)],
            opacity: 0.0,
        }
    }

    pub fn activated_scale(&self) -> Vec3 {
        self.scale.map(f64::exp)
    }

    pub fn activated_opacity(&self) -> f64 {
        sigmoid(self.opacity)
    }

    pub fn set_activated_scale(&mut self, s: Vec3) {
        self.scale = s.map(f64::ln);
    }

    pub fn set_activated_opacity(&mut self, a: f64) {
        self.opacity = logit(a);
    }

    pub fn coeffs_per_channel(&self) -> usize {
        self.sh.len() / 3
    }

    pub fn sh_channel(&self, c: usize) -> &[f64] {
        let n = self.coeffs_per_channel();
        &self.sh[c * n..(c + 1) * n]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quaternion_to_matrix(self.rotation)
    }

    /// Normalizes the quaternion in place. Returns false if it cannot be normalized.
    pub fn normalize_rotation(&mut self) -> bool {
        match normalize_quaternion(self.rotation) {
            Some(q) => {
                self.rotation = q;
                true
            }
            None => false,
        }
    }
}

/// Where a Gaussian in a derived map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// Carried over from the source map; holds the original index.
    Carried(usize),
    /// Inserted from an emerging LiDAR point.
    Emerging,
}

/// Ordered collection of Gaussians sharing one SH degree.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMap {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
    pub frame_label: String,
    /// Per-Gaussian provenance. `None` means every Gaussian is at its original index.
    pub origins: Option<Vec<Origin>>,
}

impl GaussianMap {
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: usize) -> Self {
        GaussianMap {
            gaussians,
            sh_degree,
            frame_label: String::new(),
            origins: None,
        }
    }

    pub fn empty(sh_degree: usize) -> Self {
        Self::new(Vec::new(), sh_degree)
    }

    pub fn with_frame(mut self, label: impl Into<String>) -> Self {
        self.frame_label = label.into();
        self
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn origin(&self, i: usize) -> Origin {
        match &self.origins {
            Some(o) => o[i],
            None => Origin::Carried(i),
        }
    }

    pub fn origins_vec(&self) -> Vec<Origin> {
        (0..self.len()).map(|i| self.origin(i)).collect()
    }

    pub fn positions(&self) -> PointCloud {
        PointCloud::new(self.gaussians.iter().map(|g| g.position).collect())
    }

    /// Rounds every stored attribute to `f32`, the precision of the on-disk format.
    pub fn quantize_to_storage(&mut self) {
        let q = |x: f64| x as f32 as f64;
        for g in &mut self.gaussians {
            g.position = g.position.map(q);
            g.scale = g.scale.map(q);
            g.rotation = g.rotation.map(q);
            g.sh.iter_mut().for_each(|v| *v = q(*v));
            g.opacity = q(g.opacity);
        }
    }
}

/// Positions-only point set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the first point with a non-finite component.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.points
            .iter()
            .position(|p| !p.iter().all(|v| v.is_finite()))
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

impl From<Vec<Vec3>> for PointCloud {
    fn from(points: Vec<Vec3>) -> Self {
        PointCloud::new(points)
    }
}

const ORTHO_TOL: f64 = 1e-9;

/// Element of SE(3): `p ↦ rotation · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Checked constructor; rejects anything that is not a proper rotation within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation, ORTHO_TOL)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite translation".into()));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally), followed by `t`.
    pub fn from_axis_angle(axis: Vec3, angle: f64, t: Vec3) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        RigidTransform {
            rotation: Rotation3::from_axis_angle(&axis, angle).into_inner(),
            translation: t,
        }
    }

    /// Builds a transform from a row-major 4x4 matrix.
    ///
    /// Rotation blocks that are orthonormal to within `tol` are projected onto
    /// SO(3) so that text-serialized poses with limited digits still load.
    pub fn from_row_major(m: &[f64], tol: f64) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::InvalidTransform(format!(
                "expected 16 matrix entries, got {}",
                m.len()
            )));
        }
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite matrix entry".into()));
        }
        let mat = Matrix4::from_row_slice(m);
        let last = [mat[(3, 0)], mat[(3, 1)], mat[(3, 2)], mat[(3, 3)]];
        if last[0].abs() > tol || last[1].abs() > tol || last[2].abs() > tol || (last[3] - 1.0).abs() > tol
        {
            return Err(Error::InvalidTransform(format!(
                "bottom row must be [0 0 0 1], got {last:?}"
            )));
        }
        let r: Matrix3<f64> = mat.fixed_view::<3, 3>(0, 0).into_owned();
        check_rotation(&r, tol)?;
        let t = Vec3::new(mat[(0, 3)], mat[(1, 3)], mat[(2, 3)]);
        Ok(RigidTransform {
            rotation: project_to_so3(&r),
            translation: t,
        })
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Geodesic angle of the rotation part, in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Rotation angle (radians) and translation distance separating two transforms.
    pub fn error_to(&self, other: &RigidTransform) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.rotation_angle(), (self.translation - other.translation).norm())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vec3::zeros()
    }
}

impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.to_row_major();
        for row in m.chunks(4) {
            writeln!(f, "{:>12.6} {:>12.6} {:>12.6} {:>12.6}", row[0], row[1], row[2], row[3])?;
        }
        Ok(())
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m: Vec<f64> = Vec::deserialize(d)?;
        RigidTransform::from_row_major(&m, 1e-6).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidTransform("non-finite rotation".into()));
    }
    let err = (r * r.transpose() - Matrix3::identity()).abs().max();
    if err > tol {
        return Err(Error::InvalidTransform(format!(
            "rotation not orthonormal (max deviation {err:.3e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(Error::InvalidTransform(format!("rotation determinant {det}")));
    }
    Ok(())
}

/// Nearest proper rotation in the Frobenius sense.
pub(crate) fn project_to_so3(r: &Matrix3<f64>) -> Matrix3<f64> {
    if (r * r.transpose() - Matrix3::identity()).abs().max() <= 1e-15 {
        return *r;
    }
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Output of change detection: emerging submap points and disappearing map Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    #[serde(rename = "ep")]
    pub ep_indices: Vec<usize>,
    #[serde(rename = "dp")]
    pub dp_indices: Vec<usize>,
    #[serde(rename = "ep_dist")]
    pub ep_mean_dist: Vec<f64>,
    #[serde(rename = "dp_dist")]
    pub dp_mean_dist: Vec<f64>,
    pub params: ReportParams,
}

/// Detection parameters echoed into a report, plus the neighbour counts
/// actually used when a database held fewer than `h` points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportParams {
    pub h: usize,
    pub r: f64,
    pub r_prime: f64,
    pub h_used_ep: usize,
    pub h_used_dp: usize,
}

impl ReportParams {
    pub fn detection(&self) -> DetectionParams {
        DetectionParams {
            h: self.h,
            r: self.r,
            r_prime: self.r_prime,
        }
    }
}

impl ChangeReport {
    pub fn is_empty(&self) -> bool {
        self.ep_indices.is_empty() && self.dp_indices.is_empty()
    }

    /// Checks index ranges and uniqueness against submap size `n` and map size `m`.
    pub fn check_indices(&self, n: usize, m: usize) -> Result<()> {
        check_index_set(&self.ep_indices, n)?;
        check_index_set(&self.dp_indices, m)
    }
}

fn check_index_set(idx: &[usize], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    for &i in idx {
        if i >= len {
            return Err(Error::IndexOutOfRange { index: i, len });
        }
        if seen[i] {
            return Err(Error::InvalidParam(format!("duplicate index {i}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Which invariant a Gaussian or map violates.
#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    UnsupportedDegree(usize),
    DegenerateQuaternion,
    NonUnitQuaternion(f64),
    ShLength { expected: usize, actual: usize },
    NonFinitePosition,
    NonFiniteAttribute,
    OriginsLength { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Offending Gaussian, or `None` for map-level problems.
    pub index: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "gaussian {i}: {:?}", self.kind),
            None => write!(f, "map: {:?}", self.kind),
        }
    }
}

const QUAT_UNIT_TOL: f64 = 1e-6;

/// Lists every invariant violation in `map`. Empty iff the map is well-formed.
pub fn validate_map(map: &GaussianMap) -> Vec<Violation> {
    let mut out = Vec::new();
    if map.sh_degree > MAX_SH_DEGREE {
        out.push(Violation {
            index: None,
            kind: ViolationKind::UnsupportedDegree(map.sh_degree),
        });
    }
    if let Some(o) = &map.origins {
        if o.len() != map.len() {
            out.push(Violation {
                index: None,
                kind: ViolationKind::OriginsLength {
                    expected: map.len(),
                    actual: o.len(),
                },
            });
        }
    }
    let expected_sh = 3 * sh_coeffs_per_channel(map.sh_degree);
    for (i, g) in map.gaussians.iter().enumerate() {
        let mut push = |kind| {
            out.push(Violation {
                index: Some(i),
                kind,
            })
        };
        if !g.position.iter().all(|v| v.is_finite()) {
            push(ViolationKind::NonFinitePosition);
        }
        let n = quaternion_norm(g.rotation);
        if !n.is_finite() || n == 0.0 {
            push(ViolationKind::DegenerateQuaternion);
        } else if (n - 1.0).abs() > QUAT_UNIT_TOL {
            push(ViolationKind::NonUnitQuaternion(n));
        }
        if g.sh.len() != expected_sh {
            push(ViolationKind::ShLength {
                expected: expected_sh,
                actual: g.sh.len(),
            });
        }
        let attrs_finite = g.scale.iter().all(|v| v.is_finite())
            && g.opacity.is_finite()
            && g.sh.iter().all(|v| v.is_finite());
        if !attrs_finite {
            push(ViolationKind::NonFiniteAttribute);
        }
    }
    out
}
