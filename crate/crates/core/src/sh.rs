//! Real spherical harmonics in the splat-renderer convention, their rotation
//! under SO(3), and frame transfer of Gaussian orientations.
//!
//! Coefficients are band-major (l ascending, m = -l..l). The basis carries the
//! Condon-Shortley phase, e.g. band 1 is `C1 * (-y, z, -x)`.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};

use crate::error::{Error, Result};
use crate::model::{normalize_quaternion, sh_coeffs_per_channel, Gaussian, Vec3, MAX_SH_DEGREE};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

const UNIT_TOL: f64 = 1e-9;

fn check_unit(d: &Vec3) -> Result<()> {
    let n = d.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitDirection(n));
    }
    Ok(())
}

fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::UnsupportedDegree(degree));
    }
    Ok(())
}

/// Real SH basis values at a unit direction, `(degree + 1)^2` entries.
pub fn eval_real_sh_basis(degree: usize, direction: &Vec3) -> Result<Vec<f64>> {
    check_degree(degree)?;
    check_unit(direction)?;
    let mut out = vec![0.0; sh_coeffs_per_channel(degree)];
    eval_basis_into(degree, direction, &mut out);
    Ok(out)
}

pub(crate) fn eval_basis_into(degree: usize, d: &Vec3, out: &mut [f64]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = SH_C0;
    if degree < 1 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = SH_C2[0] * xy;
    out[5] = SH_C2[1] * yz;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * xz;
    out[8] = SH_C2[4] * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * xy * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
}

/// Block-diagonal rotation operator on SH coefficient space.
///
/// `blocks[l]` is the row-major `(2l+1) x (2l+1)` matrix for band `l`.
/// Applying it to the coefficients of `f` gives the coefficients of
/// `d ↦ f(Rᵀ d)`, i.e. the function carried along by `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShRotation {
    pub degree: usize,
    pub blocks: Vec<Vec<f64>>,
}

impl ShRotation {
    pub fn identity(degree: usize) -> Self {
        let blocks = (0..=degree)
            .map(|l| {
                let w = 2 * l + 1;
                let mut b = vec![0.0; w * w];
                for i in 0..w {
                    b[i * w + i] = 1.0;
                }
                b
            })
            .collect();
        ShRotation { degree, blocks }
    }

    pub fn block(&self, l: usize) -> &[f64] {
        &self.blocks[l]
    }

    /// Rotates one channel's coefficients into `out`.
    pub fn apply_channel(&self, input: &[f64], out: &mut [f64]) {
        let mut base = 0;
        for (l, b) in self.blocks.iter().enumerate() {
            let w = 2 * l + 1;
            for i in 0..w {
                let row = &b[i * w..(i + 1) * w];
                let mut acc = 0.0;
                for j in 0..w {
                    acc += row[j] * input[base + j];
                }
                out[base + i] = acc;
            }
            base += w;
        }
    }
}

/// Band-l matrix with indices centred on zero.
struct Band<'a> {
    l: i32,
    m: &'a [f64],
}

impl Band<'_> {
    #[inline]
    fn at(&self, i: i32, j: i32) -> f64 {
        let w = (2 * self.l + 1) as usize;
        self.m[(i + self.l) as usize * w + (j + self.l) as usize]
    }
}

// Ivanic–Ruedenberg recurrence helpers, in the basis without the
// Condon-Shortley phase.
fn p_term(i: i32, a: i32, b: i32, l: i32, r1: &Band, prev: &Band) -> f64 {
    if b == l {
        r1.at(i, 1) * prev.at(a, l - 1) - r1.at(i, -1) * prev.at(a, -l + 1)
    } else if b == -l {
        r1.at(i, 1) * prev.at(a, -l + 1) + r1.at(i, -1) * prev.at(a, l - 1)
    } else {
        r1.at(i, 0) * prev.at(a, b)
    }
}

fn u_term(m: i32, n: i32, l: i32, r1: &Band, prev: &Band) -> f64 {
    p_term(0, m, n, l, r1, prev)
}

fn v_term(m: i32, n: i32, l: i32, r1: &Band, prev: &Band) -> f64 {
    if m == 0 {
        p_term(1, 1, n, l, r1, prev) + p_term(-1, -1, n, l, r1, prev)
    } else if m > 0 {
        let d: f64 = if m == 1 { 1.0 } else { 0.0 };
        p_term(1, m - 1, n, l, r1, prev) * (1.0 + d).sqrt()
            - p_term(-1, -m + 1, n, l, r1, prev) * (1.0 - d)
    } else {
        let d: f64 = if m == -1 { 1.0 } else { 0.0 };
        p_term(1, m + 1, n, l, r1, prev) * (1.0 - d)
            + p_term(-1, -m - 1, n, l, r1, prev) * (1.0 + d).sqrt()
    }
}

fn w_term(m: i32, n: i32, l: i32, r1: &Band, prev: &Band) -> f64 {
    if m > 0 {
        p_term(1, m + 1, n, l, r1, prev) + p_term(-1, -m - 1, n, l, r1, prev)
    } else if m < 0 {
        p_term(1, m - 1, n, l, r1, prev) - p_term(-1, -m + 1, n, l, r1, prev)
    } else {
        0.0
    }
}

fn band_from_previous(l: i32, r1: &Band, prev: &Band) -> Vec<f64> {
    let w = (2 * l + 1) as usize;
    let mut out = vec![0.0; w * w];
    let lf = l as f64;
    for m in -l..=l {
        for n in -l..=l {
            let d = if m == 0 { 1.0 } else { 0.0 };
            let am = m.abs() as f64;
            let denom = if n.abs() == l {
                2.0 * lf * (2.0 * lf - 1.0)
            } else {
                ((l + n) * (l - n)) as f64
            };
            let u = (((l + m) * (l - m)) as f64 / denom).sqrt();
            let v = 0.5 * ((1.0 + d) * (lf + am - 1.0) * (lf + am) / denom).sqrt() * (1.0 - 2.0 * d);
            let w_c = -0.5 * ((lf - am - 1.0).max(0.0) * (lf - am) / denom).sqrt() * (1.0 - d);
            let mut val = 0.0;
            if u != 0.0 {
                val += u * u_term(m, n, l, r1, prev);
            }
            if v != 0.0 {
                val += v * v_term(m, n, l, r1, prev);
            }
            if w_c != 0.0 {
                val += w_c * w_term(m, n, l, r1, prev);
            }
            out[(m + l) as usize * w + (n + l) as usize] = val;
        }
    }
    out
}

/// Builds the per-band SH rotation for a proper rotation matrix.
pub fn sh_rotation_from(rotation: &Matrix3<f64>, degree: usize) -> Result<ShRotation> {
    check_degree(degree)?;
    let det = rotation.determinant();
    if !(det > 0.0) {
        return Err(Error::ImproperRotation(det));
    }
    let r = rotation;
    // basis order (y, z, x) for m = -1, 0, 1
    let axis = [1usize, 2, 0];
    let mut band1 = vec![0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            band1[i * 3 + j] = r[(axis[i], axis[j])];
        }
    }
    let mut blocks: Vec<Vec<f64>> = vec![vec![1.0]];
    if degree >= 1 {
        blocks.push(band1);
    }
    for l in 2..=degree {
        let next = {
            let r1 = Band { l: 1, m: &blocks[1] };
            let prev = Band {
                l: l as i32 - 1,
                m: &blocks[l - 1],
            };
            band_from_previous(l as i32, &r1, &prev)
        };
        blocks.push(next);
    }
    // conjugate by diag((-1)^m) to move into the Condon-Shortley basis
    for (l, b) in blocks.iter_mut().enumerate() {
        let li = l as i32;
        let w = 2 * l + 1;
        for i in 0..w {
            for j in 0..w {
                let mi = i as i32 - li;
                let mj = j as i32 - li;
                if (mi + mj).rem_euclid(2) == 1 {
                    b[i * w + j] = -b[i * w + j];
                }
            }
        }
    }
    Ok(ShRotation { degree, blocks })
}

/// Rotates channel-major SH coefficients (any number of channels).
pub fn rotate_sh(sh: &[f64], rot: &ShRotation) -> Result<Vec<f64>> {
    let n = sh_coeffs_per_channel(rot.degree);
    if sh.is_empty() || sh.len() % n != 0 {
        return Err(Error::LengthMismatch {
            expected: 3 * n,
            actual: sh.len(),
        });
    }
    let mut out = vec![0.0; sh.len()];
    for (src, dst) in sh.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        rot.apply_channel(src, dst);
    }
    Ok(out)
}

/// World-frame rotation of a (w, x, y, z) orientation: `quat(R) ⊗ q`, normalized.
pub fn rotate_quaternion(q: [f64; 4], rotation: &Matrix3<f64>) -> [f64; 4] {
    let rq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rotation));
    let p = rq.into_inner() * Quaternion::new(q[0], q[1], q[2], q[3]);
    let out = [p.w, p.i, p.j, p.k];
    normalize_quaternion(out).unwrap_or(out)
}

/// View-dependent RGB of a Gaussian: `clamp(0.5 + <sh_c, Y(d)>, 0, 1)` per channel.
pub fn eval_sh_color(g: &Gaussian, view_direction: &Vec3) -> Result<[f64; 3]> {
    check_unit(view_direction)?;
    let n = g.coeffs_per_channel();
    let degree = match n {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        _ => {
            return Err(Error::LengthMismatch {
                expected: 48,
                actual: g.sh.len(),
            })
        }
    };
    let mut basis = [0.0; 16];
    eval_basis_into(degree, view_direction, &mut basis[..n]);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let dot: f64 = g.sh_channel(c).iter().zip(&basis[..n]).map(|(a, b)| a * b).sum();
        *out = (0.5 + dot).clamp(0.0, 1.0);
    }
    Ok(rgb)
}
