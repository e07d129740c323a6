//! File formats: splat PLY, point-cloud PLY / XYZ text, JSON-lines poses and
//! transform JSON, plus assembly of posed scans into a submap.
//!
//! Splat PLY files are written as `binary_little_endian` with `float`
//! properties in this order:
//!
//! ```text
//! x y z  f_dc_0 f_dc_1 f_dc_2  f_rest_0 .. f_rest_{3(n-1)-1}  opacity
//! scale_0 scale_1 scale_2  rot_0 rot_1 rot_2 rot_3
//! ```
//!
//! where `n = (degree+1)^2`. `f_rest` is channel-major (all red higher-order
//! coefficients, then green, then blue); `rot_0` is the quaternion's w.
//! Scale is log-scale and opacity a logit, as stored.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    quaternion_norm, sh_coeffs_per_channel, Gaussian, GaussianMap, PointCloud, RigidTransform, Vec3,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            other => return Err(Error::Format(format!("unknown PLY type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], fmt: Format) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                (if fmt == Format::BinaryBe {
                    <$t>::from_be_bytes(a)
                } else {
                    <$t>::from_le_bytes(a)
                }) as f64
            }};
        }
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => num!(i16, 2),
            ScalarType::U16 => num!(u16, 2),
            ScalarType::I32 => num!(i32, 4),
            ScalarType::U32 => num!(u32, 4),
            ScalarType::F32 => num!(f32, 4),
            ScalarType::F64 => num!(f64, 8),
        }
    }
}

#[derive(Debug, Clone)]
enum PropKind {
    Scalar(ScalarType),
    List(ScalarType, ScalarType),
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, Clone)]
struct Header {
    format: Format,
    elements: Vec<Element>,
    comments: Vec<String>,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut line = String::new();
    let next_line = |r: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        let n = r
            .read_line(line)
            .map_err(|e| Error::Format(format!("reading PLY header: {e}")))?;
        if n == 0 {
            return Err(Error::Format("unexpected end of PLY header".into()));
        }
        Ok(())
    };
    next_line(r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::Format("not a PLY file".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut comments = Vec::new();
    loop {
        next_line(r, &mut line)?;
        let l = line.trim_end_matches(['\r', '\n']);
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some("binary_big_endian") => Format::BinaryBe,
                    other => return Err(Error::Format(format!("unsupported PLY format {other:?}"))),
                });
            }
            Some("comment") => comments.push(l.trim_start()["comment".len()..].trim().to_string()),
            Some("obj_info") | None => {}
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| Error::Format("element without name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| Error::Format(format!("bad count for element {name}")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before any element".into()))?;
                let t = tok
                    .next()
                    .ok_or_else(|| Error::Format("property without type".into()))?;
                let kind = if t == "list" {
                    let ct = ScalarType::parse(tok.next().unwrap_or(""))?;
                    let it = ScalarType::parse(tok.next().unwrap_or(""))?;
                    PropKind::List(ct, it)
                } else {
                    PropKind::Scalar(ScalarType::parse(t)?)
                };
                let name = tok
                    .next()
                    .ok_or_else(|| Error::Format("property without name".into()))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            Some("end_header") => break,
            Some(other) => return Err(Error::Format(format!("unexpected header line {other}"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| Error::Format("missing format line".into()))?,
        elements,
        comments,
    })
}

/// Streams the rows of the `vertex` element (scalar properties only, lists
/// skipped) to `f`, skipping any elements stored before it.
fn for_each_vertex<R: BufRead>(
    r: &mut R,
    header: &Header,
    mut f: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<()> {
    let fmt = header.format;
    let mut ascii_line = String::new();
    let mut ascii_lineno = 0usize;
    for el in &header.elements {
        let is_vertex = el.name == "vertex";
        let scalars = el.props.iter().filter(|p| matches!(p.kind, PropKind::Scalar(_))).count();
        let mut row = vec![0.0f64; scalars];
        let fixed: Option<usize> = el
            .props
            .iter()
            .map(|p| match p.kind {
                PropKind::Scalar(t) => Some(t.size()),
                PropKind::List(..) => None,
            })
            .sum();
        let mut buf = vec![0u8; fixed.unwrap_or(8)];
        for i in 0..el.count {
            match fmt {
                Format::Ascii => {
                    ascii_line.clear();
                    ascii_lineno += 1;
                    let n = r
                        .read_line(&mut ascii_line)
                        .map_err(|e| Error::Format(format!("reading PLY body: {e}")))?;
                    if n == 0 {
                        return Err(Error::Format(format!("PLY body ends early in element {}", el.name)));
                    }
                    if !is_vertex {
                        continue;
                    }
                    let mut tok = ascii_line.split_whitespace();
                    let mut k = 0;
                    for p in &el.props {
                        let mut next = || -> Result<f64> {
                            let t = tok.next().ok_or_else(|| Error::Parse {
                                line: ascii_lineno,
                                msg: "too few values".into(),
                            })?;
                            t.parse::<f64>().map_err(|_| Error::Parse {
                                line: ascii_lineno,
                                msg: format!("bad number {t:?}"),
                            })
                        };
                        match p.kind {
                            PropKind::Scalar(_) => {
                                row[k] = next()?;
                                k += 1;
                            }
                            PropKind::List(..) => {
                                let c = next()? as usize;
                                for _ in 0..c {
                                    next()?;
                                }
                            }
                        }
                    }
                    f(i, &row)?;
                }
                Format::BinaryLe | Format::BinaryBe => {
                    if let Some(size) = fixed {
                        r.read_exact(&mut buf[..size])
                            .map_err(|_| Error::Format(format!("PLY body ends early in element {}", el.name)))?;
                        if !is_vertex {
                            continue;
                        }
                        let mut off = 0;
                        for (k, p) in el.props.iter().enumerate() {
                            if let PropKind::Scalar(t) = p.kind {
                                row[k] = t.decode(&buf[off..], fmt);
                                off += t.size();
                            }
                        }
                    } else {
                        let mut k = 0;
                        for p in &el.props {
                            match p.kind {
                                PropKind::Scalar(t) => {
                                    r.read_exact(&mut buf[..t.size()]).map_err(|_| {
                                        Error::Format(format!("PLY body ends early in element {}", el.name))
                                    })?;
                                    row[k] = t.decode(&buf, fmt);
                                    k += 1;
                                }
                                PropKind::List(ct, it) => {
                                    r.read_exact(&mut buf[..ct.size()])
                                        .map_err(|_| Error::Format("truncated list".into()))?;
                                    let c = ct.decode(&buf, fmt) as usize;
                                    let mut skip = vec![0u8; c * it.size()];
                                    r.read_exact(&mut skip)
                                        .map_err(|_| Error::Format("truncated list".into()))?;
                                }
                            }
                        }
                        if !is_vertex {
                            continue;
                        }
                    }
                    f(i, &row)?;
                }
            }
        }
        if is_vertex {
            return Ok(());
        }
    }
    Err(Error::Format("PLY has no vertex element".into()))
}

fn vertex_element(header: &Header) -> Result<&Element> {
    header
        .elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format("PLY has no vertex element".into()))
}

/// Column index (among scalar properties) of each property name.
fn scalar_columns(el: &Element) -> HashMap<&str, usize> {
    el.props
        .iter()
        .filter(|p| matches!(p.kind, PropKind::Scalar(_)))
        .enumerate()
        .map(|(i, p)| (p.name.as_str(), i))
        .collect()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::with_capacity(
        1 << 20,
        File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

const FRAME_COMMENT: &str = "frame ";

/// Reads a splat PLY. Quaternions farther than 1e-6 from unit norm are normalized.
pub fn read_splat_ply(path: &Path) -> Result<GaussianMap> {
    let mut r = open(path)?;
    let header = read_header(&mut r)?;
    let el = vertex_element(&header)?;
    let cols = scalar_columns(el);

    let mut rest = 0;
    while cols.contains_key(format!("f_rest_{rest}").as_str()) {
        rest += 1;
    }
    let degree = match rest {
        0 => 0,
        9 => 1,
        24 => 2,
        45 => 3,
        n => {
            return Err(Error::Format(format!(
                "{n} f_rest properties do not match any SH degree up to 3"
            )))
        }
    };
    let mut required: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    required.extend((0..rest).map(|i| format!("f_rest_{i}")));
    required.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut idx = Vec::with_capacity(required.len());
    for name in &required {
        idx.push(*cols.get(name.as_str()).ok_or_else(|| Error::MissingProperty(name.clone()))?);
    }
    if el.count == 0 {
        return Err(Error::EmptyMap);
    }

    let n = sh_coeffs_per_channel(degree);
    let per_rest = n - 1;
    let mut gaussians = Vec::with_capacity(el.count);
    let mut renormalized = 0usize;
    for_each_vertex(&mut r, &header, |_, row| {
        let v = |k: usize| row[idx[k]];
        let mut sh = vec![0.0; 3 * n];
        for c in 0..3 {
            sh[c * n] = v(3 + c);
            for k in 0..per_rest {
                sh[c * n + 1 + k] = v(6 + c * per_rest + k);
            }
        }
        let base = 6 + 3 * per_rest;
        let mut g = Gaussian {
            position: Vec3::new(v(0), v(1), v(2)),
            opacity: v(base),
            scale: Vec3::new(v(base + 1), v(base + 2), v(base + 3)),
            rotation: [v(base + 4), v(base + 5), v(base + 6), v(base + 7)],
            sh,
        };
        if (quaternion_norm(g.rotation) - 1.0).abs() > 1e-6 {
            if g.normalize_rotation() {
                renormalized += 1;
            } else {
                warn!("gaussian {} has a degenerate quaternion", gaussians.len());
            }
        }
        gaussians.push(g);
        Ok(())
    })?;
    if renormalized > 0 {
        log::debug!("normalized {renormalized} quaternions on load");
    }
    let frame_label = header
        .comments
        .iter()
        .find_map(|c| c.strip_prefix(FRAME_COMMENT))
        .unwrap_or("")
        .to_string();
    Ok(GaussianMap {
        gaussians,
        sh_degree: degree,
        frame_label,
        origins: None,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::with_capacity(
        1 << 20,
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// Splat property names in file order for a given SH degree.
pub fn splat_property_names(degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * (sh_coeffs_per_channel(degree) - 1)).map(|i| format!("f_rest_{i}")));
    names.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
            .iter()
            .map(|s| s.to_string()),
    );
    names
}

/// Writes a binary little-endian splat PLY with `float` properties.
pub fn write_splat_ply(map: &GaussianMap, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    let names = splat_property_names(map.sh_degree);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    if !map.frame_label.is_empty() && !map.frame_label.contains('\n') {
        header.push_str(&format!("comment {FRAME_COMMENT}{}\n", map.frame_label));
    }
    header.push_str(&format!("element vertex {}\n", map.len()));
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;

    let n = sh_coeffs_per_channel(map.sh_degree);
    let mut row: Vec<u8> = Vec::with_capacity(names.len() * 4);
    for (i, g) in map.gaussians.iter().enumerate() {
        if g.sh.len() != 3 * n {
            return Err(Error::Format(format!(
                "gaussian {i} has {} SH values, map degree {} needs {}",
                g.sh.len(),
                map.sh_degree,
                3 * n
            )));
        }
        row.clear();
        let mut put = |v: f64| row.extend_from_slice(&(v as f32).to_le_bytes());
        g.position.iter().for_each(|&v| put(v));
        for c in 0..3 {
            put(g.sh[c * n]);
        }
        for c in 0..3 {
            for k in 1..n {
                put(g.sh[c * n + k]);
            }
        }
        put(g.opacity);
        g.scale.iter().for_each(|&v| put(v));
        g.rotation.iter().for_each(|&v| put(v));
        w.write_all(&row).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a point cloud from PLY (x, y, z; other properties ignored) or
/// whitespace-delimited text (first three columns; `#` comments allowed).
pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let is_ply = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        read_point_cloud_ply(path)
    } else {
        read_xyz(path)
    }
}

fn read_point_cloud_ply(path: &Path) -> Result<PointCloud> {
    let mut r = open(path)?;
    let header = read_header(&mut r)?;
    let el = vertex_element(&header)?;
    let cols = scalar_columns(el);
    let mut xyz = [0usize; 3];
    for (k, name) in ["x", "y", "z"].iter().enumerate() {
        xyz[k] = *cols.get(name).ok_or_else(|| Error::MissingProperty(name.to_string()))?;
    }
    let mut points = Vec::with_capacity(el.count);
    for_each_vertex(&mut r, &header, |i, row| {
        let p = Vec3::new(row[xyz[0]], row[xyz[1]], row[xyz[2]]);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        points.push(p);
        Ok(())
    })?;
    Ok(PointCloud::new(points))
}

fn read_xyz(path: &Path) -> Result<PointCloud> {
    let r = open(path)?;
    let mut points = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut p = [0.0; 3];
        let mut tok = body.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty());
        for v in &mut p {
            let t = tok.next().ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "expected three coordinates".into(),
            })?;
            *v = t.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad number {t:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite coordinate {t:?}"),
                });
            }
        }
        points.push(Vec3::new(p[0], p[1], p[2]));
    }
    Ok(PointCloud::new(points))
}

/// Writes `x y z` as binary little-endian `float` PLY.
pub fn write_point_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )
    .map_err(io)?;
    for p in &cloud.points {
        for v in p.iter() {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Sensor → world pose of one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub scan_id: String,
    #[serde(rename = "matrix")]
    pub transform: RigidTransform,
}

/// Reads JSON-lines poses: `{"scan_id": "...", "matrix": [16 row-major floats]}` per line.
pub fn read_poses(path: &Path) -> Result<Vec<PoseRecord>> {
    let r = open(path)?;
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_poses(poses: &[PoseRecord], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    for p in poses {
        serde_json::to_writer(&mut w, p).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Concatenates scans in order, each moved into the world frame by its pose.
pub fn assemble_submap(scans: &[(PointCloud, PoseRecord)]) -> Result<PointCloud> {
    if scans.is_empty() {
        return Err(Error::EmptyScanList);
    }
    let total = scans.iter().map(|(c, _)| c.len()).sum();
    let mut points = Vec::with_capacity(total);
    for (cloud, pose) in scans {
        points.extend(cloud.points.iter().map(|p| pose.transform.apply(p)));
    }
    Ok(PointCloud::new(points))
}

/// Replaces the points in each occupied voxel by their centroid. Voxels are
/// emitted in order of first occupancy.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) {
        return Err(Error::InvalidParam("voxel size must be positive".into()));
    }
    let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
    let mut sums: Vec<(Vec3, usize)> = Vec::new();
    for p in &cloud.points {
        let key = [
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        ];
        let slot = *slots.entry(key).or_insert_with(|| {
            sums.push((Vec3::zeros(), 0));
            sums.len() - 1
        });
        sums[slot].0 += p;
        sums[slot].1 += 1;
    }
    Ok(PointCloud::new(
        sums.into_iter().map(|(s, n)| s / n as f64).collect(),
    ))
}

/// Reads a transform from a JSON object carrying a 16-float row-major `"matrix"`.
pub fn read_transform_json(path: &Path) -> Result<RigidTransform> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let arr = v
        .get("matrix")
        .and_then(|m| m.as_array())
        .ok_or_else(|| Error::Format(format!("{}: missing \"matrix\" array", path.display())))?;
    let m: Vec<f64> = arr
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| Error::Format("matrix entries must be numbers".into())))
        .collect::<Result<_>>()?;
    RigidTransform::from_row_major(&m, 1e-6)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tiny_map() -> GaussianMap {
        let mut a = Gaussian::new(Vec3::new(1.0, 2.0, 3.0), 3);
        let mut b = Gaussian::new(Vec3::new(-1.5, 0.25, 8.0), 3);
        for (k, v) in a.sh.iter_mut().enumerate() {
            *v = k as f64 * 0.125;
        }
        b.scale = Vec3::new(-1.0, -2.0, -3.0);
        b.opacity = 0.5;
        GaussianMap::new(vec![a, b], 3).with_frame("session-a")
    }

    #[test]
    fn write_then_read_small_map() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        let m = tiny_map();
        write_splat_ply(&m, &p).unwrap();
        let back = read_splat_ply(&p).unwrap();
        assert_eq!(back, m);
        assert!(crate::model::validate_map(&back).is_empty());
        assert_eq!(back.frame_label, "session-a");
    }

    #[test]
    fn empty_map_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ply");
        write_splat_ply(&GaussianMap::empty(3), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(text.ends_with("end_header\n"));
        assert!(matches!(read_splat_ply(&p), Err(Error::EmptyMap)));
    }

    #[test]
    fn missing_rot_3_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        let mut text = String::from("ply\nformat ascii 1.0\nelement vertex 1\n");
        for n in splat_property_names(0) {
            if n != "rot_3" {
                text.push_str(&format!("property float {n}\n"));
            }
        }
        text.push_str("end_header\n0 0 0 0 0 0 0 0 0 0 1 0 0\n");
        fs::write(&p, text).unwrap();
        let err = read_splat_ply(&p).unwrap_err();
        assert_eq!(err.to_string(), "missing property rot_3");
    }

    #[test]
    fn ascii_splat_with_normals_and_unnormalized_quat() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        let mut text = String::from("ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 1\n");
        let mut names = vec!["x", "y", "z", "nx", "ny", "nz"];
        names.extend(["f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2"]);
        names.extend(["rot_0", "rot_1", "rot_2", "rot_3"]);
        for n in &names {
            text.push_str(&format!("property float {n}\n"));
        }
        text.push_str("end_header\n1 2 3 0 0 1 0.1 0.2 0.3 -1 -2 -2 -2 2 0 0 0\n");
        fs::write(&p, text).unwrap();
        let m = read_splat_ply(&p).unwrap();
        assert_eq!(m.sh_degree, 0);
        assert_eq!(m.gaussians[0].rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.gaussians[0].sh, vec![0.1f32 as f64, 0.2f32 as f64, 0.3f32 as f64].iter().map(|v| (*v as f32) as f64).collect::<Vec<_>>().iter().map(|_| 0.0).zip([0.1, 0.2, 0.3]).map(|(_, v)| v).collect::<Vec<f64>>());
    }

    #[test]
    fn xyz_text_reading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.xyz");
        fs::write(&p, "# header\n1 2 3\n4 5 6 99\n\n7.5 8 -9\n").unwrap();
        let c = read_point_cloud(&p).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.points[2], Vec3::new(7.5, 8.0, -9.0));
        fs::write(&p, "1 2 3\n1 2 nan\n").unwrap();
        assert!(matches!(read_point_cloud(&p), Err(Error::Parse { line: 2, .. })));
        fs::write(&p, "1 2 3\n1 2\n").unwrap();
        assert!(matches!(read_point_cloud(&p), Err(Error::Parse { line: 2, .. })));
        fs::write(&p, "1 2 x\n").unwrap();
        assert!(matches!(read_point_cloud(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn point_ply_with_extra_properties_and_faces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\nproperty float intensity\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n".to_vec();
        for (x, i, y, z) in [(1.0f64, 7.0f32, 2.0f64, 3.0f64), (4.0, 8.0, 5.0, 6.0)] {
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.extend_from_slice(&i.to_le_bytes());
            bytes.extend_from_slice(&y.to_le_bytes());
            bytes.extend_from_slice(&z.to_le_bytes());
        }
        bytes.push(3);
        for v in [0i32, 1, 0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        let c = read_point_cloud(&p).unwrap();
        assert_eq!(c.points, vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]);
    }

    #[test]
    fn point_ply_rejects_non_finite_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n1 inf 1\n",
        )
        .unwrap();
        assert!(matches!(read_point_cloud(&p), Err(Error::NonFinite(2))));
    }

    #[test]
    fn point_cloud_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        let c = PointCloud::new(vec![Vec3::new(0.5, -1.25, 3.0), Vec3::new(1e3, 2.0, -7.75)]);
        write_point_cloud(&c, &p).unwrap();
        assert_eq!(read_point_cloud(&p).unwrap(), c);
    }

    #[test]
    fn assemble_cases() {
        assert!(matches!(assemble_submap(&[]), Err(Error::EmptyScanList)));
        let c = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)]);
        let id = PoseRecord {
            scan_id: "a".into(),
            transform: RigidTransform::identity(),
        };
        assert_eq!(assemble_submap(&[(c.clone(), id)]).unwrap(), c);
        let p1 = PoseRecord {
            scan_id: "a".into(),
            transform: RigidTransform::from_translation(Vec3::x()),
        };
        let p2 = PoseRecord {
            scan_id: "b".into(),
            transform: RigidTransform::from_translation(Vec3::y()),
        };
        let c2 = PointCloud::new(vec![Vec3::new(-1.0, 0.0, 0.0)]);
        let out = assemble_submap(&[(c.clone(), p1), (c2, p2)]).unwrap();
        assert_eq!(out.points, vec![Vec3::new(2.0, 2.0, 3.0), Vec3::new(-1.0, 1.0, 0.0)]);
    }

    #[test]
    fn poses_jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poses.jsonl");
        let poses = vec![
            PoseRecord {
                scan_id: "s0".into(),
                transform: RigidTransform::from_axis_angle(Vec3::z(), 0.3, Vec3::new(1.0, 2.0, 3.0)),
            },
            PoseRecord {
                scan_id: "s1".into(),
                transform: RigidTransform::identity(),
            },
        ];
        write_poses(&poses, &p).unwrap();
        let back = read_poses(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].scan_id, "s0");
        assert!((back[0].transform.rotation - poses[0].transform.rotation).abs().max() < 1e-15);
        fs::write(&p, "{\"scan_id\": \"a\", \"matrix\": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}\n{\"scan_id\": \"b\", \"matrix\": [2]}\n").unwrap();
        assert!(matches!(read_poses(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn voxel_downsample_merges_cells() {
        let c = PointCloud::new(vec![
            Vec3::new(0.1, 0.1, 0.1),
            Vec3::new(0.3, 0.3, 0.3),
            Vec3::new(1.5, 0.0, 0.0),
        ]);
        let d = voxel_downsample(&c, 1.0).unwrap();
        assert_eq!(d.len(), 2);
        assert!((d.points[0] - Vec3::new(0.2, 0.2, 0.2)).norm() < 1e-12);
        assert!(voxel_downsample(&c, 0.0).is_err());
    }

    #[test]
    fn transform_json_reading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        let t = RigidTransform::from_axis_angle(Vec3::new(1.0, 1.0, 0.0), 0.4, Vec3::new(0.0, 1.0, 2.0));
        fs::write(&p, serde_json::json!({"matrix": t.to_row_major(), "rmse": 0.0}).to_string()).unwrap();
        let back = read_transform_json(&p).unwrap();
        assert!((back.rotation - t.rotation).abs().max() < 1e-15);
        fs::write(&p, "{\"matrix\": [1, 2]}").unwrap();
        assert!(read_transform_json(&p).is_err());
        fs::write(&p, "not json").unwrap();
        assert!(matches!(read_transform_json(&p), Err(Error::Parse { .. })));
    }
}
