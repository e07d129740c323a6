//! Scale- and shift-invariant depth agreement (one minus Pearson correlation)
//! and the depth-map readers the CLI needs.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major depth image with an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                actual: values.len(),
            });
        }
        Ok(DepthMap {
            width,
            height,
            values,
            mask: None,
        })
    }

    pub fn from_f32(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        Self::new(width, height, values.iter().map(|&v| v as f64).collect())
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                actual: mask.len(),
            });
        }
        self.mask = Some(mask);
        Ok(self)
    }

    fn valid(&self, i: usize) -> bool {
        self.values[i].is_finite() && self.mask.as_ref().is_none_or(|m| m[i])
    }

    /// `a * v + b` for every pixel; the mask is kept.
    pub fn affine(&self, a: f64, b: f64) -> DepthMap {
        DepthMap {
            values: self.values.iter().map(|v| a * v + b).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub loss: f64,
    pub n_valid: usize,
    /// Set when either map has zero variance; `loss` is then 1.0.
    pub degenerate: bool,
}

const CHUNK: usize = 1 << 14;

/// Running first and second moments of a pixel pair stream.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean_a: f64,
    mean_b: f64,
    m2_a: f64,
    m2_b: f64,
    c_ab: f64,
}

impl Moments {
    fn push(&mut self, a: f64, b: f64) {
        self.n += 1.0;
        let da = a - self.mean_a;
        let db = b - self.mean_b;
        self.mean_a += da / self.n;
        self.mean_b += db / self.n;
        let da2 = a - self.mean_a;
        let db2 = b - self.mean_b;
        self.m2_a += da * da2;
        self.m2_b += db * db2;
        self.c_ab += da * db2;
    }

    fn merge(self, o: Moments) -> Moments {
        if o.n == 0.0 {
            return self;
        }
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let da = o.mean_a - self.mean_a;
        let db = o.mean_b - self.mean_b;
        let f = self.n * o.n / n;
        Moments {
            n,
            mean_a: self.mean_a + da * o.n / n,
            mean_b: self.mean_b + db * o.n / n,
            m2_a: self.m2_a + o.m2_a + da * da * f,
            m2_b: self.m2_b + o.m2_b + db * db * f,
            c_ab: self.c_ab + o.c_ab + da * db * f,
        }
    }
}

/// `1 - corr(estimated, rendered)` over pixels valid in both maps, in `[0, 2]`.
///
/// A pixel is valid when both values are finite and neither mask excludes it.
/// Accumulation runs in fixed-size chunks merged in order, so the result does
/// not depend on scheduling.
pub fn pearson_loss(estimated: &DepthMap, rendered: &DepthMap) -> Result<PearsonResult> {
    if estimated.width != rendered.width || estimated.height != rendered.height {
        return Err(Error::DimensionMismatch(
            estimated.width,
            estimated.height,
            rendered.width,
            rendered.height,
        ));
    }
    if estimated.values.len() != estimated.width * estimated.height
        || rendered.values.len() != estimated.values.len()
    {
        return Err(Error::LengthMismatch {
            expected: estimated.width * estimated.height,
            actual: estimated.values.len().min(rendered.values.len()),
        });
    }
    use rayon::prelude::*;
    let n = estimated.values.len();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Moments> = starts
        .par_iter()
        .map(|&s| {
            let mut m = Moments::default();
            for i in s..(s + CHUNK).min(n) {
                if estimated.valid(i) && rendered.valid(i) {
                    m.push(estimated.values[i], rendered.values[i]);
                }
            }
            m
        })
        .collect();
    let m = parts.into_iter().fold(Moments::default(), Moments::merge);
    let n_valid = m.n as usize;
    if n_valid < 2 {
        return Err(Error::TooFewPixels(n_valid));
    }
    if m.m2_a <= 0.0 || m.m2_b <= 0.0 {
        warn!("zero-variance depth map; correlation undefined");
        return Ok(PearsonResult {
            loss: 1.0,
            n_valid,
            degenerate: true,
        });
    }
    let rho = (m.c_ab / (m.m2_a.sqrt() * m.m2_b.sqrt())).clamp(-1.0, 1.0);
    Ok(PearsonResult {
        loss: 1.0 - rho,
        n_valid,
        degenerate: false,
    })
}

/// Reads a single-channel PFM. Non-finite pixels end up invalid.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PFM header".into()));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(t)
    };
    let magic = token()?;
    if magic == "PF" {
        return Err(Error::Format("colour PFM not supported; expected Pf".into()));
    }
    if magic != "Pf" {
        return Err(Error::Format(format!("not a PFM file (magic {magic:?})")));
    }
    let parse = |s: String, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad PFM {what}: {s}")))
    };
    let width = parse(token()?, "width")? as usize;
    let height = parse(token()?, "height")? as usize;
    let scale = parse(token()?, "scale")?;
    // exactly one whitespace byte separates header and data
    pos += 1;
    let need = width * height * 4;
    if bytes.len() < pos + need {
        return Err(Error::Format("truncated PFM data".into()));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0; width * height];
    for row in 0..height {
        // rows are stored bottom to top
        let dst_row = height - 1 - row;
        for col in 0..width {
            let o = pos + (row * width + col) * 4;
            let b = [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            values[dst_row * width + col] = v as f64;
        }
    }
    DepthMap::new(width, height, values)
}

/// Writes a little-endian single-channel PFM (values rounded to `f32`).
pub fn write_pfm(depth: &DepthMap, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(depth.values.len() * 4 + 32);
    write!(out, "Pf\n{} {}\n-1.0\n", depth.width, depth.height).expect("vec write");
    for row in (0..depth.height).rev() {
        for col in 0..depth.width {
            out.extend_from_slice(&(depth.values[row * depth.width + col] as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a 16-bit grayscale PNG as `raw * scale`; zero pixels are masked out.
pub fn read_png16(path: &Path, scale: f64) -> Result<DepthMap> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(i) => i,
        other => {
            return Err(Error::Format(format!(
                "{}: expected 16-bit grayscale PNG, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mask = raw.iter().map(|&v| v != 0).collect();
    DepthMap::new(w, h, raw.iter().map(|&v| v as f64 * scale).collect())?.with_mask(mask)
}

/// Dispatches on extension: `.pfm` or `.png`.
pub fn read_depth(path: &Path, png_scale: f64) -> Result<DepthMap> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("pfm") => read_pfm(path),
        Some("png") => read_png16(path, png_scale),
        _ => Err(Error::Format(format!(
            "{}: unknown depth format (expected .pfm or .png)",
            path.display()
        ))),
    }
}
