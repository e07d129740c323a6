//! Synthetic old/new scene pairs with exact change labels, and a benchmark
//! harness that runs the update pipeline over many of them.
//!
//! A scene is a jittered ground grid plus axis-aligned boxes whose visible
//! faces are sampled as points. Changed boxes (added or removed) float at
//! least `clearance` above the tallest static box and at least `clearance`
//! apart horizontally, so their samples are always far from everything else.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::change::DetectionParams;
use crate::error::{Error, Result};
use crate::model::{
    logit, normalize_quaternion, sh_coeffs_per_channel, ChangeReport, Gaussian, GaussianMap, Origin,
    PointCloud, RigidTransform, Vec3, MAX_SH_DEGREE,
};
use crate::registration::IcpParams;
use crate::update::{update_pipeline, StageTimings, UpdateParams};

/// Axis-aligned box given by its min and max corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoxSpec {
    fn valid(&self) -> bool {
        (0..3).all(|k| self.min[k].is_finite() && self.max[k].is_finite() && self.min[k] < self.max[k])
    }

    fn overlaps(&self, other: &BoxSpec) -> bool {
        (0..3).all(|k| self.min[k] < other.max[k] && other.min[k] < self.max[k])
    }

    /// Euclidean gap between the boxes (0 if they touch or overlap).
    fn gap(&self, other: &BoxSpec) -> f64 {
        (0..3)
            .map(|k| {
                let d = (other.min[k] - self.max[k]).max(self.min[k] - other.max[k]).max(0.0);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenePairSpec {
    pub seed: u64,
    /// Side length of the square ground patch centred on the origin (m).
    pub extent: f64,
    /// Ground samples per m².
    pub ground_density: f64,
    /// Box-surface samples per m².
    pub object_density: f64,
    pub n_static_objects: usize,
    pub n_added: usize,
    pub n_removed: usize,
    /// Min and max box edge length (m).
    pub object_size_range: [f64; 2],
    pub sensor_noise_sigma: f64,
    /// Old-map frame → new-submap frame.
    pub frame_offset: RigidTransform,
    /// Minimum gap between a changed box and any other structure (m).
    pub clearance: f64,
    pub sh_degree: usize,
    /// Extra changed boxes placed verbatim, in world coordinates.
    pub added_boxes: Vec<BoxSpec>,
    pub removed_boxes: Vec<BoxSpec>,
}

impl Default for ScenePairSpec {
    fn default() -> Self {
        ScenePairSpec {
            seed: 0,
            extent: 30.0,
            ground_density: 16.0,
            object_density: 16.0,
            n_static_objects: 6,
            n_added: 1,
            n_removed: 1,
            object_size_range: [1.0, 3.0],
            sensor_noise_sigma: 0.0,
            frame_offset: RigidTransform::identity(),
            clearance: 2.5,
            sh_degree: 3,
            added_boxes: Vec::new(),
            removed_boxes: Vec::new(),
        }
    }
}

impl ScenePairSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return bad("extent must be positive");
        }
        if !(self.ground_density > 0.0) || !(self.object_density > 0.0) {
            return bad("densities must be positive");
        }
        if !(self.sensor_noise_sigma >= 0.0) || !self.sensor_noise_sigma.is_finite() {
            return bad("sensor noise must be non-negative");
        }
        let [lo, hi] = self.object_size_range;
        if !(lo > 0.0) || !(lo <= hi) || !hi.is_finite() {
            return bad("object_size_range must satisfy 0 < min <= max");
        }
        if hi >= self.extent {
            return bad("objects must be smaller than the extent");
        }
        if !(self.clearance >= 0.0) || !self.clearance.is_finite() {
            return bad("clearance must be non-negative");
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::UnsupportedDegree(self.sh_degree));
        }
        if self.added_boxes.iter().chain(&self.removed_boxes).any(|b| !b.valid()) {
            return bad("boxes need finite corners with min < max");
        }
        for a in &self.added_boxes {
            if self.removed_boxes.iter().any(|r| a.overlaps(r)) {
                return bad("an added box overlaps a removed box");
            }
        }
        Ok(())
    }
}

/// Ground-truth labels in the index spaces of the generated submap and map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLabels {
    /// Per submap point: belongs to an added box.
    pub added: Vec<bool>,
    /// Per old-map Gaussian: belongs to a removed box.
    pub removed: Vec<bool>,
}

impl TruthLabels {
    pub fn ep_indices(&self) -> Vec<usize> {
        flagged(&self.added)
    }

    pub fn dp_indices(&self) -> Vec<usize> {
        flagged(&self.removed)
    }
}

fn flagged(v: &[bool]) -> Vec<usize> {
    v.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub old_map: GaussianMap,
    pub submap: PointCloud,
    pub truth: TruthLabels,
    /// Old-map frame → submap frame.
    pub transform: RigidTransform,
    pub added_boxes: Vec<BoxSpec>,
    pub removed_boxes: Vec<BoxSpec>,
}

/// Jittered grid with about `density` samples per unit area over a `w` × `h` rectangle,
/// returned as (u, v) offsets.
fn jittered_grid(rng: &mut ChaCha8Rng, w: f64, h: f64, density: f64) -> Vec<(f64, f64)> {
    let s = density.sqrt();
    let nu = ((w * s).ceil() as usize).max(1);
    let nv = ((h * s).ceil() as usize).max(1);
    let (du, dv) = (w / nu as f64, h / nv as f64);
    let mut out = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            let u = (i as f64 + rng.random_range(0.0..1.0)) * du;
            let v = (j as f64 + rng.random_range(0.0..1.0)) * dv;
            out.push((u, v));
        }
    }
    out
}

fn sample_box(rng: &mut ChaCha8Rng, b: &BoxSpec, density: f64, with_bottom: bool, out: &mut Vec<Vec3>) {
    let size = [b.max[0] - b.min[0], b.max[1] - b.min[1], b.max[2] - b.min[2]];
    // (fixed axis, u axis, v axis)
    for (fixed, u, v) in [(2, 0, 1), (0, 1, 2), (1, 0, 2)] {
        for side in [0, 1] {
            if fixed == 2 && side == 0 && !with_bottom {
                continue;
            }
            let c = if side == 0 { b.min[fixed] } else { b.max[fixed] };
            for (a, bb) in jittered_grid(rng, size[u], size[v], density) {
                let mut p = [0.0; 3];
                p[fixed] = c;
                p[u] = b.min[u] + a;
                p[v] = b.min[v] + bb;
                out.push(Vec3::new(p[0], p[1], p[2]));
            }
        }
    }
}

fn random_size(rng: &mut ChaCha8Rng, spec: &ScenePairSpec) -> [f64; 3] {
    let [lo, hi] = spec.object_size_range;
    let mut s = [0.0; 3];
    for v in &mut s {
        *v = if lo == hi { lo } else { rng.random_range(lo..hi) };
    }
    s
}

fn random_features(rng: &mut ChaCha8Rng, position: Vec3, degree: usize) -> Gaussian {
    let mut g = Gaussian::new(position, degree);
    for k in 0..3 {
        g.scale[k] = rng.random_range(0.02f64.ln()..0.3f64.ln());
    }
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if let Some(q) = normalize_quaternion(q) {
            g.rotation = q;
            break;
        }
    }
    g.opacity = logit(rng.random_range(0.1..0.98));
    let n = sh_coeffs_per_channel(degree);
    for c in 0..3 {
        for k in 0..n {
            g.sh[c * n + k] = if k == 0 {
                rng.random_range(-1.0..1.0)
            } else {
                rng.random_range(-0.3..0.3)
            };
        }
    }
    g
}

/// Generates an old map and a new submap with exact labels. Deterministic in `spec.seed`.
pub fn gen_scene_pair(spec: &ScenePairSpec) -> Result<ScenePair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = spec.extent / 2.0;

    let mut static_pts = Vec::new();
    for (u, v) in jittered_grid(&mut rng, spec.extent, spec.extent, spec.ground_density) {
        static_pts.push(Vec3::new(u - half, v - half, 0.0));
    }
    let mut top = 0.0f64;
    for _ in 0..spec.n_static_objects {
        let s = random_size(&mut rng, spec);
        let x = rng.random_range(-half..half - s[0]);
        let y = rng.random_range(-half..half - s[1]);
        let b = BoxSpec {
            min: [x, y, 0.0],
            max: [x + s[0], y + s[1], s[2]],
        };
        top = top.max(b.max[2]);
        sample_box(&mut rng, &b, spec.object_density, false, &mut static_pts);
    }

    let mut added = spec.added_boxes.clone();
    let mut removed = spec.removed_boxes.clone();
    let floor = top + spec.clearance;
    for (count, is_added) in [(spec.n_added, true), (spec.n_removed, false)] {
        for _ in 0..count {
            let mut placed = None;
            for _ in 0..1000 {
                let s = random_size(&mut rng, spec);
                let x = rng.random_range(-half..half - s[0]);
                let y = rng.random_range(-half..half - s[1]);
                let z = floor + rng.random_range(0.0..1.0);
                let b = BoxSpec {
                    min: [x, y, z],
                    max: [x + s[0], y + s[1], z + s[2]],
                };
                if added.iter().chain(&removed).all(|o| b.gap(o) >= spec.clearance) {
                    placed = Some(b);
                    break;
                }
            }
            let b = placed.ok_or_else(|| {
                Error::Spec("could not place changed boxes with the requested clearance".into())
            })?;
            if is_added {
                added.push(b);
            } else {
                removed.push(b);
            }
        }
    }

    let mut removed_pts = Vec::new();
    for b in &removed {
        sample_box(&mut rng, b, spec.object_density, true, &mut removed_pts);
    }
    let mut added_pts = Vec::new();
    for b in &added {
        sample_box(&mut rng, b, spec.object_density, true, &mut added_pts);
    }

    let mut gaussians = Vec::with_capacity(static_pts.len() + removed_pts.len());
    for p in static_pts.iter().chain(&removed_pts) {
        gaussians.push(random_features(&mut rng, *p, spec.sh_degree));
    }
    let mut removed_labels = vec![false; static_pts.len()];
    removed_labels.resize(gaussians.len(), true);
    let old_map = GaussianMap::new(gaussians, spec.sh_degree).with_frame(format!("synth-{}-old", spec.seed));

    let noise = Normal::new(0.0, spec.sensor_noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
    let mut sub = Vec::with_capacity(static_pts.len() + added_pts.len());
    for p in static_pts.iter().chain(&added_pts) {
        let mut q = *p;
        if spec.sensor_noise_sigma > 0.0 {
            for k in 0..3 {
                q[k] += noise.sample(&mut rng);
            }
        }
        sub.push(spec.frame_offset.apply(&q));
    }
    let mut added_labels = vec![false; static_pts.len()];
    added_labels.resize(sub.len(), true);

    Ok(ScenePair {
        old_map,
        submap: PointCloud::new(sub),
        truth: TruthLabels {
            added: added_labels,
            removed: removed_labels,
        },
        transform: spec.frame_offset,
        added_boxes: added,
        removed_boxes: removed,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub ep_precision: f64,
    pub ep_recall: f64,
    pub dp_precision: f64,
    pub dp_recall: f64,
    pub timings: StageTimings,
}

fn precision_recall(predicted: &[usize], truth: &[bool]) -> (f64, f64) {
    let tp = predicted.iter().filter(|&&i| truth[i]).count();
    let n_true = truth.iter().filter(|&&b| b).count();
    let precision = if predicted.is_empty() {
        1.0
    } else {
        tp as f64 / predicted.len() as f64
    };
    let recall = if n_true == 0 { 1.0 } else { tp as f64 / n_true as f64 };
    (precision, recall)
}

/// Per-class precision and recall. With no predictions precision is 1, with
/// no true members recall is 1.
pub fn eval_detection(report: &ChangeReport, truth: &TruthLabels) -> Result<DetectionScore> {
    if report.ep_mean_dist.len() != truth.added.len() || report.dp_mean_dist.len() != truth.removed.len() {
        return Err(Error::LabelMismatch(format!(
            "report covers {} submap points and {} Gaussians, labels cover {} and {}",
            report.ep_mean_dist.len(),
            report.dp_mean_dist.len(),
            truth.added.len(),
            truth.removed.len()
        )));
    }
    report
        .check_indices(truth.added.len(), truth.removed.len())
        .map_err(|e| Error::LabelMismatch(e.to_string()))?;
    let (ep_precision, ep_recall) = precision_recall(&report.ep_indices, &truth.added);
    let (dp_precision, dp_recall) = precision_recall(&report.dp_indices, &truth.removed);
    Ok(DetectionScore {
        ep_precision,
        ep_recall,
        dp_precision,
        dp_recall,
        timings: StageTimings::default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub seed: u64,
    pub map_size: usize,
    pub submap_size: usize,
    pub result: std::result::Result<PairResult, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub score: DetectionScore,
    pub ep_count: usize,
    pub dp_count: usize,
    pub updated_size: usize,
    /// Fraction of old Gaussians carried into the updated map.
    pub carried_fraction: f64,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub generate_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchAggregate {
    pub pairs: usize,
    pub failed: usize,
    pub ep_precision: f64,
    pub ep_recall: f64,
    pub dp_precision: f64,
    pub dp_recall: f64,
    pub carried_fraction: f64,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub aggregate: BenchAggregate,
}

fn run_pair(
    spec: &ScenePairSpec,
    icp: &IcpParams,
    det: &DetectionParams,
    upd: &UpdateParams,
) -> BenchRow {
    let t0 = Instant::now();
    let pair = match gen_scene_pair(spec) {
        Ok(p) => p,
        Err(e) => {
            return BenchRow {
                seed: spec.seed,
                map_size: 0,
                submap_size: 0,
                result: Err(format!("generate: {e}")),
            }
        }
    };
    let generate_seconds = t0.elapsed().as_secs_f64();
    let result = (|| {
        let out = update_pipeline(&pair.old_map, &pair.submap, icp, det, upd)?;
        let mut score = eval_detection(&out.report, &pair.truth)?;
        score.timings = out.timings;
        let m = pair.old_map.len();
        let carried = out
            .map
            .origins_vec()
            .iter()
            .filter(|o| matches!(o, Origin::Carried(_)))
            .count();
        let (rot, trans) = out.icp.transform.error_to(&pair.transform);
        Ok::<_, Error>(PairResult {
            score,
            ep_count: out.report.ep_indices.len(),
            dp_count: out.report.dp_indices.len(),
            updated_size: out.map.len(),
            carried_fraction: 1.0 - (m - carried) as f64 / m as f64,
            rotation_error_deg: rot.to_degrees(),
            translation_error: trans,
            generate_seconds,
        })
    })()
    .map_err(|e| e.to_string());
    BenchRow {
        seed: spec.seed,
        map_size: pair.old_map.len(),
        submap_size: pair.submap.len(),
        result,
    }
}

/// Generates and updates every pair (in parallel), recording failures per row.
pub fn bench_report(
    specs: &[ScenePairSpec],
    icp: &IcpParams,
    det: &DetectionParams,
    upd: &UpdateParams,
) -> Result<BenchReport> {
    if specs.is_empty() {
        return Err(Error::Spec("no scene pairs given".into()));
    }
    let rows: Vec<BenchRow> = specs.par_iter().map(|s| run_pair(s, icp, det, upd)).collect();
    let ok: Vec<&PairResult> = rows.iter().filter_map(|r| r.result.as_ref().ok()).collect();
    let mut agg = BenchAggregate {
        pairs: rows.len(),
        failed: rows.len() - ok.len(),
        ..Default::default()
    };
    if !ok.is_empty() {
        let n = ok.len() as f64;
        let mean = |f: &dyn Fn(&PairResult) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;
        agg.ep_precision = mean(&|r| r.score.ep_precision);
        agg.ep_recall = mean(&|r| r.score.ep_recall);
        agg.dp_precision = mean(&|r| r.score.dp_precision);
        agg.dp_recall = mean(&|r| r.score.dp_recall);
        agg.carried_fraction = mean(&|r| r.carried_fraction);
        agg.timings = StageTimings {
            register: mean(&|r| r.score.timings.register),
            transform: mean(&|r| r.score.timings.transform),
            detect: mean(&|r| r.score.timings.detect),
            update: mean(&|r| r.score.timings.update),
        };
    }
    Ok(BenchReport { rows, aggregate: agg })
}

impl BenchReport {
    /// Zeroes every wall-clock field so reports compare byte for byte.
    pub fn strip_timings(&mut self) {
        for row in &mut self.rows {
            if let Ok(r) = &mut row.result {
                r.score.timings = StageTimings::default();
                r.generate_seconds = 0.0;
            }
        }
        self.aggregate.timings = StageTimings::default();
    }

    /// Aligned-column text table, one line per pair plus a mean line.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7} {:>8} {:>9} {:>9}  status",
            "seed", "map", "submap", "ep", "dp", "ep_p", "ep_r", "dp_p", "dp_r", "carried", "rot_deg", "total_s"
        );
        for row in &self.rows {
            match &row.result {
                Ok(r) => {
                    let _ = writeln!(
                        s,
                        "{:>8} {:>8} {:>8} {:>6} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8.4} {:>9.2e} {:>9.3}  ok",
                        row.seed,
                        row.map_size,
                        row.submap_size,
                        r.ep_count,
                        r.dp_count,
                        r.score.ep_precision,
                        r.score.ep_recall,
                        r.score.dp_precision,
                        r.score.dp_recall,
                        r.carried_fraction,
                        r.rotation_error_deg,
                        r.score.timings.total()
                    );
                }
                Err(e) => {
                    let _ = writeln!(
                        s,
                        "{:>8} {:>8} {:>8} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7} {:>8} {:>9} {:>9}  failed: {}",
                        row.seed, row.map_size, row.submap_size, "-", "-", "-", "-", "-", "-", "-", "-", "-", e
                    );
                }
            }
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>6} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8.4} {:>9} {:>9.3}  {}/{} ok",
            "mean", "", "", "", "", a.ep_precision, a.ep_recall, a.dp_precision, a.dp_recall,
            a.carried_fraction, "", a.timings.total(), a.pairs - a.failed, a.pairs
        );
        s
    }
}
