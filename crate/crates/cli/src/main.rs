use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use gsmap_core::registration::apply_transform_points;
use gsmap_core::splat_io::{read_transform_json, voxel_downsample, write_json};
use gsmap_core::synth::{bench_report, ScenePairSpec};
use gsmap_core::update::Provenance;
use gsmap_core::*;

type CliResult<T = ()> = std::result::Result<T, Box<dyn StdError>>;

#[derive(Parser, Debug)]
#[command(name = "gsmap", version, about = "Update outdated Gaussian-splat maps from fresh LiDAR submaps")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Concatenate posed LiDAR scans into one submap.
    Assemble {
        /// Directory of scans (.ply, .xyz, .txt, .pts); scan id is the file stem.
        #[arg(long)]
        scans: PathBuf,
        /// JSON-lines poses, one {"scan_id", "matrix"} per line.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Voxel size for centroid downsampling of the result (m).
        #[arg(long)]
        voxel: Option<f64>,
    },
    /// Align the map's Gaussian centres to the submap with ICP.
    Register {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        submap: PathBuf,
        /// Output transform JSON.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        icp: IcpArgs,
    },
    /// Find emerging submap points and disappearing Gaussians.
    Detect {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        submap: PathBuf,
        /// Map → submap transform JSON with a "matrix" key (default identity).
        #[arg(long)]
        transform: Option<PathBuf>,
        /// Output change report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also write emerging points as PLY.
        #[arg(long)]
        ep_ply: Option<PathBuf>,
        /// Also write disappearing Gaussian centres (submap frame) as PLY.
        #[arg(long)]
        dp_ply: Option<PathBuf>,
        #[command(flatten)]
        det: DetectArgs,
    },
    /// Register, detect, remove and insert: writes the updated map and its provenance.
    Update {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        submap: PathBuf,
        /// Updated splat PLY.
        #[arg(long)]
        out: PathBuf,
        /// Provenance sidecar JSON (default: <out>.provenance.json).
        #[arg(long)]
        provenance: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        icp_out: Option<PathBuf>,
        #[command(flatten)]
        icp: IcpArgs,
        #[command(flatten)]
        det: DetectArgs,
        /// Donor Gaussians averaged per emerging point.
        #[arg(long, default_value_t = 10)]
        e: usize,
    },
    /// Write one synthetic old map / new submap pair with its labels.
    Synth {
        /// ScenePairSpec JSON (default spec if omitted).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        map_out: PathBuf,
        #[arg(long)]
        submap_out: PathBuf,
        /// Truth labels and transform JSON.
        #[arg(long)]
        truth_out: PathBuf,
    },
    /// Run the pipeline over synthetic pairs and score detection.
    Bench {
        /// ScenePairSpec JSON: one object or an array.
        #[arg(long)]
        spec: PathBuf,
        /// Report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also write the text table here (it always goes to stdout).
        #[arg(long)]
        table: Option<PathBuf>,
        /// Override the first seed; later pairs count up from it.
        #[arg(long)]
        seed: Option<u64>,
        /// Repeat each spec this many times with consecutive seeds.
        #[arg(long, default_value_t = 1)]
        pairs: usize,
        /// Zero all wall-clock fields so reports are reproducible byte for byte.
        #[arg(long)]
        no_timings: bool,
        #[command(flatten)]
        icp: IcpArgs,
        #[command(flatten)]
        det: DetectArgs,
        #[arg(long, default_value_t = 10)]
        e: usize,
    },
    /// Pearson depth loss between two depth maps (PFM or 16-bit PNG).
    Pearson {
        estimated: PathBuf,
        rendered: PathBuf,
        /// Metres per PNG unit.
        #[arg(long, default_value_t = 0.001)]
        png_scale: f64,
    },
}

#[derive(Args, Debug, Clone)]
struct IcpArgs {
    /// ICP correspondence gate (m).
    #[arg(long, default_value_t = 2.0)]
    max_dist: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Stop when the RMSE improves by less than this.
    #[arg(long, default_value_t = 1e-7)]
    icp_eps: f64,
}

impl IcpArgs {
    fn params(&self) -> IcpParams {
        IcpParams {
            max_correspondence_distance: self.max_dist,
            max_iterations: self.max_iter,
            convergence_epsilon: self.icp_eps,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct DetectArgs {
    /// Neighbours averaged per query.
    #[arg(long, default_value_t = 10)]
    h: usize,
    /// Emerging threshold (m).
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    /// Disappearing threshold (m).
    #[arg(long, default_value_t = 1.0)]
    r_prime: f64,
}

impl DetectArgs {
    fn params(&self) -> DetectionParams {
        DetectionParams {
            h: self.h,
            r: self.r,
            r_prime: self.r_prime,
        }
    }
}

fn ctx<T, E: StdError + 'static>(r: std::result::Result<T, E>, what: impl FnOnce() -> String) -> CliResult<T> {
    r.map_err(|e| format!("{}: {e}", what()).into())
}

fn load_map(p: &Path) -> CliResult<GaussianMap> {
    let m = ctx(read_splat_ply(p), || format!("reading map {}", p.display()))?;
    info!("map {}: {} gaussians, SH degree {}", p.display(), m.len(), m.sh_degree);
    Ok(m)
}

fn load_cloud(p: &Path) -> CliResult<PointCloud> {
    let c = ctx(read_point_cloud(p), || format!("reading point cloud {}", p.display()))?;
    info!("cloud {}: {} points", p.display(), c.len());
    Ok(c)
}

fn assemble(scans: &Path, poses: &Path, out: &Path, voxel: Option<f64>) -> CliResult {
    let records = ctx(read_poses(poses), || format!("reading poses {}", poses.display()))?;
    let mut files: Vec<PathBuf> = ctx(fs::read_dir(scans), || format!("listing {}", scans.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| ["ply", "xyz", "txt", "pts"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    let mut loaded = Vec::with_capacity(files.len());
    for f in &files {
        let id = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let pose = records
            .iter()
            .find(|r| r.scan_id == id)
            .ok_or_else(|| Error::MissingPose(id.clone()))?;
        loaded.push((load_cloud(f)?, pose.clone()));
    }
    for r in &records {
        if !loaded.iter().any(|(_, p)| p.scan_id == r.scan_id) {
            warn!("pose for {} has no matching scan file", r.scan_id);
        }
    }
    let mut sub = assemble_submap(&loaded)?;
    if let Some(v) = voxel {
        sub = voxel_downsample(&sub, v)?;
    }
    ctx(write_point_cloud(&sub, out), || format!("writing {}", out.display()))?;
    println!("{}", serde_json::json!({"scans": loaded.len(), "points": sub.len()}));
    Ok(())
}

fn load_specs(path: &Path, seed: Option<u64>, pairs: usize) -> CliResult<Vec<ScenePairSpec>> {
    let text = ctx(fs::read_to_string(path), || format!("reading spec {}", path.display()))?;
    let value: serde_json::Value = ctx(serde_json::from_str(&text), || format!("parsing spec {}", path.display()))?;
    let one = |v: serde_json::Value, prefix: String| -> CliResult<ScenePairSpec> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let at = e.path().to_string();
            format!("spec {}: field {prefix}{at}: {}", path.display(), e.inner()).into()
        })
    };
    let base: Vec<ScenePairSpec> = match value {
        serde_json::Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| one(v, format!("[{i}].")))
            .collect::<CliResult<_>>()?,
        v => vec![one(v, String::new())?],
    };
    let mut specs = Vec::with_capacity(base.len() * pairs);
    for s in base {
        for _ in 0..pairs {
            specs.push(s.clone());
        }
    }
    for (i, s) in specs.iter_mut().enumerate() {
        if let Some(seed) = seed {
            s.seed = seed + i as u64;
        } else if pairs > 1 {
            s.seed += (i % pairs) as u64;
        }
    }
    Ok(specs)
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        ctx(rayon::ThreadPoolBuilder::new().num_threads(n).build_global(), || "configuring threads".into())?;
    }
    match cli.command {
        Command::Assemble { scans, poses, out, voxel } => assemble(&scans, &poses, &out, voxel),
        Command::Register { map, submap, out, icp } => {
            let map = load_map(&map)?;
            let sub = load_cloud(&submap)?;
            let res = icp_align(&map.positions(), &sub, &icp.params())?;
            info!("rmse {:.4e} after {} iterations", res.final_rmse, res.iterations_used);
            write_json(&res.to_json(), &out)?;
            Ok(())
        }
        Command::Detect { map, submap, transform, out, ep_ply, dp_ply, det } => {
            let map = load_map(&map)?;
            let sub = load_cloud(&submap)?;
            let t = match transform {
                Some(p) => ctx(read_transform_json(&p), || format!("reading transform {}", p.display()))?,
                None => RigidTransform::identity(),
            };
            let report = detect_changes(&map, &sub, &t, &det.params())?;
            info!("{} emerging, {} disappearing", report.ep_indices.len(), report.dp_indices.len());
            write_json(&report, &out)?;
            if let Some(p) = ep_ply {
                write_point_cloud(&sub.select(&report.ep_indices), &p)?;
            }
            if let Some(p) = dp_ply {
                let dp: Vec<Vec3> = report.dp_indices.iter().map(|&i| map.gaussians[i].position).collect();
                write_point_cloud(&PointCloud::new(apply_transform_points(&dp, &t)), &p)?;
            }
            Ok(())
        }
        Command::Update { map, submap, out, provenance, report, icp_out, icp, det, e } => {
            let map = load_map(&map)?;
            let sub = load_cloud(&submap)?;
            let upd = UpdateParams { e, ..Default::default() };
            let res = update_pipeline(&map, &sub, &icp.params(), &det.params(), &upd)?;
            info!(
                "updated map: {} gaussians ({} removed, {} inserted) in {:.2} s",
                res.map.len(),
                res.report.dp_indices.len(),
                res.report.ep_indices.len(),
                res.timings.total()
            );
            write_splat_ply(&res.map, &out)?;
            let prov_path = provenance.unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".provenance.json");
                PathBuf::from(s)
            });
            write_json(&Provenance::from_map(&res.map, &res.icp.transform), &prov_path)?;
            if let Some(p) = report {
                write_json(&res.report, &p)?;
            }
            if let Some(p) = icp_out {
                write_json(&res.icp.to_json(), &p)?;
            }
            Ok(())
        }
        Command::Synth { spec, seed, map_out, submap_out, truth_out } => {
            let mut s = match spec {
                Some(p) => load_specs(&p, None, 1)?.remove(0),
                None => ScenePairSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let pair = gen_scene_pair(&s)?;
            write_splat_ply(&pair.old_map, &map_out)?;
            write_point_cloud(&pair.submap, &submap_out)?;
            write_json(
                &serde_json::json!({
                    "matrix": pair.transform.to_row_major(),
                    "added": pair.truth.ep_indices(),
                    "removed": pair.truth.dp_indices(),
                    "map_size": pair.old_map.len(),
                    "submap_size": pair.submap.len(),
                }),
                &truth_out,
            )?;
            Ok(())
        }
        Command::Bench { spec, out, table, seed, pairs, no_timings, icp, det, e } => {
            if pairs == 0 {
                return Err("--pairs must be at least 1".into());
            }
            let specs = load_specs(&spec, seed, pairs)?;
            let upd = UpdateParams { e, ..Default::default() };
            let mut rep = bench_report(&specs, &icp.params(), &det.params(), &upd)?;
            if no_timings {
                rep.strip_timings();
            }
            write_json(&rep, &out)?;
            let text = rep.to_table();
            if let Some(p) = table {
                ctx(fs::write(&p, &text), || format!("writing {}", p.display()))?;
            }
            print!("{text}");
            for row in &rep.rows {
                if let Err(e) = &row.result {
                    warn!("pair with seed {} failed: {e}", row.seed);
                }
            }
            Ok(())
        }
        Command::Pearson { estimated, rendered, png_scale } => {
            let a = ctx(depth::read_depth(&estimated, png_scale), || format!("reading {}", estimated.display()))?;
            let b = ctx(depth::read_depth(&rendered, png_scale), || format!("reading {}", rendered.display()))?;
            let res = pearson_loss(&a, &b)?;
            println!("{}", serde_json::to_string(&res)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
