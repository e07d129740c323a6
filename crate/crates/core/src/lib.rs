//! Structural change detection and map-prior construction for Gaussian-splat
//! maps against fresh LiDAR submaps.
//!
//! The pipeline registers the outdated map to the submap with ICP, finds
//! emerging submap points and disappearing Gaussians by mean-kNN distance,
//! carries the surviving Gaussians into the new frame (positions, orientations
//! and SH colour), and seeds new Gaussians from their nearest neighbours.

pub mod change;
pub mod depth;
pub mod error;
pub mod model;
pub mod registration;
pub mod sh;
pub mod spatial;
pub mod splat_io;
pub mod synth;
pub mod update;

pub use change::{detect_changes, detect_disappearing, detect_emerging, DetectionParams};
pub use error::{Error, Result, Stage};
pub use model::{
    validate_map, ChangeReport, Gaussian, GaussianMap, Origin, PointCloud, RigidTransform, Vec3,
};
pub use registration::{apply_transform, estimate_rigid_transform, icp_align, IcpParams, IcpResult};
pub use spatial::{KdIndex, Neighbor};
pub use update::{update_pipeline, UpdateParams};
pub use depth::{pearson_loss, DepthMap, PearsonResult};
pub use sh::{eval_sh_color, rotate_quaternion, rotate_sh, sh_rotation_from, ShRotation};
pub use splat_io::{
    assemble_submap, read_point_cloud, read_poses, read_splat_ply, write_point_cloud, write_splat_ply,
    PoseRecord,
};
pub use synth::{bench_report, eval_detection, gen_scene_pair, DetectionScore, ScenePairSpec, TruthLabels};
