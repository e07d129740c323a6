use std::fs;
use std::path::PathBuf;

use gsmap_core::model::normalize_quaternion;
use gsmap_core::splat_io::{voxel_downsample, write_poses};
use gsmap_core::synth::{gen_scene_pair, ScenePairSpec};
use gsmap_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn random_map(seed: u64, n: usize, degree: usize) -> GaussianMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 3 * (degree + 1) * (degree + 1);
    let gs = (0..n)
        .map(|_| {
            let mut g = Gaussian::new(
                Vec3::new(
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-10.0..10.0),
                ),
                degree,
            );
            g.scale = Vec3::new(
                rng.random_range(-6.0..0.0),
                rng.random_range(-6.0..0.0),
                rng.random_range(-6.0..0.0),
            );
            g.rotation = normalize_quaternion(std::array::from_fn(|_| rng.random_range(-1.0..1.0))).unwrap();
            g.sh = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            g.opacity = rng.random_range(-8.0..8.0);
            g
        })
        .collect();
    let mut m = GaussianMap::new(gs, degree);
    m.quantize_to_storage();
    m
}

/// Expected contents of the reference files (see tests/data/make_golden.py).
fn golden_expected() -> GaussianMap {
    let g = |xyz: [f64; 3], dc: [f64; 3], rest: [f64; 9], opacity: f64, scale: [f64; 3], rot: [f64; 4]| {
        let mut sh = vec![0.0; 12];
        for c in 0..3 {
            sh[c * 4] = dc[c];
            for k in 0..3 {
                sh[c * 4 + 1 + k] = rest[c * 3 + k];
            }
        }
        Gaussian {
            position: Vec3::from(xyz),
            scale: Vec3::from(scale),
            rotation: rot,
            sh,
            opacity,
        }
    };
    let up: [f64; 9] = std::array::from_fn(|k| k as f64 / 8.0);
    GaussianMap::new(
        vec![
            g(
                [1.0, -2.0, 0.5],
                [0.25, -0.5, 0.125],
                std::array::from_fn(|k| (k as f64 - 4.0) / 8.0),
                -1.5,
                [-2.0, -2.5, -3.0],
                [1.0, 0.0, 0.0, 0.0],
            ),
            g([10.125, 3.75, -7.0], [1.0, 0.0, -1.0], up, 2.25, [-1.0, -1.0, -0.5], [0.5, 0.5, 0.5, 0.5]),
            g(
                [0.0, 0.0, 0.0],
                [-0.375, 0.625, 0.0],
                up.map(|v| -v),
                0.0,
                [-4.0, -3.5, -3.0],
                [0.0, 0.0, 0.6f32 as f64, 0.8f32 as f64],
            ),
        ],
        1,
    )
}

#[test]
fn golden_reference_file_reads_to_expected_values() {
    let m = read_splat_ply(&data("golden_3dgs_deg1.ply")).unwrap();
    let expect = golden_expected();
    assert_eq!(m.sh_degree, 1);
    assert_eq!(m.gaussians, expect.gaussians);
    // R channel of gaussian 0: DC then f_rest_0..2
    assert_eq!(m.gaussians[0].sh_channel(0), &[0.25, -0.5, -0.375, -0.25]);
    // B channel of gaussian 1: DC then f_rest_6..8
    assert_eq!(m.gaussians[1].sh_channel(2), &[-1.0, 0.75, 0.875, 1.0]);
}

#[test]
fn writer_reproduces_canonical_reference_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.ply");
    let m = read_splat_ply(&data("golden_3dgs_deg1.ply")).unwrap();
    write_splat_ply(&m, &out).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(data("golden_canonical_deg1.ply")).unwrap());
}

#[test]
fn round_trip_10k_bit_exact_every_degree() {
    let dir = tempfile::tempdir().unwrap();
    for degree in 0..=3 {
        let m = random_map(degree as u64, 10_000, degree);
        let p = dir.path().join(format!("m{degree}.ply"));
        write_splat_ply(&m, &p).unwrap();
        let back = read_splat_ply(&p).unwrap();
        assert_eq!(back.sh_degree, degree);
        assert_eq!(back.len(), m.len());
        for (a, b) in m.gaussians.iter().zip(&back.gaussians) {
            assert_eq!(a.position.map(f64::to_bits), b.position.map(f64::to_bits));
            assert_eq!(a.scale.map(f64::to_bits), b.scale.map(f64::to_bits));
            assert_eq!(a.rotation.map(f64::to_bits), b.rotation.map(f64::to_bits));
            assert_eq!(a.opacity.to_bits(), b.opacity.to_bits());
            assert_eq!(
                a.sh.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.sh.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn synth_map_100k_byte_identical_after_read_write() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ScenePairSpec {
        extent: 78.0,
        ground_density: 16.0,
        n_static_objects: 10,
        ..Default::default()
    };
    let mut map = gen_scene_pair(&spec).unwrap().old_map;
    map.gaussians.truncate(100_000);
    assert_eq!(map.len(), 100_000);
    let a = dir.path().join("a.ply");
    let b = dir.path().join("b.ply");
    write_splat_ply(&map, &a).unwrap();
    let back = read_splat_ply(&a).unwrap();
    assert_eq!(back.len(), 100_000);
    write_splat_ply(&back, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn big_endian_and_double_properties_are_read() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("be.ply");
    let mut names = vec!["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"];
    names.extend(["scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]);
    let mut bytes = b"ply\nformat binary_big_endian 1.0\nelement vertex 1\n".to_vec();
    for n in &names {
        bytes.extend_from_slice(format!("property double {n}\n").as_bytes());
    }
    bytes.extend_from_slice(b"end_header\n");
    let vals = [0.1, 0.2, 0.3, 1.0, 2.0, 3.0, 0.5, -1.0, -2.0, -3.0, 0.0, 1.0, 0.0, 0.0];
    for v in vals {
        bytes.extend_from_slice(&f64::to_be_bytes(v));
    }
    fs::write(&p, bytes).unwrap();
    let m = read_splat_ply(&p).unwrap();
    let g = &m.gaussians[0];
    assert_eq!(g.position, Vec3::new(0.1, 0.2, 0.3));
    assert_eq!(g.sh, vec![1.0, 2.0, 3.0]);
    assert_eq!(g.rotation, [0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn unexpected_rest_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("odd.ply");
    let mut text = String::from("ply\nformat ascii 1.0\nelement vertex 1\n");
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].iter().map(|s| s.to_string()).collect();
    names.extend((0..5).map(|i| format!("f_rest_{i}")));
    names.extend(["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"].iter().map(|s| s.to_string()));
    for n in &names {
        text.push_str(&format!("property float {n}\n"));
    }
    text.push_str("end_header\n");
    text.push_str(&vec!["0"; names.len()].join(" "));
    text.push('\n');
    fs::write(&p, text).unwrap();
    assert!(read_splat_ply(&p).is_err());
}

#[test]
fn truncated_binary_body_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.ply");
    write_splat_ply(&random_map(1, 10, 0), &p).unwrap();
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
    assert!(read_splat_ply(&p).is_err());
}

fn scans(seed: u64) -> Vec<(PointCloud, PoseRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|s| {
            let pts = (0..50)
                .map(|_| Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..5.0)))
                .collect();
            let pose = RigidTransform::from_axis_angle(
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0),
                rng.random_range(-3.0..3.0),
                Vec3::new(s as f64 * 5.0, rng.random_range(-1.0..1.0), 0.0),
            );
            (PointCloud::new(pts), PoseRecord { scan_id: format!("scan{s}"), transform: pose })
        })
        .collect()
}

#[test]
fn assemble_is_equivariant() {
    let base = scans(3);
    let t = RigidTransform::from_axis_angle(Vec3::new(0.3, 0.4, -1.0), 1.1, Vec3::new(100.0, -40.0, 3.0));
    let moved: Vec<_> = base
        .iter()
        .map(|(c, p)| {
            (c.clone(), PoseRecord { scan_id: p.scan_id.clone(), transform: t.compose(&p.transform) })
        })
        .collect();
    let a = apply_transform(&assemble_submap(&base).unwrap(), &t);
    let b = assemble_submap(&moved).unwrap();
    assert_eq!(a.len(), 200);
    for (p, q) in a.points.iter().zip(&b.points) {
        assert!((p - q).norm() < 1e-9);
    }
}

#[test]
fn posed_scans_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scans(4);
    let mut poses = Vec::new();
    for (c, p) in &sc {
        write_point_cloud(c, &dir.path().join(format!("{}.ply", p.scan_id))).unwrap();
        poses.push(p.clone());
    }
    write_poses(&poses, &dir.path().join("poses.jsonl")).unwrap();
    let poses = read_poses(&dir.path().join("poses.jsonl")).unwrap();
    let loaded: Vec<_> = poses
        .iter()
        .map(|p| (read_point_cloud(&dir.path().join(format!("{}.ply", p.scan_id))).unwrap(), p.clone()))
        .collect();
    let sub = assemble_submap(&loaded).unwrap();
    let direct = assemble_submap(&sc).unwrap();
    for (p, q) in sub.points.iter().zip(&direct.points) {
        // clouds were stored as f32
        assert!((p - q).norm() < 1e-4);
    }
    let coarse = voxel_downsample(&sub, 2.0).unwrap();
    assert!(coarse.len() <= sub.len() && !coarse.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_stored_map_round_trips(seed in 0u64..1000, n in 1usize..40, degree in 0usize..=3) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.ply");
        let m = random_map(seed, n, degree);
        write_splat_ply(&m, &p).unwrap();
        prop_assert_eq!(read_splat_ply(&p).unwrap(), m);
    }

    #[test]
    fn assemble_equivariance_holds(seed in 0u64..1000, angle in -3.1f64..3.1, tx in -50.0f64..50.0) {
        let base = scans(seed);
        let t = RigidTransform::from_axis_angle(Vec3::new(1.0, -0.5, 0.25), angle, Vec3::new(tx, 1.0, -2.0));
        let moved: Vec<_> = base.iter().map(|(c, p)| (c.clone(), PoseRecord { scan_id: p.scan_id.clone(), transform: t.compose(&p.transform) })).collect();
        let a = apply_transform(&assemble_submap(&base).unwrap(), &t);
        let b = assemble_submap(&moved).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!((p - q).norm() < 1e-9);
        }
    }
}
