use gsmap_core::synth::{bench_report, BoxSpec, ScenePair};
use gsmap_core::update::{transform_map, Provenance};
use gsmap_core::*;

fn spec(seed: u64) -> ScenePairSpec {
    ScenePairSpec {
        seed,
        extent: 16.0,
        n_static_objects: 4,
        n_added: 2,
        n_removed: 1,
        sh_degree: 2,
        frame_offset: RigidTransform::from_axis_angle(Vec3::new(0.1, -0.2, 1.0), 0.05, Vec3::new(0.4, -0.3, 0.1)),
        ..Default::default()
    }
}

fn run(pair: &ScenePair) -> update::UpdateOutput {
    update_pipeline(
        &pair.old_map,
        &pair.submap,
        &IcpParams::default(),
        &DetectionParams::default(),
        &UpdateParams::default(),
    )
    .unwrap()
}

#[test]
fn trivial_pair_gives_empty_report() {
    let s = ScenePairSpec {
        n_added: 0,
        n_removed: 0,
        frame_offset: RigidTransform::identity(),
        ..spec(1)
    };
    let pair = gen_scene_pair(&s).unwrap();
    assert!(pair.truth.added.iter().chain(&pair.truth.removed).all(|b| !b));
    let out = run(&pair);
    assert!(out.report.is_empty());
    assert_eq!(out.icp.final_rmse, 0.0);
}

#[test]
fn noiseless_add_remove_is_detected_exactly() {
    for seed in 0..5 {
        let pair = gen_scene_pair(&spec(seed)).unwrap();
        let report = detect_changes(&pair.old_map, &pair.submap, &pair.transform, &DetectionParams::default()).unwrap();
        assert_eq!(report.ep_indices, pair.truth.ep_indices());
        assert_eq!(report.dp_indices, pair.truth.dp_indices());
        let s = eval_detection(&report, &pair.truth).unwrap();
        assert_eq!((s.ep_precision, s.ep_recall, s.dp_precision, s.dp_recall), (1.0, 1.0, 1.0, 1.0));
    }
}

#[test]
fn updated_map_covers_added_and_drops_removed() {
    let pair = gen_scene_pair(&spec(7)).unwrap();
    let out = run(&pair);
    let inside = |p: &Vec3, b: &BoxSpec, t: &RigidTransform| {
        // boxes are world-frame; the updated map lives in the submap frame
        let w = t.inverse().apply(p);
        (0..3).all(|k| w[k] >= b.min[k] - 1e-6 && w[k] <= b.max[k] + 1e-6)
    };
    for g in &out.map.gaussians {
        for b in &pair.removed_boxes {
            assert!(!inside(&g.position, b, &pair.transform));
        }
    }
    let prov = Provenance::from_map(&out.map, &out.icp.transform);
    assert_eq!(prov.emerging, pair.truth.ep_indices().len());
    let emerging: Vec<&Gaussian> = out
        .map
        .gaussians
        .iter()
        .zip(out.map.origins_vec())
        .filter(|(_, o)| *o == Origin::Emerging)
        .map(|(g, _)| g)
        .collect();
    for i in pair.truth.ep_indices() {
        assert!(emerging.iter().any(|g| g.position == pair.submap.points[i]));
    }
    for g in &emerging {
        assert!(pair.added_boxes.iter().any(|b| inside(&g.position, b, &pair.transform)));
    }
}

#[test]
fn count_identity_and_value_identity() {
    for seed in 10..14 {
        let pair = gen_scene_pair(&spec(seed)).unwrap();
        let out = run(&pair);
        let m = pair.old_map.len();
        assert_eq!(out.map.len(), m - out.report.dp_indices.len() + out.report.ep_indices.len());
        let moved = transform_map(&pair.old_map, &out.icp.transform).unwrap();
        let mut emerging = 0;
        for (g, o) in out.map.gaussians.iter().zip(out.map.origins_vec()) {
            match o {
                Origin::Carried(i) => assert_eq!(*g, moved.gaussians[i]),
                Origin::Emerging => {
                    assert_eq!(g.position, pair.submap.points[out.report.ep_indices[emerging]]);
                    emerging += 1;
                }
            }
        }
        assert_eq!(emerging, out.report.ep_indices.len());
    }
}

#[test]
fn pipeline_identical_across_thread_counts() {
    let pair = gen_scene_pair(&ScenePairSpec { sensor_noise_sigma: 0.03, ..spec(21) }).unwrap();
    let go = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(&pair))
    };
    let a = go(1);
    let b = go(4);
    assert_eq!(a.map, b.map);
    assert_eq!(a.report, b.report);
    assert_eq!(a.icp.rmse_history, b.icp.rmse_history);
    assert_eq!(a.icp.transform, b.icp.transform);
}

#[test]
fn bench_aggregates_are_row_means_and_fraction_exact() {
    let specs: Vec<_> = (0..10).map(|s| ScenePairSpec { sensor_noise_sigma: 0.04, ..spec(100 + s) }).collect();
    let rep = bench_report(&specs, &IcpParams::default(), &DetectionParams::default(), &UpdateParams::default()).unwrap();
    assert_eq!(rep.aggregate.failed, 0);
    let rows: Vec<_> = rep.rows.iter().map(|r| r.result.as_ref().unwrap()).collect();
    let mean = |f: &dyn Fn(&synth::PairResult) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
    assert!((rep.aggregate.ep_precision - mean(&|r| r.score.ep_precision)).abs() <= 1e-12);
    assert!((rep.aggregate.ep_recall - mean(&|r| r.score.ep_recall)).abs() <= 1e-12);
    assert!((rep.aggregate.dp_precision - mean(&|r| r.score.dp_precision)).abs() <= 1e-12);
    assert!((rep.aggregate.dp_recall - mean(&|r| r.score.dp_recall)).abs() <= 1e-12);
    for (row, r) in rep.rows.iter().zip(&rows) {
        assert_eq!(r.carried_fraction, 1.0 - r.dp_count as f64 / row.map_size as f64);
        assert_eq!(r.updated_size, row.map_size - r.dp_count + r.ep_count);
    }
    let json = serde_json::to_string(&rep).unwrap();
    let back: synth::BenchReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, rep);
}

#[test]
fn scores_do_not_improve_with_noise() {
    let mean_score = |sigma: f64| {
        let specs: Vec<_> = (0..6).map(|s| ScenePairSpec { sensor_noise_sigma: sigma, ..spec(200 + s) }).collect();
        let rep = bench_report(&specs, &IcpParams::default(), &DetectionParams::default(), &UpdateParams::default()).unwrap();
        let a = rep.aggregate;
        (a.ep_precision + a.ep_recall + a.dp_precision + a.dp_recall) / 4.0
    };
    let s0 = mean_score(0.0);
    let s1 = mean_score(0.02);
    let s2 = mean_score(0.05);
    assert_eq!(s0, 1.0);
    assert!(s1 <= s0 && s2 <= s1 + 1e-3, "{s0} {s1} {s2}");
}

#[test]
fn generator_is_bit_deterministic() {
    let a = gen_scene_pair(&ScenePairSpec { sensor_noise_sigma: 0.05, ..spec(3) }).unwrap();
    let b = gen_scene_pair(&ScenePairSpec { sensor_noise_sigma: 0.05, ..spec(3) }).unwrap();
    let bits = |c: &PointCloud| c.points.iter().flat_map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    assert_eq!(bits(&a.submap), bits(&b.submap));
    assert_eq!(a.old_map, b.old_map);
    assert_eq!(a.truth, b.truth);
}
