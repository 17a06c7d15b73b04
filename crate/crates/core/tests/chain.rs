//! End-to-end checks across the core stages.

use mosaic_core::consensus::{reestimate_all_edges, ReestimateConfig};
use mosaic_core::frontend::{estimate_pairwise, generate_scene, RansacConfig};
use mosaic_core::geometry::{
    relative_from_global, rotation_geodesic_angle, AxisAngle, RigidTransform, Rotation, Vec3,
};
use mosaic_core::graph::{
    build_graph, CorrespondenceSet, Edge, PairwiseResult, PoseGraph, Vertex, EDGE_WEIGHT_FLOOR,
};
use mosaic_core::metrics::{multiway_metrics, MetricsConfig};
use mosaic_core::position_averaging::{average_positions, PosAvgConfig};
use mosaic_core::refinement::{refine_poses, RefineConfig};
use mosaic_core::rotation_averaging::{align_rotations_to_truth, average_rotations, RotAvgConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_pose(rng: &mut impl Rng, spread: f64) -> RigidTransform {
    let w = Vec3::new(
        rng.random_range(-1.5..1.5),
        rng.random_range(-1.5..1.5),
        rng.random_range(-1.5..1.5),
    );
    let t = Vec3::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
    );
    RigidTransform::new(AxisAngle(w).exp(), t)
}

#[test]
fn noiseless_scene_is_recovered_exactly() {
    let scene = generate_scene(10, 500, 0.5, 0.0, 0.0, 4).unwrap();
    let eps = 0.05;
    let results: Vec<PairwiseResult> = scene
        .pairs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let cfg = RansacConfig {
                rng_seed: k as u64,
                ..RansacConfig::default()
            };
            let est = estimate_pairwise(&p.correspondences, &cfg).unwrap();
            PairwiseResult {
                i: p.i,
                j: p.j,
                relative: est.relative,
                correspondences: p.correspondences.clone(),
                inlier_count: est.inlier_indices.len(),
            }
        })
        .collect();
    let graph = build_graph(results).unwrap();
    let rot = average_rotations(&graph, &RotAvgConfig::default()).unwrap();
    let re =
        reestimate_all_edges(&graph, &rot.rotations, eps, &ReestimateConfig::default()).unwrap();
    let pos = average_positions(&re.graph, &rot.rotations, &PosAvgConfig::for_eps(eps)).unwrap();
    let poses: Vec<RigidTransform> = rot
        .rotations
        .iter()
        .zip(&pos.positions)
        .map(|(r, t)| RigidTransform::new(*r, *t))
        .collect();
    let refined = refine_poses(&graph, &poses, &RefineConfig::for_eps(eps)).unwrap();
    let pairs: Vec<(usize, usize)> = graph.edges.iter().map(|e| (e.i, e.j)).collect();
    let m = multiway_metrics(
        &refined.poses,
        &scene.truth,
        &pairs,
        &MetricsConfig::default(),
    )
    .unwrap();
    assert!(m.re_deg.iter().all(|&x| x < 1e-6), "{:?}", m.re_deg);
    assert!(m.te_m.iter().all(|&x| x < 1e-8), "{:?}", m.te_m);
    assert_eq!(m.recall, Some(1.0));
}

/// Edge `(i, j)` whose correspondences are world points seen from both poses.
fn edge_with_points(
    truth: &[RigidTransform],
    i: usize,
    j: usize,
    n: usize,
    outlier_ratio: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Edge {
    let noise = Normal::new(0.0, sigma).unwrap();
    let jitter =
        |rng: &mut ChaCha8Rng| Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
    let mut pairs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let w = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let xi = truth[i].rotation.apply(&(w - truth[i].translation)) + jitter(rng);
        if rng.random_bool(outlier_ratio) {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            pairs.push((xi, truth[j].rotation.apply(&(v - truth[j].translation))));
            labels.push(false);
        } else {
            pairs.push((
                xi,
                truth[j].rotation.apply(&(w - truth[j].translation)) + jitter(rng),
            ));
            labels.push(true);
        }
    }
    Edge {
        i,
        j,
        relative: relative_from_global(&truth[i], &truth[j]),
        correspondences: CorrespondenceSet::with_labels(pairs, labels),
        inlier_count: n,
        weight: 1.0,
        overlap_score: 0.0,
    }
}

fn graph_of(truth: &[RigidTransform], edges: Vec<Edge>) -> PoseGraph {
    PoseGraph {
        vertices: truth
            .iter()
            .enumerate()
            .map(|(id, p)| Vertex {
                id,
                pose: *p,
                fixed: id == 0,
            })
            .collect(),
        edges,
    }
}

#[test]
fn reestimated_translation_error_scales_with_inliers() {
    let (sigma, eps) = (0.005, 0.03);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut normalized = Vec::new();
    for _ in 0..40 {
        let truth: Vec<RigidTransform> = (0..2).map(|_| random_pose(&mut rng, 0.5)).collect();
        let e = edge_with_points(&truth, 0, 1, 300, 0.6, sigma, &mut rng);
        let graph = graph_of(&truth, vec![e]);
        let rots: Vec<Rotation> = truth.iter().map(|p| p.rotation).collect();
        let re = reestimate_all_edges(&graph, &rots, eps, &ReestimateConfig::default()).unwrap();
        let c = re.edges[0].consensus.as_ref().unwrap();
        let labels = graph.edges[0]
            .correspondences
            .truth_labels
            .as_ref()
            .unwrap();
        let true_inliers = labels.iter().filter(|x| **x).count();
        let kept_true = c.inlier_indices.iter().filter(|&&k| labels[k]).count();
        assert!(kept_true as f64 >= 0.95 * true_inliers as f64);
        let err =
            (re.graph.edges[0].relative.translation - graph.edges[0].relative.translation).norm();
        normalized.push(err * (c.inlier_count as f64).sqrt() / sigma);
    }
    let mean = normalized.iter().sum::<f64>() / normalized.len() as f64;
    assert!(mean <= 3.0, "mean normalized error {mean}");
}

#[test]
fn noiseless_reestimation_keeps_translations() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let truth: Vec<RigidTransform> = (0..4).map(|_| random_pose(&mut rng, 2.0)).collect();
    let edges = [(0, 1), (1, 2), (2, 3), (0, 3)]
        .iter()
        .map(|&(i, j)| edge_with_points(&truth, i, j, 50, 0.0, 0.0, &mut rng))
        .collect();
    let graph = graph_of(&truth, edges);
    let rots: Vec<Rotation> = truth.iter().map(|p| p.rotation).collect();
    let re = reestimate_all_edges(&graph, &rots, 0.05, &ReestimateConfig::default()).unwrap();
    for (a, b) in graph.edges.iter().zip(&re.graph.edges) {
        assert!((a.relative.translation - b.relative.translation).norm() < 1e-9);
        assert_eq!(b.inlier_count, 50);
    }
}

#[test]
fn all_outlier_edge_gets_floor_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let truth: Vec<RigidTransform> = (0..3).map(|_| random_pose(&mut rng, 2.0)).collect();
    let edges = vec![
        edge_with_points(&truth, 0, 1, 80, 0.0, 0.001, &mut rng),
        edge_with_points(&truth, 1, 2, 80, 0.0, 0.001, &mut rng),
        edge_with_points(&truth, 0, 2, 80, 1.0, 0.001, &mut rng),
    ];
    let graph = graph_of(&truth, edges);
    let rots: Vec<Rotation> = truth.iter().map(|p| p.rotation).collect();
    let re = reestimate_all_edges(&graph, &rots, 0.01, &ReestimateConfig::default()).unwrap();
    assert_eq!(re.low_inlier_edges(), vec![2]);
    assert_eq!(re.graph.edges[2].weight, EDGE_WEIGHT_FLOOR);
    assert!(re.graph.edges[0].weight > 0.5);
}

#[test]
fn rotation_start_survives_a_bad_spanning_tree() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let n = 8;
    let truth: Vec<RigidTransform> = (0..n).map(|_| random_pose(&mut rng, 2.0)).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n.min(i + 3) {
            edges.push(Edge {
                i,
                j,
                relative: relative_from_global(&truth[i], &truth[j]),
                correspondences: CorrespondenceSet::default(),
                inlier_count: 50,
                weight: 1.0,
                overlap_score: 0.0,
            });
        }
    }
    // A confidently wrong edge, and vertex poses chained through it.
    let bad = edges.iter().position(|e| (e.i, e.j) == (3, 4)).unwrap();
    let twist = Rotation::about_z(2.0);
    edges[bad].relative.rotation = twist * edges[bad].relative.rotation;
    let mut start: Vec<RigidTransform> = truth.clone();
    for p in start.iter_mut().skip(4) {
        p.rotation = p.rotation * truth[4].rotation.transpose() * twist * truth[4].rotation;
    }
    let mut graph = graph_of(&start, edges);
    graph.vertices[0].pose = truth[0];
    let rot = average_rotations(&graph, &RotAvgConfig::default()).unwrap();
    let tru: Vec<Rotation> = truth.iter().map(|p| p.rotation).collect();
    let (_, err) = align_rotations_to_truth(&rot.rotations, &tru).unwrap();
    // The Cauchy weight of the bad edge is small but not zero.
    assert!(err.iter().all(|&e| e < 0.2f64.to_radians()), "{err:?}");
    assert!(rotation_geodesic_angle(&rot.rotations[4], &start[4].rotation) > 1.0);
}
