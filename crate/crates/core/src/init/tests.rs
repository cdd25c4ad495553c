use glam::DVec3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scene::{Actor, SceneConfig, Shape, Texture, Trajectory};

fn cloud_at(t: f64, points: Vec<DVec3>) -> KeyframeCloud {
    let n = points.len();
    keyframe_from_points(points, vec![[0.5; 3]; n], t).unwrap()
}

fn random_points(n: usize, rng: &mut impl Rng) -> Vec<DVec3> {
    (0..n)
        .map(|_| DVec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}

#[test]
fn keyframe_counts() {
    assert_eq!(keyframe_indices(10, 300).unwrap().len(), 31);
    assert_eq!(keyframe_indices(1, 60).unwrap().len(), 60);
    assert_eq!(keyframe_indices(60, 60).unwrap(), vec![0, 59]);
    assert_eq!(keyframe_indices(500, 60).unwrap(), vec![0, 59]);
    assert_eq!(keyframe_indices(20, 41).unwrap(), vec![0, 20, 40]);
    assert!(keyframe_indices(0, 60).is_err());
}

proptest! {
    #[test]
    fn every_frame_is_near_a_keyframe(stride in 1usize..40, frames in 2usize..200) {
        let keys = keyframe_indices(stride, frames).unwrap();
        prop_assert_eq!(keys[0], 0);
        prop_assert_eq!(*keys.last().unwrap(), frames - 1);
        for f in 0..frames {
            let gap = keys.iter().map(|k| k.abs_diff(f)).min().unwrap();
            prop_assert!(2 * gap <= stride);
        }
    }

    #[test]
    fn fusion_returns_one_of_its_inputs(
        a in prop::array::uniform3(-10.0f64..10.0),
        b in prop::array::uniform3(-10.0f64..10.0),
        m: bool,
    ) {
        let (a, b) = (DVec3::from_array(a), DVec3::from_array(b));
        let v = fuse_velocity(a, b, m);
        prop_assert!(v == a || v == b);
        prop_assert_eq!(v, if m { b } else { a });
    }
}

#[test]
fn fusion_examples() {
    let (knn, flow) = (DVec3::splat(9.0), DVec3::new(0.3, 0.0, 0.0));
    assert_eq!(fuse_velocity(knn, flow, true), flow);
    assert_eq!(fuse_velocity(knn, flow, false), knn);
}

#[test]
fn knn_identical_and_translated() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pts = random_points(300, &mut rng);
    let a = cloud_at(0.2, pts.clone());
    let b = cloud_at(0.3, pts.clone());
    assert!(knn_velocity(&a, &b, 1).unwrap().iter().all(|v| *v == DVec3::ZERO));
    // grid spacing 3 keeps each point's own translate the nearest one
    let grid: Vec<DVec3> = (0..64).map(|i| DVec3::new((i % 4) as f64, (i / 4 % 4) as f64, (i / 16) as f64) * 3.0).collect();
    let a = cloud_at(0.2, grid.clone());
    let shifted = cloud_at(0.3, grid.iter().map(|p| *p + DVec3::X).collect());
    for v in knn_velocity(&a, &shifted, 1).unwrap() {
        assert!((v - DVec3::new(10.0, 0.0, 0.0)).length() < 1e-9);
    }
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut next = random_points(400, &mut rng);
    next.push(DVec3::splat(50.0));
    let prev = random_points(100, &mut rng);
    let (a, b) = (cloud_at(0.0, prev.clone()), cloud_at(0.5, next.clone()));
    let fast = knn_velocity(&a, &b, 3).unwrap();
    for (p, v) in prev.iter().zip(&fast) {
        let mut d: Vec<(f64, usize)> = next.iter().enumerate().map(|(i, q)| ((*q - *p).length_squared(), i)).collect();
        d.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mean = d[..3].iter().map(|(_, i)| next[*i]).sum::<DVec3>() / 3.0;
        assert!((*v - (mean - *p) / 0.5).length() < 1e-12);
    }
    let all = knn_velocity(&a, &cloud_at(0.5, next[..2].to_vec()), 10).unwrap();
    assert!((all[0] - ((next[0] + next[1]) / 2.0 - prev[0]) / 0.5).length() < 1e-12);
    assert!(knn_velocity(&a, &cloud_at(0.0, next.clone()), 3).is_err());
    assert!(knn_velocity(&a, &cloud_at(0.5, vec![]), 3).is_err());
}

/// A flat-faced actor translating along x in front of the back wall.
fn sliding_box_scene(width: usize) -> Scene {
    let mut desc = crate::scene::generate(&SceneConfig {
        width,
        height: width,
        cameras: 4,
        arc_degrees: 40.0,
        frames: 11,
        static_only: true,
        ..Default::default()
    })
    .unwrap();
    desc.actors.push(Actor {
        shape: Shape::Cuboid { half_extents: [0.6, 0.6, 0.6] },
        texture: Texture::Solid { color: [0.9, 0.1, 0.1] },
        trajectory: Trajectory::PiecewiseLinear { knots: vec![(0.0, [-0.5, 1.0, 0.7]), (1.0, [0.5, 1.0, 0.7])] },
    });
    Scene::new(desc).unwrap()
}

fn views_for<'a>(
    scene: &'a Scene,
    flows: &'a [FlowField],
    da: &'a [Image],
    db: &'a [Image],
) -> Vec<FlowView<'a>> {
    (0..scene.cameras().len())
        .map(|c| FlowView {
            camera: &scene.cameras()[c],
            flow: &flows[c],
            depth_a: &da[c],
            depth_b: &db[c],
        })
        .collect()
}

#[test]
fn flow_recovers_static_and_actor_velocity() {
    let scene = sliding_box_scene(128);
    let provider = SyntheticFlow { scene: &scene };
    let (ta, tb) = (0.4, 0.6);
    let n = scene.cameras().len();
    let flows: Vec<FlowField> = (0..n).map(|c| provider.flow(c, ta, tb)).collect();
    let da: Vec<Image> = (0..n).map(|c| provider.depth(c, ta)).collect();
    let db: Vec<Image> = (0..n).map(|c| provider.depth(c, tb)).collect();
    let views = views_for(&scene, &flows, &da, &db);
    let eps = 0.01 * scene.bbox_diagonal();

    // front face centre of the box and a point on the back wall
    let centre = scene.actor_position(0, ta);
    let on_actor = centre + DVec3::new(0.1, 0.15, -0.6);
    let on_wall = DVec3::new(1.5, 2.2, 2.5);
    let out = flow_velocity(&[on_actor, on_wall], &views, ta, tb, 0.5, eps).unwrap();
    let u = scene.actor_velocity(0, ta);
    assert!(out[0].1 && (out[0].0 - u).length() < 1e-3, "{:?} vs {u}", out[0]);
    assert!(out[1].1 && out[1].0 == DVec3::ZERO, "{:?}", out[1]);

    let blind: Vec<FlowField> = flows
        .iter()
        .map(|f| FlowField { flow: f.flow.clone(), confidence: f.confidence.map(|_| 0.0) })
        .collect();
    let views = views_for(&scene, &blind, &da, &db);
    let out = flow_velocity(&[on_actor, on_wall], &views, ta, tb, 0.5, eps).unwrap();
    assert!(out.iter().all(|(v, m)| !m && *v == DVec3::ZERO));
}

#[test]
fn point_seen_by_no_camera_is_unmasked() {
    let scene = sliding_box_scene(32);
    let provider = SyntheticFlow { scene: &scene };
    let flows: Vec<FlowField> = (0..4).map(|c| provider.flow(c, 0.0, 0.1)).collect();
    let da: Vec<Image> = (0..4).map(|c| provider.depth(c, 0.0)).collect();
    let db: Vec<Image> = (0..4).map(|c| provider.depth(c, 0.1)).collect();
    let views = views_for(&scene, &flows, &da, &db);
    // behind every camera
    let out = flow_velocity(&[DVec3::new(0.0, 1.0, -20.0)], &views, 0.0, 0.1, 0.5, 0.1).unwrap();
    assert_eq!(out[0], (DVec3::ZERO, false));
    assert!(flow_velocity(&[DVec3::ZERO], &views[..1], 0.0, 0.1, 0.5, 0.1).is_err());
}

#[test]
fn build_cloud_counts_and_attributes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kfs: Vec<KeyframeCloud> = (0..5)
        .map(|k| {
            let pts = random_points(4000, &mut rng);
            let cols = (0..4000).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            keyframe_from_points(pts, cols, k as f64 / 4.0).unwrap()
        })
        .collect();
    let vel: Vec<Vec<DVec3>> = kfs.iter().map(|k| vec![DVec3::new(k.t, 0.0, 0.0); k.len()]).collect();
    let cloud = build_cloud(&kfs, &vel, 0.25, 0.1, 10_000, &mut rng).unwrap();
    assert_eq!(cloud.len(), 10_000);
    for k in 0..5 {
        let t = k as f64 / 4.0;
        let n = cloud.primitives().iter().filter(|g| g.t_center == t).count();
        assert_eq!(n, 2000);
    }
    for g in cloud.primitives() {
        assert_eq!(g.velocity.x, g.t_center);
        assert!((g.opacity() - 0.1).abs() < 1e-12);
        assert!((g.duration() - 0.25).abs() < 1e-12);
        assert_eq!(g.gate_logit, 0.0);
        assert_eq!(g.sh[1..], [[0.0; 3]; 3]);
        let kf = &kfs[(g.t_center * 4.0).round() as usize];
        let src = kf.points.iter().position(|p| *p == g.mean).unwrap();
        assert_eq!(g.sh[0], rgb_to_sh_dc(kf.colors[src]));
    }
    assert!(build_cloud(&kfs, &vel, 0.25, 0.1, 4, &mut rng).is_err());
    let small = build_cloud(&kfs, &vel, 0.25, 0.1, 50_000, &mut rng).unwrap();
    assert_eq!(small.len(), 20_000);
}

#[test]
fn quota_is_exact_and_stratified() {
    assert_eq!(stratified_quota(&[10, 10, 10], 7), vec![3, 2, 2]);
    assert_eq!(stratified_quota(&[1, 100], 50), vec![0, 50]);
    assert_eq!(stratified_quota(&[3, 4], 100), vec![3, 4]);
    assert_eq!(stratified_quota(&[5, 0, 5], 4).iter().sum::<usize>(), 4);
}

#[test]
fn init_cloud_is_deterministic_and_flow_beats_knn() {
    let scene = Scene::generate(&SceneConfig { width: 48, height: 48, frames: 31, cameras: 4, ..Default::default() }).unwrap();
    let cfg = InitConfig { points_per_camera: 600, ..Default::default() };
    let run = |cfg: &InitConfig| init_cloud(&scene, cfg, 3000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (a, ra) = run(&cfg);
    let (b, _) = run(&cfg);
    assert_eq!(a, b);
    assert_eq!(a.len(), 3000);
    assert_eq!(ra.keyframes, 4);
    assert!(ra.flow_fraction > 0.5, "{}", ra.flow_fraction);
    let (_, rk) = run(&InitConfig { velocity: VelocitySource::Knn, ..cfg });
    assert!(ra.actor_velocity_error < rk.actor_velocity_error, "{} vs {}", ra.actor_velocity_error, rk.actor_velocity_error);
    let (z, _) = run(&InitConfig { velocity: VelocitySource::Zero, ..cfg });
    assert!(z.primitives().iter().all(|g| g.velocity == DVec3::ZERO));
}

#[test]
fn single_keyframe_gets_zero_velocity() {
    let kf = cloud_at(0.0, random_points(50, &mut ChaCha8Rng::seed_from_u64(4)));
    let v = keyframe_velocities(&[kf], VelocitySource::Flow, &InitConfig::default(), None).unwrap();
    assert!(v[0].0.iter().all(|v| *v == DVec3::ZERO));
}
