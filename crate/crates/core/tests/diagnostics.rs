use glam::DVec3;
use proptest::prelude::*;
use stsplat::diagnostics::*;
use stsplat::init::InitConfig;
use stsplat::primitive::rgb_to_sh_dc;
use stsplat::raster::{render, RenderOptions};
use stsplat::scene::{Actor, Scene, SceneConfig, Shape, Texture, Trajectory};
use stsplat::trainer::{EvalReport, TrainConfig};
use stsplat::{GaussianCloud, OpacityMode, SpacetimeGaussian};

fn prim(mean: DVec3, duration: f64, opacity_logit: f64) -> SpacetimeGaussian {
    SpacetimeGaussian {
        mean,
        t_center: 0.5,
        log_duration: duration.ln(),
        log_scale: DVec3::splat(-1.5),
        opacity_logit,
        sh: [rgb_to_sh_dc([0.8, 0.3, 0.1]), [0.0; 3], [0.0; 3], [0.0; 3]],
        ..Default::default()
    }
}

fn cloud_of(prims: Vec<SpacetimeGaussian>) -> GaussianCloud {
    let n = prims.len();
    GaussianCloud::from_primitives(prims, n).unwrap()
}

fn static_scene(w: usize) -> Scene {
    Scene::generate(&SceneConfig {
        width: w,
        height: w,
        frames: 6,
        cameras: 2,
        supersample: 1,
        static_only: true,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn full_span_durations_land_in_final_bin() {
    let c = cloud_of((0..10).map(|i| prim(DVec3::splat(i as f64), 1.0, 0.0)).collect());
    let h = duration_histogram(&c, None).unwrap();
    assert_eq!(*h.counts.last().unwrap(), 10);
    assert_eq!(h.total(), 10);
    assert_eq!(h.persistent_fraction, 1.0);
    assert!(h.edges.last().unwrap().is_infinite());
}

#[test]
fn bimodal_cloud_has_two_populated_bins() {
    let mut prims: Vec<_> = (0..6).map(|i| prim(DVec3::splat(i as f64), 0.05, 0.0)).collect();
    prims.extend((0..6).map(|i| prim(DVec3::splat(i as f64), 2.0, 0.0)));
    let h = duration_histogram(&cloud_of(prims), None).unwrap();
    let populated: Vec<usize> = h.counts.iter().enumerate().filter(|(_, c)| **c > 0).map(|(k, _)| k).collect();
    assert_eq!(populated, vec![0, h.counts.len() - 1]);
    assert_eq!(h.persistent_fraction, 0.5);
    assert_eq!(h.persistent_count_fraction, 0.5);
    assert_eq!(h.fraction_below(0.3), 0.5);
}

#[test]
fn persistent_share_is_opacity_weighted() {
    // sigmoid(0) = 0.5 on the transient primitive, sigmoid(ln 3) = 0.75 on the persistent one
    let c = cloud_of(vec![prim(DVec3::ZERO, 0.1, 0.0), prim(DVec3::ONE, 1.5, 3f64.ln())]);
    let h = duration_histogram(&c, None).unwrap();
    assert!((h.persistent_fraction - 0.75 / 1.25).abs() < 1e-12);
    assert_eq!(h.persistent_count_fraction, 0.5);
}

#[test]
fn gated_persistence_uses_the_gate() {
    let mut a = prim(DVec3::ZERO, 0.1, 0.0);
    a.gate_logit = 1.0;
    let mut b = prim(DVec3::ONE, 0.1, 0.0);
    b.gate_logit = -1.0;
    let h = duration_histogram(&cloud_of(vec![a, b]), Some(20.0)).unwrap();
    assert_eq!(h.persistent_fraction, 0.5);
}

#[test]
fn empty_cloud_histogram_is_an_error() {
    assert!(duration_histogram(&GaussianCloud::new(4), None).is_err());
}

proptest! {
    #[test]
    fn histogram_conserves_count_and_mass(durs in prop::collection::vec((-4.0f64..2.0, -3.0f64..3.0), 1..60)) {
        let prims: Vec<_> = durs.iter().enumerate().map(|(i, (d, o))| prim(DVec3::splat(i as f64), d.exp(), *o)).collect();
        let total_mass: f64 = prims.iter().map(|p| p.opacity()).sum();
        let h = duration_histogram(&cloud_of(prims), None).unwrap();
        prop_assert_eq!(h.total(), durs.len());
        prop_assert!((h.mass.iter().sum::<f64>() - total_mass).abs() < 1e-9);
        prop_assert!(h.persistent_fraction >= 0.0 && h.persistent_fraction <= 1.0);
    }
}

#[test]
fn all_persistent_cloud_has_black_transient_render() {
    let scene = static_scene(24);
    let cam = &scene.cameras()[0];
    let target = cam.unproject([12.0, 12.0], 3.0);
    let c = cloud_of(vec![prim(target, 2.0, 2.0), prim(target + DVec3::X * 0.1, 3.0, 1.0)]);
    let opts = RenderOptions::default();
    let (short, long) = partition_render(&c, cam, 0.5, &opts, None, PARTITION_CUTOFF);
    assert!(short.image.data.iter().all(|v| *v == 0.0));
    assert_eq!(long.image, render(&c, cam, 0.5, &opts).image);
}

#[test]
fn union_render_is_not_the_sum_of_partitions() {
    let scene = static_scene(24);
    let cam = &scene.cameras()[0];
    let p = cam.unproject([12.0, 12.0], 3.0);
    let c = cloud_of(vec![prim(p, 0.2, 1.0), prim(p + cam.rotation.row(2) * 0.5, 2.0, 1.0)]);
    let opts = RenderOptions::default();
    let (short, long) = partition_render(&c, cam, 0.5, &opts, None, PARTITION_CUTOFF);
    let full = render(&c, cam, 0.5, &opts).image;
    let center = |img: &stsplat::image::Image| img.pixel(12, 12)[0];
    // front splat occludes part of the back one, so the union is darker than the sum
    assert!(center(&full) < center(&short.image) + center(&long.image) - 1e-3);
    // and brighter than either part alone
    assert!(center(&full) > center(&short.image).max(center(&long.image)));
}

#[test]
fn zero_velocity_cloud_has_no_leakage() {
    let scene = static_scene(24);
    let cam = &scene.cameras()[0];
    let p = cam.unproject([12.0, 12.0], 3.0);
    let c = cloud_of(vec![prim(p, 2.0, 1.0)]);
    assert_eq!(motion_leakage(&c, &scene, 0, cam, 0.5, &RenderOptions::default(), None), 0.0);
}

#[test]
fn single_moving_splat_leakage_matches_oracle() {
    let scene = static_scene(32);
    let cam = &scene.cameras()[0];
    let t = 0.4;
    let mut g = prim(cam.unproject([16.0, 16.0], 3.0), 5.0, 0.5);
    g.log_scale = DVec3::splat(-1.0);
    g.velocity = DVec3::new(0.7, -0.2, 0.3);
    let c = cloud_of(vec![g.clone()]);
    let opts = RenderOptions::default();
    let leak = motion_leakage(&c, &scene, 0, cam, t, &opts, None);

    let dt = scene.frame_dt();
    let (a, _) = cam.project(g.position_at(t)).unwrap();
    let (b, _) = cam.project(g.position_at(t) + g.velocity * dt).unwrap();
    let speed = (b[0] - a[0]).hypot(b[1] - a[1]);
    let alpha = render(&c, cam, t, &opts).alpha;
    let oracle = alpha.data.iter().map(|w| w * speed).sum::<f64>() / alpha.data.len() as f64;
    assert!(leak > 0.0);
    assert!((leak - oracle).abs() < 1e-9 * oracle.max(1.0), "{leak} vs {oracle}");
}

#[test]
fn static_scene_slice_rows_are_identical() {
    let scene = static_scene(20);
    let s = xt_slice_gt(&scene, 1, 10).unwrap();
    assert_eq!(s.frames(), scene.frame_count());
    let first = s.image.row(0).to_vec();
    for f in 1..s.frames() {
        assert_eq!(s.image.row(f), &first[..]);
    }
}

#[test]
fn slice_rows_equal_rows_of_full_renders() {
    let scene = Scene::generate(&SceneConfig {
        width: 20,
        height: 20,
        frames: 7,
        cameras: 2,
        supersample: 1,
        ..Default::default()
    })
    .unwrap();
    let s = xt_slice_gt(&scene, 0, 13).unwrap();
    for f in 0..scene.frame_count() {
        assert_eq!(s.image.row(f), scene.render(0, scene.time_of(f)).row(13));
    }
    assert!(xt_slice_gt(&scene, 0, 20).is_err());
}

#[test]
fn translating_actor_traces_a_straight_band() {
    let base = static_scene(64);
    let frames = 21;
    let mut desc = base.desc.clone();
    desc.frames = frames;
    let cam = base.cameras()[0].clone();
    let target = DVec3::from_array(desc.cameras[0].target);
    let right = cam.rotation.row(0);
    let start = target - right * 1.2;
    let end = target + right * 1.2;
    desc.actors = vec![Actor {
        shape: Shape::Sphere { radius: 0.3 },
        texture: Texture::Solid { color: [1.0, 0.0, 1.0] },
        trajectory: Trajectory::PiecewiseLinear {
            knots: vec![(0.0, start.to_array()), (1.0, end.to_array())],
        },
    }];
    let scene = Scene::new(desc).unwrap();
    let py = cam.project(target).unwrap().0[1] as usize;
    let slice = xt_slice_gt(&scene, 0, py).unwrap();
    let bg = xt_slice_gt(&scene.background(), 0, py).unwrap();
    let centers: Vec<f64> = (0..frames)
        .map(|f| {
            let (mut sum, mut n) = (0.0, 0.0);
            for x in 0..64 {
                let d: f64 = (0..3).map(|c| (slice.image.pixel(x, f)[c] - bg.image.pixel(x, f)[c]).abs()).sum();
                if d > 1e-9 {
                    sum += x as f64;
                    n += 1.0;
                }
            }
            assert!(n > 0.0, "actor missing in frame {f}");
            sum / n
        })
        .collect();
    let slope = (centers[frames - 1] - centers[0]) / (frames - 1) as f64;
    assert!(slope.abs() > 0.5, "band does not move: {centers:?}");
    for (f, c) in centers.iter().enumerate() {
        let line = centers[0] + slope * f as f64;
        assert!((c - line).abs() < 1.0, "frame {f}: {c} vs {line}");
    }
}

#[test]
fn mean_std_matches_hand_values() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    let rows = summarize(
        "x",
        &[EvalReport { views: 1, psnr: 30.0, dssim: 0.1, epe: 1.0 }, EvalReport { views: 1, psnr: 32.0, dssim: 0.1, epe: 3.0 }],
    );
    assert_eq!(rows.psnr_mean, 31.0);
    assert_eq!(rows.dssim_std, 0.0);
    assert!(variance_table(&[rows]).contains("| x | 2 |"));
}

#[test]
fn variance_report_is_zero_for_repeated_seed_and_positive_across_seeds() {
    let scene = Scene::generate(&SceneConfig {
        width: 16,
        height: 16,
        frames: 5,
        cameras: 2,
        supersample: 1,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        iterations: 4,
        budget: 200,
        init: InitConfig {
            stride: 2,
            points_per_camera: 60,
            ..Default::default()
        },
        ..Default::default()
    };
    let configs = vec![("base".to_string(), cfg)];
    let same = variance_report(&scene, &configs, &[3, 3, 3], 2).unwrap();
    assert_eq!(same[0].psnr_std, 0.0);
    assert_eq!(same[0].runs, 3);
    let varied = variance_report(&scene, &configs, &[1, 2, 3], 2).unwrap();
    assert!(varied[0].psnr_std > 0.0);
    assert_eq!(variance_report(&scene, &configs, &[1, 2, 3], 2).unwrap(), varied);
    assert!(variance_report(&scene, &configs, &[1, 2], 2).is_err());
}

#[test]
fn gated_partition_splits_on_gate() {
    let scene = static_scene(16);
    let cam = &scene.cameras()[0];
    let p = cam.unproject([8.0, 8.0], 3.0);
    let mut open = prim(p, 0.1, 1.0);
    open.gate_logit = 1.0;
    let mut closed = prim(p + DVec3::X * 0.2, 0.1, 1.0);
    closed.gate_logit = -1.0;
    let opts = RenderOptions {
        opacity_mode: OpacityMode::Gated,
        ..Default::default()
    };
    assert!(is_persistent(&open, &opts, 0.5));
    assert!(!is_persistent(&closed, &opts, 0.5));
}
