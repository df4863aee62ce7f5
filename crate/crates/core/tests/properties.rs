use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lane3d::eval::{openlane_evaluate, sequence_stability, EvalConfig};
use lane3d::geometry::{
    bilinear_sample, denormalize_coords, normalize_coords, project_to_image, transform_points_ego, CameraRig,
    EgoMotion, FeatureMap, LevelExtent, RigidTransform,
};
use lane3d::lane::{fit_polynomials, uniform_y_positions, GroundTruthLane, PolyLane, WorldBox};
use lane3d::synth::{generate_sequence, HillKind, LaneFamily, SceneConfig};
use lane3d::temporal::{propagate_anchors, select_top_k, MemoryEntry, TemporalMemory};

fn motion(yaw: f64, t: [f64; 3]) -> EgoMotion {
    EgoMotion::from_transform(RigidTransform::from_yaw_translation(yaw, t))
}

fn gt_as_prediction(gt: &GroundTruthLane) -> PolyLane {
    let (cx, cz) = fit_polynomials(&gt.points, 3).unwrap();
    PolyLane {
        confidence: 1.0,
        y_start: gt.y_start,
        y_end: gt.y_end,
        coeffs_x: cx,
        coeffs_z: cz,
        category: gt.category,
    }
}

fn entry(confidences: Vec<f64>) -> MemoryEntry {
    let q = confidences.len();
    MemoryEntry {
        contents: lane3d::autodiff::Tensor::zeros(&[q, 2]),
        anchors: vec![vec![[0.0, 3.0, 0.0]]; q],
        ranges: vec![(0.0, 1.0); q],
        confidences,
        source_index: (0..q).collect(),
        motion_to_latest: EgoMotion::identity(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn motions_compose(
        y1 in -0.3f64..0.3, t1 in prop::array::uniform3(-5.0f64..5.0),
        y2 in -0.3f64..0.3, t2 in prop::array::uniform3(-5.0f64..5.0),
        p in prop::array::uniform3(-50.0f64..50.0),
    ) {
        let (a, b) = (motion(y1, t1), motion(y2, t2));
        let two = transform_points_ego(&transform_points_ego(&[p], &a), &b)[0];
        let one = transform_points_ego(&[p], &a.then(&b))[0];
        for k in 0..3 {
            prop_assert!((two[k] - one[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_projection_in_unit_square_iff_valid(
        x in -40.0f64..40.0, y in 0.5f64..150.0, z in -5.0f64..5.0, level in 0usize..4,
    ) {
        let rig = CameraRig::forward_looking((360, 480), 300.0, 1.8, 0.1).unwrap();
        let r = project_to_image(&[[x, y, z]], &rig);
        let stride = 8usize << level;
        let (lh, lw) = (360usize.div_ceil(stride), 480usize.div_ceil(stride));
        let uv = r.points2d[0];
        if uv[0].is_finite() {
            let lp = [uv[0] * (lw as f64 - 1.0) / 479.0, uv[1] * (lh as f64 - 1.0) / 359.0];
            let n = normalize_coords(lp, LevelExtent::new(lh, lw)).unwrap();
            let inside = (0.0..=1.0).contains(&n[0]) && (0.0..=1.0).contains(&n[1]);
            prop_assert_eq!(inside && r.depth[0] > 0.0, r.validity[0]);
        } else {
            prop_assert!(!r.validity[0]);
        }
    }

    #[test]
    fn normalize_round_trip(u in -10.0f64..200.0, v in -10.0f64..200.0, h in 1usize..100, w in 1usize..100) {
        let e = LevelExtent::new(h, w);
        let back = denormalize_coords(normalize_coords([u, v], e).unwrap(), e).unwrap();
        if w > 1 { prop_assert!((back[0] - u).abs() < 1e-12); }
        if h > 1 { prop_assert!((back[1] - v).abs() < 1e-12); }
    }

    #[test]
    fn bilinear_is_linear_in_the_map(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, d) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..4));
        let mk = |rng: &mut ChaCha8Rng| (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (f, g) = (mk(&mut rng), mk(&mut rng));
        let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let p = [rng.gen_range(-0.5..w as f64), rng.gen_range(-0.5..h as f64)];
        let sf = bilinear_sample(&FeatureMap::new(h, w, d, f).unwrap(), p);
        let sg = bilinear_sample(&FeatureMap::new(h, w, d, g).unwrap(), p);
        let sm = bilinear_sample(&FeatureMap::new(h, w, d, mix).unwrap(), p);
        for i in 0..d {
            prop_assert!((sm[i] - (a * sf[i] + b * sg[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn generated_lanes_are_valid(seq in 0u64..500) {
        let cfg = SceneConfig { lane_length: Some((15.0, 80.0)), ..SceneConfig::default() };
        for f in generate_sequence(&cfg, seq, 2).unwrap() {
            for l in &f.lanes {
                prop_assert!(l.points.len() >= 2);
                prop_assert!(l.points.windows(2).all(|w| w[0][1] < w[1][1]));
                prop_assert!(l.points.iter().all(|p| cfg.world.contains(*p)));
            }
        }
    }

    #[test]
    fn propagated_anchors_stay_in_box(
        yaw in -0.5f64..0.5, t in prop::array::uniform3(-40.0f64..40.0),
        xs in prop::collection::vec(-30.0f64..30.0, 10), zs in prop::collection::vec(-10.0f64..10.0, 10),
    ) {
        let world = WorldBox::default();
        let grid = uniform_y_positions(10, 3.0, 103.0);
        let pts: Vec<_> = (0..10).map(|i| [xs[i], grid[i], zs[i]]).collect();
        let out = propagate_anchors(&pts, &motion(yaw, t), &grid, &world);
        prop_assert_eq!(out.len(), 10);
        for (p, y) in out.iter().zip(&grid) {
            prop_assert!(world.contains(*p));
            prop_assert_eq!(p[1], *y);
        }
    }

    #[test]
    fn top_k_ignores_monotone_rescaling(seed in 0u64..1000, k in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mem = TemporalMemory::new(3);
        let mut warped = TemporalMemory::new(3);
        for _ in 0..rng.gen_range(1..4) {
            let c: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..0.99)).collect();
            let w: Vec<f64> = c.iter().map(|p| (p / (1.0 - p)).ln() * 3.0 + 1.0).collect();
            mem.update(entry(c), &EgoMotion::identity());
            warped.update(entry(w), &EgoMotion::identity());
        }
        prop_assert_eq!(select_top_k(&mem, k), select_top_k(&warped, k));
    }

    #[test]
    fn ground_truth_scores_itself_perfectly(seq in 0u64..200) {
        let cfg = SceneConfig { family: LaneFamily::Straight, hill: HillKind::Grade, ..SceneConfig::default() };
        let eval = EvalConfig::default();
        let frame = generate_sequence(&cfg, seq, 1).unwrap().remove(0);
        let preds: Vec<PolyLane> = frame.lanes.iter().map(gt_as_prediction).collect();
        let r = openlane_evaluate(&preds, &frame.lanes, &eval).unwrap();
        prop_assert_eq!(r.f1, 1.0);
        for e in [r.x_err_near, r.x_err_far, r.z_err_near, r.z_err_far] {
            prop_assert!(e < 1e-9, "error {}", e);
        }
    }

    #[test]
    fn extra_predictions_move_metrics_the_right_way(seq in 0u64..200, shift in 5.0f64..20.0) {
        let cfg = SceneConfig { family: LaneFamily::Straight, hill: HillKind::Grade, ..SceneConfig::default() };
        let eval = EvalConfig::default();
        let frame = generate_sequence(&cfg, seq, 1).unwrap().remove(0);
        let all: Vec<PolyLane> = frame.lanes.iter().map(gt_as_prediction).collect();
        let partial = &all[..all.len() - 1];
        let base = openlane_evaluate(partial, &frame.lanes, &eval).unwrap();
        // A perfect prediction for the missing lane never lowers F1.
        let more = openlane_evaluate(&all, &frame.lanes, &eval).unwrap();
        prop_assert!(more.f1 >= base.f1);
        // A prediction far from every lane never raises precision.
        let mut stray = all[0].clone();
        stray.coeffs_x[0] += if stray.coeffs_x[0] > 0.0 { -shift - 30.0 } else { shift + 30.0 };
        let mut with_stray = partial.to_vec();
        with_stray.push(stray);
        let s = openlane_evaluate(&with_stray, &frame.lanes, &eval).unwrap();
        prop_assert!(s.precision <= base.precision);
    }

    #[test]
    fn constant_bias_has_zero_stability(bias in -1.2f64..1.2, frames in 2usize..12) {
        let pts = (0..11).map(|i| [1.0 + 0.01 * i as f64, 3.0 + 10.0 * i as f64, 0.0]).collect();
        let gt = GroundTruthLane::from_points(pts, None, None).unwrap();
        let mut pred = gt_as_prediction(&gt);
        pred.coeffs_x[0] += bias;
        let series = vec![(vec![pred], vec![gt]); frames];
        let s = sequence_stability("s", &series, &EvalConfig::default()).unwrap();
        prop_assert!(s.dist_x.iter().all(|d| (d - bias.abs()).abs() < 1e-9));
        prop_assert_eq!(s.f_stab, 0.0);
    }
}
