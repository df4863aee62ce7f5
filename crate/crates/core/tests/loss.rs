use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lane3d::autodiff::{Graph, ParamStore, Tensor, Var};
use lane3d::loss::{frame_loss, FrameTargets, LossValues};
use lane3d::matching::{match_predictions, GtTarget, LossConfig, MatchResult, PointReduction, PredSummary};
use lane3d::model::{ForwardOutput, LayerOutput};

const N: usize = 6;

/// Plain values of a forward pass with `q` queries.
#[derive(Clone)]
struct Values {
    logits: Vec<f64>,
    xs: Vec<f64>,
    zs: Vec<f64>,
    ranges: Vec<f64>,
    /// Per-layer anchors `(x, z, range)`.
    layers: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    seg: Vec<f64>,
}

fn output(g: &mut Graph, v: &Values) -> ForwardOutput {
    let q = v.logits.len();
    let mut c = |shape: Vec<usize>, data: &[f64]| -> Var { g.constant(Tensor::new(shape, data.to_vec())) };
    let conf_logit = c(vec![q, 1], &v.logits);
    let curve_x = c(vec![q, N], &v.xs);
    let curve_z = c(vec![q, N], &v.zs);
    let range = c(vec![q, 2], &v.ranges);
    let seg_logits = c(vec![1, 4, 4], &v.seg);
    let layers = v
        .layers
        .iter()
        .map(|(x, z, r)| LayerOutput {
            anchor_x: c(vec![q, N], x),
            anchor_z: c(vec![q, N], z),
            range: c(vec![q, 2], r),
            attn: curve_x,
            context: curve_x,
        })
        .collect();
    ForwardOutput {
        num_queries: q,
        conf_logit,
        coeff_x: curve_x,
        coeff_z: curve_z,
        curve_x,
        curve_z,
        range,
        layers,
        content: curve_x,
        seg_logits,
        pyramid: vec![],
    }
}

fn targets(lanes: Vec<GtTarget>, seg: Vec<f64>) -> FrameTargets {
    FrameTargets {
        lanes,
        seg,
        seg_shape: (4, 4),
    }
}

fn loss(v: &Values, t: &FrameTargets, m: &MatchResult, cfg: &LossConfig) -> LossValues {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let out = output(&mut g, v);
    let terms = frame_loss(&mut g, &out, t, m, cfg).unwrap();
    LossValues::read(&g, &terms)
}

fn matching(v: &Values, t: &FrameTargets, cfg: &LossConfig) -> MatchResult {
    let q = v.logits.len();
    let preds: Vec<PredSummary> = (0..q)
        .map(|i| PredSummary {
            prob: 1.0 / (1.0 + (-v.logits[i]).exp()),
            xs: v.xs[i * N..(i + 1) * N].to_vec(),
            zs: v.zs[i * N..(i + 1) * N].to_vec(),
            range: (v.ranges[2 * i], v.ranges[2 * i + 1]),
        })
        .collect();
    match_predictions(&preds, &t.lanes, cfg).unwrap()
}

fn random_case(seed: u64, q: usize, gts: usize) -> (Values, FrameTargets) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |lo: f64, hi: f64, n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
    let ranges: Vec<f64> = r(0.0, 0.4, q).into_iter().flat_map(|s| [s, s + 0.5]).collect();
    let v = Values {
        logits: r(-3.0, 3.0, q),
        xs: r(-4.0, 4.0, q * N),
        zs: r(-1.0, 1.0, q * N),
        ranges: ranges.clone(),
        layers: vec![(r(-4.0, 4.0, q * N), r(-1.0, 1.0, q * N), ranges.clone()); 2],
        seg: r(-3.0, 3.0, 16),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let lanes = (0..gts)
        .map(|_| {
            let a = rng.gen_range(0..3);
            GtTarget {
                points: (0..N)
                    .map(|i| (i >= a).then(|| (rng.gen_range(-4.0..4.0), rng.gen_range(-1.0..1.0))))
                    .collect(),
                boundary: (a as f64 / N as f64, 1.0),
            }
        })
        .collect();
    let seg = (0..16).map(|i| f64::from(i % 3 == 0)).collect();
    (v, targets(lanes, seg))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Direct sum of the geometric terms for the matched pairs.
fn geometry_oracle(xs: &[f64], zs: &[f64], ranges: &[f64], t: &FrameTargets, m: &MatchResult, ap: f64, ab: f64) -> f64 {
    let mut total = 0.0;
    for (gi, &p) in m.gt_to_pred.iter().enumerate() {
        let lane = &t.lanes[gi];
        let active = lane.points.iter().filter(|v| v.is_some()).count() as f64;
        let mut s = 0.0;
        for (i, v) in lane.points.iter().enumerate() {
            if let Some((x, z)) = v {
                s += (xs[p * N + i] - x).abs() + (zs[p * N + i] - z).abs();
            }
        }
        total += ap * s / active;
        total += ab * ((ranges[2 * p] - lane.boundary.0).abs() + (ranges[2 * p + 1] - lane.boundary.1).abs());
    }
    total
}

#[test]
fn random_case_matches_direct_sums() {
    let cfg = LossConfig::default();
    for seed in 0..20 {
        let (v, t) = random_case(seed, 5, 3);
        let m = matching(&v, &t, &cfg);
        let l = loss(&v, &t, &m, &cfg);
        let class: f64 = (0..5)
            .map(|i| {
                if m.pred_to_gt[i].is_some() {
                    cfg.alpha_class * softplus(-v.logits[i])
                } else {
                    cfg.alpha_class * softplus(v.logits[i])
                }
            })
            .sum();
        let curve = class + geometry_oracle(&v.xs, &v.zs, &v.ranges, &t, &m, cfg.alpha_points, cfg.alpha_boundary);
        let query: f64 = v
            .layers
            .iter()
            .map(|(x, z, r)| geometry_oracle(x, z, r, &t, &m, cfg.alpha_query_points, cfg.alpha_query_boundary))
            .sum();
        let seg: f64 = v
            .seg
            .iter()
            .zip(&t.seg)
            .map(|(x, y)| cfg.seg_pos_weight * y * softplus(-x) + (1.0 - y) * softplus(*x))
            .sum::<f64>()
            / 16.0;
        assert!((l.curve - curve).abs() < 1e-9, "curve {} vs {curve}", l.curve);
        assert!((l.query - query).abs() < 1e-9, "query {} vs {query}", l.query);
        assert!((l.seg - cfg.seg_weight * seg).abs() < 1e-9, "seg {} vs {seg}", l.seg);
        assert!((l.total - (l.curve + l.query + l.seg)).abs() < 1e-12);
    }
}

fn exact_case() -> (Values, FrameTargets) {
    let (mut v, t) = random_case(7, 4, 2);
    let m = matching(&v, &t, &LossConfig::default());
    for (gi, &p) in m.gt_to_pred.iter().enumerate() {
        for (i, pt) in t.lanes[gi].points.iter().enumerate() {
            let (x, z) = pt.unwrap_or((0.0, 0.0));
            v.xs[p * N + i] = x;
            v.zs[p * N + i] = z;
            for l in &mut v.layers {
                l.0[p * N + i] = x;
                l.1[p * N + i] = z;
            }
        }
        v.ranges[2 * p] = t.lanes[gi].boundary.0;
        v.ranges[2 * p + 1] = t.lanes[gi].boundary.1;
        for l in &mut v.layers {
            l.2[2 * p] = t.lanes[gi].boundary.0;
            l.2[2 * p + 1] = t.lanes[gi].boundary.1;
        }
    }
    for i in 0..4 {
        v.logits[i] = if m.pred_to_gt[i].is_some() { 40.0 } else { -40.0 };
    }
    (v, t)
}

#[test]
fn perfect_confident_predictions_have_zero_curve_and_query_loss() {
    let cfg = LossConfig::default();
    let (v, t) = exact_case();
    let m = matching(&v, &t, &cfg);
    let l = loss(&v, &t, &m, &cfg);
    assert!(l.curve >= 0.0 && l.curve < 1e-15, "{}", l.curve);
    assert_eq!(l.query, 0.0);
}

#[test]
fn shifting_x_by_delta_adds_alpha_n_delta_under_sum() {
    let cfg = LossConfig {
        point_reduction: PointReduction::Sum,
        ..LossConfig::default()
    };
    let (v, t) = exact_case();
    let m = matching(&v, &t, &cfg);
    let base = loss(&v, &t, &m, &cfg).curve;
    let delta = 0.37;
    let mut shifted = v.clone();
    shifted.xs.iter_mut().for_each(|x| *x += delta);
    let active: usize = t.lanes.iter().map(|l| l.active_count()).sum();
    let got = loss(&shifted, &t, &m, &cfg).curve - base;
    assert!((got - cfg.alpha_points * active as f64 * delta).abs() < 1e-9, "{got}");
}

#[test]
fn query_loss_adds_over_layers() {
    let cfg = LossConfig::default();
    let (mut v, t) = random_case(3, 4, 2);
    let m = matching(&v, &t, &cfg);
    v.layers.truncate(1);
    let one = loss(&v, &t, &m, &cfg).query;
    v.layers.push(v.layers[0].clone());
    let two = loss(&v, &t, &m, &cfg).query;
    assert_eq!(two, 2.0 * one);
    assert!(one > 0.0);
}

#[test]
fn segmentation_loss_small_when_logits_agree() {
    let cfg = LossConfig::default();
    let (mut v, mut t) = random_case(4, 3, 1);
    let m = matching(&v, &t, &cfg);
    v.seg = t.seg.iter().map(|y| if *y > 0.5 { 20.0 } else { -20.0 }).collect();
    assert!(loss(&v, &t, &m, &cfg).seg < 1e-3);
    t.seg = vec![0.0; 16];
    v.seg = vec![-20.0; 16];
    assert!(loss(&v, &t, &m, &cfg).seg < 1e-8);
}

#[test]
fn segmentation_shape_mismatch_is_an_error() {
    let cfg = LossConfig::default();
    let (v, mut t) = random_case(5, 3, 1);
    let m = matching(&v, &t, &cfg);
    t.seg = vec![0.0; 9];
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let out = output(&mut g, &v);
    assert!(frame_loss(&mut g, &out, &t, &m, &cfg).is_err());
}
