//! Training objective: curve loss on the final predictions, deep supervision of
//! every layer's refined anchors and range, and the auxiliary segmentation loss.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::matching::{match_predictions, GtTarget, LossConfig, MatchResult, PointReduction};
use crate::model::{pool_mask, ForwardOutput, LaneModel};
use crate::synth::FrameSample;

/// Supervision for one frame, resampled to the model's grids.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub lanes: Vec<GtTarget>,
    /// Max-pooled lane mask at the segmentation head's resolution.
    pub seg: Vec<f64>,
    pub seg_shape: (usize, usize),
}

impl FrameTargets {
    pub fn new(model: &LaneModel, frame: &FrameSample) -> Self {
        let lanes = frame
            .lanes
            .iter()
            .map(|l| GtTarget::new(l, &model.y_grid, &model.world))
            .filter(|t| t.active_count() > 0)
            .collect();
        let (h, w) = model.cfg.level_shapes(frame.rig.height(), frame.rig.width())[0];
        let seg = pool_mask(&frame.seg_mask, model.cfg.backbone.first_stride, h, w);
        Self {
            lanes,
            seg,
            seg_shape: (h, w),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub curve: Var,
    pub query: Var,
    pub seg: Var,
}

/// Plain values of [`LossTerms`].
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub curve: f64,
    pub query: f64,
    pub seg: f64,
}

impl LossValues {
    pub fn read(g: &Graph, t: &LossTerms) -> Self {
        Self {
            total: g.value(t.total).data[0],
            curve: g.value(t.curve).data[0],
            query: g.value(t.query).data[0],
            seg: g.value(t.seg).data[0],
        }
    }

    pub fn add(&mut self, o: &LossValues) {
        self.total += o.total;
        self.curve += o.curve;
        self.query += o.query;
        self.seg += o.seg;
    }

    pub fn scale(&mut self, k: f64) {
        self.total *= k;
        self.curve *= k;
        self.query *= k;
        self.seg *= k;
    }
}

/// Matching on the final-layer outputs (values only).
pub fn match_frame(
    g: &Graph,
    model: &LaneModel,
    out: &ForwardOutput,
    targets: &FrameTargets,
    cfg: &LossConfig,
) -> Result<MatchResult> {
    let preds = model.summaries(g, out);
    match_predictions(&preds, &targets.lanes, cfg)
}

/// Point and boundary L1 terms for the matched pairs.
#[allow(clippy::too_many_arguments)]
fn geometry_terms(
    g: &mut Graph,
    xs: Var,
    zs: Var,
    range: Var,
    m: &MatchResult,
    targets: &FrameTargets,
    alpha_points: f64,
    alpha_boundary: f64,
    reduction: PointReduction,
) -> Option<Var> {
    if m.gt_to_pred.is_empty() {
        return None;
    }
    let n = g.shape(xs)[1];
    let gcount = m.gt_to_pred.len();
    let mut tx = vec![0.0; gcount * n];
    let mut tz = vec![0.0; gcount * n];
    let mut w = vec![0.0; gcount * n];
    let mut tb = vec![0.0; gcount * 2];
    for (gi, t) in targets.lanes.iter().enumerate() {
        let active = t.active_count().max(1) as f64;
        let per = match reduction {
            PointReduction::Mean => alpha_points / active,
            PointReduction::Sum => alpha_points,
        };
        for (ni, p) in t.points.iter().enumerate() {
            if let Some((x, z)) = p {
                tx[gi * n + ni] = -x;
                tz[gi * n + ni] = -z;
                w[gi * n + ni] = per;
            }
        }
        tb[2 * gi] = -t.boundary.0;
        tb[2 * gi + 1] = -t.boundary.1;
    }
    let sx = g.select_rows(xs, m.gt_to_pred.clone());
    let sz = g.select_rows(zs, m.gt_to_pred.clone());
    let dx = g.add_const(sx, &tx);
    let dz = g.add_const(sz, &tz);
    let ax = g.abs(dx);
    let az = g.abs(dz);
    let wx = g.mul_const(ax, w.clone());
    let wz = g.mul_const(az, w);
    let sr = g.select_rows(range, m.gt_to_pred.clone());
    let dr = g.add_const(sr, &tb);
    let ar = g.abs(dr);
    let br = g.scale(ar, alpha_boundary);
    let parts = g.concat(&[wx, wz, br]);
    Some(g.sum(parts))
}

/// Curve (classification + geometry), query (per-layer) and segmentation losses for one frame.
pub fn frame_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    targets: &FrameTargets,
    m: &MatchResult,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let q = out.num_queries;
    if m.pred_to_gt.len() != q {
        return Err(Error::Shape(format!(
            "match covers {} predictions, model has {q}",
            m.pred_to_gt.len()
        )));
    }
    // −α₁ log p for matched queries, −α₁ log(1 − p) for the background ones, via stable softplus.
    let sign: Vec<f64> = m
        .pred_to_gt
        .iter()
        .map(|a| if a.is_some() { -1.0 } else { 1.0 })
        .collect();
    let weight: Vec<f64> = m
        .pred_to_gt
        .iter()
        .map(|a| {
            if a.is_some() {
                cfg.alpha_class
            } else {
                cfg.alpha_class * cfg.negative_class_weight
            }
        })
        .collect();
    let signed = g.mul_const(out.conf_logit, sign);
    let nll = g.softplus(signed);
    let nll = g.mul_const(nll, weight);
    let class = g.sum(nll);
    let curve = match geometry_terms(
        g,
        out.curve_x,
        out.curve_z,
        out.range,
        m,
        targets,
        cfg.alpha_points,
        cfg.alpha_boundary,
        cfg.point_reduction,
    ) {
        Some(geo) => g.add(class, geo),
        None => class,
    };

    let mut query = g.constant(Tensor::scalar(0.0));
    for l in &out.layers {
        if let Some(t) = geometry_terms(
            g,
            l.anchor_x,
            l.anchor_z,
            l.range,
            m,
            targets,
            cfg.alpha_query_points,
            cfg.alpha_query_boundary,
            cfg.point_reduction,
        ) {
            query = g.add(query, t);
        }
    }

    let seg_n = g.value(out.seg_logits).numel();
    if seg_n != targets.seg.len() {
        return Err(Error::Shape(format!(
            "segmentation logits have {seg_n} cells, target has {}",
            targets.seg.len()
        )));
    }
    let seg = g.bce_with_logits(out.seg_logits, targets.seg.clone(), cfg.seg_pos_weight);
    let seg = g.scale(seg, cfg.seg_weight);
    let cq = g.add(curve, query);
    let total = g.add(cq, seg);
    Ok(LossTerms {
        total,
        curve,
        query,
        seg,
    })
}
