//! Lane metrics: F-score with near/far errors under a point-distance/coverage
//! rule, top-view IoU + unilateral Chamfer distance, and per-sequence stability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::lane::{uniform_y_positions, GroundTruthLane, PolyLane, WorldBox};
use crate::matching::hungarian;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_distance: f64,
    pub coverage: f64,
    pub near_far_split: f64,
    pub confidence_threshold: f64,
    /// Number of evaluation y-positions over the world span.
    pub eval_points: usize,
    pub once_iou: f64,
    pub once_cd: f64,
    /// Width of the top-view lane band used for IoU.
    pub once_lane_width: f64,
    /// Integration step (m) along y for IoU.
    pub once_step: f64,
    /// Taken from the data configuration when run through a [`crate::config::RunConfig`].
    #[serde(skip)]
    pub world: WorldBox,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_distance: 1.5,
            coverage: 0.75,
            near_far_split: 40.0,
            confidence_threshold: 0.5,
            eval_points: 100,
            once_iou: 0.3,
            once_cd: 0.3,
            once_lane_width: 1.0,
            once_step: 0.1,
            world: WorldBox::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.max_distance,
            self.once_iou,
            self.once_cd,
            self.once_lane_width,
            self.once_step,
        ];
        if pos.iter().any(|v| !(*v > 0.0)) || !(self.coverage > 0.0 && self.coverage <= 1.0) || self.eval_points < 2 {
            return Err(Error::Config(
                "eval thresholds must be positive, coverage in (0, 1] and eval_points at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn y_grid(&self) -> Vec<f64> {
        uniform_y_positions(self.eval_points, self.world.y.0, self.world.y.1)
    }
}

/// A lane sampled on the evaluation grid (`None` where it is not visible).
pub type GridLane = Vec<Option<Point3>>;

pub fn sample_pred(lane: &PolyLane, ys: &[f64]) -> GridLane {
    ys.iter().map(|&y| lane.covers(y).then(|| lane.point_at(y))).collect()
}

pub fn sample_gt(lane: &GroundTruthLane, ys: &[f64]) -> GridLane {
    lane.resample(ys)
}

fn dist3(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Pairwise statistics of a (gt, pred) pair on the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub gt_visible: usize,
    pub pred_visible: usize,
    pub joint: usize,
    pub close: usize,
    pub mean_distance: f64,
}

pub fn pair_stats(gt: &GridLane, pred: &GridLane, max_distance: f64) -> PairStats {
    let mut s = PairStats {
        gt_visible: gt.iter().flatten().count(),
        pred_visible: pred.iter().flatten().count(),
        joint: 0,
        close: 0,
        mean_distance: 0.0,
    };
    let mut sum = 0.0;
    for (g, p) in gt.iter().zip(pred) {
        if let (Some(g), Some(p)) = (g, p) {
            let d = dist3(*g, *p);
            s.joint += 1;
            sum += d;
            if d < max_distance {
                s.close += 1;
            }
        }
    }
    s.mean_distance = if s.joint > 0 {
        sum / s.joint as f64
    } else {
        f64::INFINITY
    };
    s
}

/// A pair is a match candidate when the close positions cover the required fraction of both lanes.
pub fn is_candidate(s: &PairStats, coverage: f64) -> bool {
    s.close > 0
        && s.close as f64 >= coverage * s.gt_visible as f64
        && s.close as f64 >= coverage * s.pred_visible as f64
}

const NON_CANDIDATE: f64 = 1e6;

/// One-to-one assignment maximizing the number of candidate pairs, then minimizing summed cost.
/// `cost[g][p]` is `None` for non-candidates. Returns `(gt, pred)` pairs.
pub fn max_candidate_matching(cost: &[Vec<Option<f64>>]) -> Result<Vec<(usize, usize)>> {
    if cost.is_empty() || cost[0].is_empty() {
        return Ok(Vec::new());
    }
    let dense: Vec<Vec<f64>> = cost
        .iter()
        .map(|r| r.iter().map(|c| c.unwrap_or(NON_CANDIDATE)).collect())
        .collect();
    let a = hungarian(&dense)?;
    Ok(a.row_to_col
        .iter()
        .enumerate()
        .filter_map(|(g, p)| p.filter(|p| cost[g][*p].is_some()).map(|p| (g, p)))
        .collect())
}

/// Summable per-frame counts behind the F-score report.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OpenLaneCounts {
    pub num_gt: usize,
    pub num_pred: usize,
    pub num_matched: usize,
    pub x_near_sum: f64,
    pub x_near_n: usize,
    pub x_far_sum: f64,
    pub x_far_n: usize,
    pub z_near_sum: f64,
    pub z_near_n: usize,
    pub z_far_sum: f64,
    pub z_far_n: usize,
    pub category_correct: usize,
    pub category_total: usize,
    /// Frames with neither predictions nor ground truth.
    pub empty_frames: usize,
}

impl OpenLaneCounts {
    pub fn add(&mut self, o: &OpenLaneCounts) {
        self.num_gt += o.num_gt;
        self.num_pred += o.num_pred;
        self.num_matched += o.num_matched;
        self.x_near_sum += o.x_near_sum;
        self.x_near_n += o.x_near_n;
        self.x_far_sum += o.x_far_sum;
        self.x_far_n += o.x_far_n;
        self.z_near_sum += o.z_near_sum;
        self.z_near_n += o.z_near_n;
        self.z_far_sum += o.z_far_sum;
        self.z_far_n += o.z_far_n;
        self.category_correct += o.category_correct;
        self.category_total += o.category_total;
        self.empty_frames += o.empty_frames;
    }

    pub fn report(&self) -> OpenLaneReport {
        let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
        let empty = self.num_gt == 0 && self.num_pred == 0;
        let (precision, recall, f1) = if empty {
            (1.0, 1.0, 1.0)
        } else {
            let p = if self.num_pred > 0 {
                self.num_matched as f64 / self.num_pred as f64
            } else {
                0.0
            };
            let r = if self.num_gt > 0 {
                self.num_matched as f64 / self.num_gt as f64
            } else {
                0.0
            };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f)
        };
        OpenLaneReport {
            f1,
            precision,
            recall,
            x_err_near: mean(self.x_near_sum, self.x_near_n),
            x_err_far: mean(self.x_far_sum, self.x_far_n),
            z_err_near: mean(self.z_near_sum, self.z_near_n),
            z_err_far: mean(self.z_far_sum, self.z_far_n),
            category_accuracy: (self.category_total > 0)
                .then(|| self.category_correct as f64 / self.category_total as f64),
            num_gt: self.num_gt,
            num_pred: self.num_pred,
            num_matched: self.num_matched,
            empty_f1_convention: empty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLaneReport {
    #[serde(rename = "F1")]
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub x_err_near: f64,
    pub x_err_far: f64,
    pub z_err_near: f64,
    pub z_err_far: f64,
    pub category_accuracy: Option<f64>,
    pub num_gt: usize,
    pub num_pred: usize,
    pub num_matched: usize,
    /// Set when there was nothing to evaluate and F1 = 1 by convention.
    pub empty_f1_convention: bool,
}

/// Matched pairs plus per-pair grid samples for one frame.
#[derive(Debug, Clone)]
pub struct FrameMatch {
    pub pairs: Vec<(usize, usize)>,
    pub gt_grid: Vec<GridLane>,
    pub pred_grid: Vec<GridLane>,
}

pub fn match_frame(preds: &[PolyLane], gts: &[GroundTruthLane], cfg: &EvalConfig) -> Result<FrameMatch> {
    let ys = cfg.y_grid();
    let pred_grid: Vec<GridLane> = preds.iter().map(|p| sample_pred(p, &ys)).collect();
    let gt_grid: Vec<GridLane> = gts.iter().map(|g| sample_gt(g, &ys)).collect();
    let cost: Vec<Vec<Option<f64>>> = gt_grid
        .iter()
        .map(|g| {
            pred_grid
                .iter()
                .map(|p| {
                    let s = pair_stats(g, p, cfg.max_distance);
                    is_candidate(&s, cfg.coverage).then_some(s.mean_distance)
                })
                .collect()
        })
        .collect();
    let pairs = max_candidate_matching(&cost)?;
    Ok(FrameMatch {
        pairs,
        gt_grid,
        pred_grid,
    })
}

/// Keeps predictions whose confidence reaches the threshold.
pub fn threshold(preds: &[PolyLane], cfg: &EvalConfig) -> Vec<PolyLane> {
    preds
        .iter()
        .filter(|p| p.confidence >= cfg.confidence_threshold)
        .cloned()
        .collect()
}

/// Counts for one frame; `preds` are assumed already thresholded.
pub fn openlane_counts(preds: &[PolyLane], gts: &[GroundTruthLane], cfg: &EvalConfig) -> Result<OpenLaneCounts> {
    let m = match_frame(preds, gts, cfg)?;
    let mut c = OpenLaneCounts {
        num_gt: gts.len(),
        num_pred: preds.len(),
        num_matched: m.pairs.len(),
        empty_frames: usize::from(gts.is_empty() && preds.is_empty()),
        ..Default::default()
    };
    for &(gi, pi) in &m.pairs {
        let (mut xn, mut xf, mut zn, mut zf) = ((0.0, 0), (0.0, 0), (0.0, 0), (0.0, 0));
        for (g, p) in m.gt_grid[gi].iter().zip(&m.pred_grid[pi]) {
            if let (Some(g), Some(p)) = (g, p) {
                let (dx, dz) = ((g[0] - p[0]).abs(), (g[2] - p[2]).abs());
                if g[1] < cfg.near_far_split {
                    xn = (xn.0 + dx, xn.1 + 1);
                    zn = (zn.0 + dz, zn.1 + 1);
                } else {
                    xf = (xf.0 + dx, xf.1 + 1);
                    zf = (zf.0 + dz, zf.1 + 1);
                }
            }
        }
        // Per-pair band means, averaged over pairs.
        if xn.1 > 0 {
            c.x_near_sum += xn.0 / xn.1 as f64;
            c.x_near_n += 1;
            c.z_near_sum += zn.0 / zn.1 as f64;
            c.z_near_n += 1;
        }
        if xf.1 > 0 {
            c.x_far_sum += xf.0 / xf.1 as f64;
            c.x_far_n += 1;
            c.z_far_sum += zf.0 / zf.1 as f64;
            c.z_far_n += 1;
        }
        if let (Some(a), Some(b)) = (preds[pi].category, gts[gi].category) {
            c.category_total += 1;
            c.category_correct += usize::from(a == b);
        }
    }
    Ok(c)
}

pub fn openlane_evaluate(preds: &[PolyLane], gts: &[GroundTruthLane], cfg: &EvalConfig) -> Result<OpenLaneReport> {
    Ok(openlane_counts(preds, gts, cfg)?.report())
}

/// Top-view lane band: lateral interval of width `w` around `x(y)` for y in the lane's extent.
fn band_at(lane: &[Point3], y: f64, w: f64) -> Option<(f64, f64)> {
    let first = lane.first()?;
    let last = lane.last()?;
    if y < first[1] || y > last[1] {
        return None;
    }
    let k = lane.partition_point(|p| p[1] < y).clamp(1, lane.len().max(2) - 1);
    let (a, b) = (lane[k - 1], lane[k.min(lane.len() - 1)]);
    let t = if b[1] > a[1] { (y - a[1]) / (b[1] - a[1]) } else { 0.0 };
    let x = a[0] + t * (b[0] - a[0]);
    Some((x - w / 2.0, x + w / 2.0))
}

/// Top-view IoU of two lane bands, integrated along y with the midpoint rule.
pub fn topview_iou(a: &[Point3], b: &[Point3], width: f64, step: f64) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let y0 = a[0][1].min(b[0][1]);
    let y1 = a[a.len() - 1][1].max(b[b.len() - 1][1]);
    let steps = ((y1 - y0) / step).ceil().max(1.0) as usize;
    let dy = (y1 - y0) / steps as f64;
    let (mut inter, mut union) = (0.0, 0.0);
    for i in 0..steps {
        let y = y0 + (i as f64 + 0.5) * dy;
        match (band_at(a, y, width), band_at(b, y, width)) {
            (Some(p), Some(q)) => {
                let o = (p.1.min(q.1) - p.0.max(q.0)).max(0.0);
                inter += o;
                union += (p.1 - p.0) + (q.1 - q.0) - o;
            }
            (Some(p), None) | (None, Some(p)) => union += p.1 - p.0,
            (None, None) => {}
        }
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn point_polyline_distance(p: Point3, line: &[Point3]) -> f64 {
    if line.len() == 1 {
        return dist3(p, line[0]);
    }
    line.windows(2)
        .map(|s| {
            let d = [s[1][0] - s[0][0], s[1][1] - s[0][1], s[1][2] - s[0][2]];
            let len2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let t = if len2 > 0.0 {
                (((p[0] - s[0][0]) * d[0] + (p[1] - s[0][1]) * d[1] + (p[2] - s[0][2]) * d[2]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            dist3(p, [s[0][0] + t * d[0], s[0][1] + t * d[1], s[0][2] + t * d[2]])
        })
        .fold(f64::INFINITY, f64::min)
}

/// Mean over `pred` points of the distance to the nearest point of the `gt` polyline.
pub fn unilateral_chamfer(pred: &[Point3], gt: &[Point3]) -> f64 {
    if pred.is_empty() || gt.is_empty() {
        return f64::INFINITY;
    }
    pred.iter().map(|p| point_polyline_distance(*p, gt)).sum::<f64>() / pred.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OnceCounts {
    pub num_gt: usize,
    pub num_pred: usize,
    pub num_matched: usize,
    pub cd_sum: f64,
}

impl OnceCounts {
    pub fn add(&mut self, o: &OnceCounts) {
        self.num_gt += o.num_gt;
        self.num_pred += o.num_pred;
        self.num_matched += o.num_matched;
        self.cd_sum += o.cd_sum;
    }

    pub fn report(&self) -> OnceReport {
        let empty = self.num_gt == 0 && self.num_pred == 0;
        let p = if self.num_pred > 0 {
            self.num_matched as f64 / self.num_pred as f64
        } else {
            0.0
        };
        let r = if self.num_gt > 0 {
            self.num_matched as f64 / self.num_gt as f64
        } else {
            0.0
        };
        let f1 = if empty {
            1.0
        } else if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        OnceReport {
            f1,
            precision: if empty { 1.0 } else { p },
            recall: if empty { 1.0 } else { r },
            mean_cd_error: if self.num_matched > 0 {
                self.cd_sum / self.num_matched as f64
            } else {
                0.0
            },
            num_matched: self.num_matched,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnceReport {
    #[serde(rename = "F1")]
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(rename = "mean_CD_error")]
    pub mean_cd_error: f64,
    pub num_matched: usize,
}

/// Prediction polyline sampled at the evaluation grid within its extent.
pub fn pred_polyline(lane: &PolyLane, ys: &[f64]) -> Vec<Point3> {
    sample_pred(lane, ys).into_iter().flatten().collect()
}

pub fn once_counts(preds: &[PolyLane], gts: &[GroundTruthLane], cfg: &EvalConfig) -> Result<OnceCounts> {
    let ys = cfg.y_grid();
    let pl: Vec<Vec<Point3>> = preds.iter().map(|p| pred_polyline(p, &ys)).collect();
    let cost: Vec<Vec<Option<f64>>> = gts
        .iter()
        .map(|g| {
            pl.iter()
                .map(|p| {
                    let iou = topview_iou(&g.points, p, cfg.once_lane_width, cfg.once_step);
                    (iou > cfg.once_iou).then_some(-iou)
                })
                .collect()
        })
        .collect();
    let pairs = max_candidate_matching(&cost)?;
    let mut c = OnceCounts {
        num_gt: gts.len(),
        num_pred: preds.len(),
        ..Default::default()
    };
    for (g, p) in pairs {
        let cd = unilateral_chamfer(&pl[p], &gts[g].points);
        if cd < cfg.once_cd {
            c.num_matched += 1;
            c.cd_sum += cd;
        }
    }
    Ok(c)
}

pub fn once_evaluate(preds: &[PolyLane], gts: &[GroundTruthLane], cfg: &EvalConfig) -> Result<OnceReport> {
    Ok(once_counts(preds, gts, cfg)?.report())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceStability {
    pub sequence_id: String,
    pub dist_x: Vec<f64>,
    /// Frame indices without any matched point (excluded from the series).
    pub skipped_frames: Vec<usize>,
    pub f_stab: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub sequences: Vec<SequenceStability>,
    pub mean_f_stab: f64,
}

/// Population standard deviation.
pub fn population_std(v: &[f64]) -> f64 {
    let Some(&first) = v.first() else { return 0.0 };
    let n = v.len() as f64;
    // Shifting by the first value keeps a constant series at exactly zero.
    let mean = first + v.iter().map(|x| x - first).sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean lateral error over matched pairs and shared grid positions; `None` without any term.
pub fn frame_dist_x(preds: &[PolyLane], gts: &[GroundTruthLane], cfg: &EvalConfig) -> Result<Option<f64>> {
    let m = match_frame(preds, gts, cfg)?;
    let (mut s, mut n) = (0.0, 0usize);
    for &(gi, pi) in &m.pairs {
        for (g, p) in m.gt_grid[gi].iter().zip(&m.pred_grid[pi]) {
            if let (Some(g), Some(p)) = (g, p) {
                s += (p[0] - g[0]).abs();
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| s / n as f64))
}

/// Stability of one sequence from per-frame (thresholded) predictions and ground truth.
pub fn sequence_stability(
    sequence_id: &str,
    frames: &[(Vec<PolyLane>, Vec<GroundTruthLane>)],
    cfg: &EvalConfig,
) -> Result<SequenceStability> {
    if frames.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "stability needs at least 2 frames, sequence {sequence_id} has {}",
            frames.len()
        )));
    }
    let mut dist_x = Vec::new();
    let mut skipped_frames = Vec::new();
    for (i, (p, g)) in frames.iter().enumerate() {
        match frame_dist_x(p, g, cfg)? {
            Some(d) => dist_x.push(d),
            None => skipped_frames.push(i),
        }
    }
    Ok(SequenceStability {
        sequence_id: sequence_id.to_string(),
        f_stab: population_std(&dist_x),
        dist_x,
        skipped_frames,
    })
}

pub fn stability_report(sequences: Vec<SequenceStability>) -> Result<StabilityReport> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("no sequences for stability".into()));
    }
    let mean_f_stab = sequences.iter().map(|s| s.f_stab).sum::<f64>() / sequences.len() as f64;
    Ok(StabilityReport { sequences, mean_f_stab })
}
