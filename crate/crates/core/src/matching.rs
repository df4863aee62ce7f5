//! Bipartite matching between curve predictions and ground-truth lanes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lane::{GroundTruthLane, WorldBox};

/// How the per-lane L1 point distance is reduced over the active grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointReduction {
    /// Divide by the number of active points.
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha_class: f64,
    pub alpha_points: f64,
    pub alpha_boundary: f64,
    pub alpha_query_points: f64,
    pub alpha_query_boundary: f64,
    pub seg_weight: f64,
    pub seg_pos_weight: f64,
    /// Weight on the background (`ĉ = 0`) classification terms.
    pub negative_class_weight: f64,
    pub point_reduction: PointReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_class: 2.0,
            alpha_points: 5.0,
            alpha_boundary: 2.0,
            alpha_query_points: 2.0,
            alpha_query_boundary: 2.0,
            seg_weight: 1.0,
            seg_pos_weight: 10.0,
            negative_class_weight: 1.0,
            point_reduction: PointReduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.alpha_class,
            self.alpha_points,
            self.alpha_boundary,
            self.alpha_query_points,
            self.alpha_query_boundary,
            self.seg_weight,
            self.seg_pos_weight,
            self.negative_class_weight,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Optimal assignment of a rectangular cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<Option<usize>>,
    pub total: f64,
}

/// Minimum-cost assignment of `min(rows, cols)` pairs (Hungarian algorithm with potentials).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    for (r, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(Error::Shape(format!(
                "cost row {r} has {} entries, expected {m}",
                row.len()
            )));
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCost { row: r, col: c });
        }
    }
    if n == 0 || m == 0 {
        return Ok(Assignment {
            row_to_col: vec![None; n],
            total: 0.0,
        });
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let a = hungarian(&t)?;
        let mut row_to_col = vec![None; n];
        for (j, i) in a.row_to_col.iter().enumerate() {
            if let Some(i) = i {
                row_to_col[*i] = Some(j);
            }
        }
        return Ok(Assignment {
            row_to_col,
            total: a.total,
        });
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = Some(j - 1);
        }
    }
    let total = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| cost[i][c]))
        .sum();
    Ok(Assignment { row_to_col, total })
}

/// A ground-truth lane resampled onto the model's y-grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTarget {
    /// `(x, z)` at each grid position inside the lane's extent.
    pub points: Vec<Option<(f64, f64)>>,
    /// `(start, end)` as fractions of the world y-span, clamped to `[0, 1]`.
    pub boundary: (f64, f64),
}

impl GtTarget {
    pub fn new(gt: &GroundTruthLane, y_grid: &[f64], world: &WorldBox) -> Self {
        let points = gt
            .resample(y_grid)
            .into_iter()
            .map(|p| p.map(|p| (p[0], p[2])))
            .collect();
        let boundary = (
            world.y_fraction(gt.y_start).clamp(0.0, 1.0),
            world.y_fraction(gt.y_end).clamp(0.0, 1.0),
        );
        Self { points, boundary }
    }

    pub fn active_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }
}

/// Plain-value view of one prediction used for matching.
#[derive(Debug, Clone, PartialEq)]
pub struct PredSummary {
    /// Foreground probability.
    pub prob: f64,
    pub xs: Vec<f64>,
    pub zs: Vec<f64>,
    /// Normalized `(start, end)`.
    pub range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub class: f64,
    pub points: f64,
    pub boundary: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.class + self.points + self.boundary
    }
}

/// L1 distance between predicted and target points over the target's active grid positions.
pub fn point_l1(xs: &[f64], zs: &[f64], target: &GtTarget, reduction: PointReduction) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (i, p) in target.points.iter().enumerate() {
        if let Some((x, z)) = p {
            s += (xs[i] - x).abs() + (zs[i] - z).abs();
            n += 1;
        }
    }
    match reduction {
        PointReduction::Sum => s,
        PointReduction::Mean if n > 0 => s / n as f64,
        PointReduction::Mean => 0.0,
    }
}

pub fn boundary_l1(range: (f64, f64), target: &GtTarget) -> f64 {
    (range.0 - target.boundary.0).abs() + (range.1 - target.boundary.1).abs()
}

/// Matching cost of one prediction against a real lane (`Some`) or a padding entry (`None`).
pub fn pairwise_cost(pred: &PredSummary, target: Option<&GtTarget>, cfg: &LossConfig) -> CostBreakdown {
    match target {
        None => CostBreakdown {
            class: -cfg.alpha_class * (1.0 - pred.prob),
            ..Default::default()
        },
        Some(t) => CostBreakdown {
            class: -cfg.alpha_class * pred.prob,
            points: cfg.alpha_points * point_l1(&pred.xs, &pred.zs, t, cfg.point_reduction),
            boundary: cfg.alpha_boundary * boundary_l1(pred.range, t),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Prediction index assigned to each real ground truth.
    pub gt_to_pred: Vec<usize>,
    /// Real ground-truth index assigned to each prediction, if any.
    pub pred_to_gt: Vec<Option<usize>>,
    /// Cost terms of each real (gt, pred) pair.
    pub pair_costs: Vec<CostBreakdown>,
    /// Total over the padded problem.
    pub total: f64,
}

/// Matches predictions to ground truths padded with background entries to the prediction count.
pub fn match_predictions(preds: &[PredSummary], gts: &[GtTarget], cfg: &LossConfig) -> Result<MatchResult> {
    let q = preds.len();
    if gts.len() > q {
        return Err(Error::Shape(format!(
            "{} ground-truth lanes exceed the {q} predictions",
            gts.len()
        )));
    }
    let breakdown: Vec<Vec<CostBreakdown>> = (0..q)
        .map(|g| {
            let t = gts.get(g);
            preds.iter().map(|p| pairwise_cost(p, t, cfg)).collect()
        })
        .collect();
    let cost: Vec<Vec<f64>> = breakdown
        .iter()
        .map(|r| r.iter().map(CostBreakdown::total).collect())
        .collect();
    let a = hungarian(&cost)?;
    let mut gt_to_pred = Vec::with_capacity(gts.len());
    let mut pred_to_gt = vec![None; q];
    let mut pair_costs = Vec::with_capacity(gts.len());
    for g in 0..gts.len() {
        let p = a.row_to_col[g].expect("square problem assigns every row");
        gt_to_pred.push(p);
        pred_to_gt[p] = Some(g);
        pair_costs.push(breakdown[g][p]);
    }
    Ok(MatchResult {
        gt_to_pred,
        pred_to_gt,
        pair_costs,
        total: a.total,
    })
}
