//! Lane representations: polynomial lanes, anchor point sets, ground-truth
//! polylines, and the sampling / fitting / clipping utilities shared by the
//! model, the losses and the metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Axis-aligned 3D range (meters) that every lane and anchor lives in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldBox {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl Default for WorldBox {
    fn default() -> Self {
        Self {
            x: (-30.0, 30.0),
            y: (3.0, 103.0),
            z: (-10.0, 10.0),
        }
    }
}

impl WorldBox {
    pub fn contains(&self, p: Point3) -> bool {
        p[0] >= self.x.0
            && p[0] <= self.x.1
            && p[1] >= self.y.0
            && p[1] <= self.y.1
            && p[2] >= self.z.0
            && p[2] <= self.z.1
    }

    pub fn y_span(&self) -> f64 {
        self.y.1 - self.y.0
    }

    pub fn clamp(&self, p: Point3) -> Point3 {
        [
            p[0].clamp(self.x.0, self.x.1),
            p[1].clamp(self.y.0, self.y.1),
            p[2].clamp(self.z.0, self.z.1),
        ]
    }

    /// Fraction of the y-span at which `y` lies.
    pub fn y_fraction(&self, y: f64) -> f64 {
        (y - self.y.0) / self.y_span()
    }

    pub fn y_at_fraction(&self, f: f64) -> f64 {
        self.y.0 + f * self.y_span()
    }
}

/// `n` positions uniformly spaced over `[y_min, y_max]`, both ends included.
pub fn uniform_y_positions(n: usize, y_min: f64, y_max: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![y_min],
        _ => (0..n)
            .map(|i| y_min + (y_max - y_min) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Lane as `x(y)` and `z(y)` polynomials of order `R` over `[y_start, y_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyLane {
    pub confidence: f64,
    pub y_start: f64,
    pub y_end: f64,
    /// `a_0..a_R`, lowest order first.
    pub coeffs_x: Vec<f64>,
    /// `b_0..b_R`, lowest order first.
    pub coeffs_z: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<i64>,
}

impl PolyLane {
    pub fn order(&self) -> usize {
        self.coeffs_x.len().saturating_sub(1)
    }

    pub fn point_at(&self, y: f64) -> Point3 {
        [horner(&self.coeffs_x, y), y, horner(&self.coeffs_z, y)]
    }

    pub fn covers(&self, y: f64) -> bool {
        y >= self.y_start && y <= self.y_end
    }
}

pub fn horner(coeffs: &[f64], y: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * y + c)
}

/// Evaluates the lane at every requested y, ignoring its own `[y_start, y_end]`.
pub fn sample_lane_points(lane: &PolyLane, y_positions: &[f64]) -> Vec<Point3> {
    y_positions.iter().map(|&y| lane.point_at(y)).collect()
}

/// Least-squares `x(y)` and `z(y)` polynomials of order `order`.
pub fn fit_polynomials(points: &[Point3], order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = points.len();
    let terms = order + 1;
    let mut ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    if ys.len() < terms {
        return Err(Error::RankDeficient(format!(
            "{} distinct y values for {} coefficients",
            ys.len(),
            terms
        )));
    }
    // Fit in a centered/scaled variable t = (y - c) / s for conditioning, then expand.
    let c = (ys[0] + ys[ys.len() - 1]) / 2.0;
    let s = ((ys[ys.len() - 1] - ys[0]) / 2.0).max(f64::MIN_POSITIVE);
    let a = DMatrix::from_fn(n, terms, |i, j| ((points[i][1] - c) / s).powi(j as i32));
    let bx = DVector::from_iterator(n, points.iter().map(|p| p[0]));
    let bz = DVector::from_iterator(n, points.iter().map(|p| p[2]));
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-12) {
        return Err(Error::RankDeficient(format!(
            "design matrix condition {:.3e}",
            smax / smin
        )));
    }
    let tol = smax * 1e-14;
    let tx = svd.solve(&bx, tol).map_err(|e| Error::RankDeficient(e.to_string()))?;
    let tz = svd.solve(&bz, tol).map_err(|e| Error::RankDeficient(e.to_string()))?;
    Ok((
        expand_scaled_basis(tx.as_slice(), c, s),
        expand_scaled_basis(tz.as_slice(), c, s),
    ))
}

/// Converts coefficients of `Σ k_j ((y - c)/s)^j` into plain monomial coefficients in `y`.
pub fn expand_scaled_basis(k: &[f64], c: f64, s: f64) -> Vec<f64> {
    let m = k.len();
    let mut out = vec![0.0; m];
    for (j, &kj) in k.iter().enumerate() {
        let scale = kj / s.powi(j as i32);
        // (y - c)^j = Σ_i C(j,i) y^i (-c)^(j-i)
        let mut binom = 1.0;
        for i in 0..=j {
            out[i] += scale * binom * (-c).powi((j - i) as i32);
            binom = binom * (j - i) as f64 / (i + 1) as f64;
        }
    }
    out
}

/// Ordered anchor points at fixed y-positions plus the normalized `(start, end)` range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPointSet {
    pub points: Vec<Point3>,
    pub range: (f64, f64),
}

impl AnchorPointSet {
    pub fn new(points: Vec<Point3>, range: (f64, f64)) -> Result<Self> {
        if !(0.0 <= range.0 && range.0 < range.1 && range.1 <= 1.0) {
            return Err(Error::Config(format!("invalid anchor range {range:?}")));
        }
        if points.windows(2).any(|w| w[1][1] <= w[0][1]) {
            return Err(Error::Config("anchor y-positions must be strictly increasing".into()));
        }
        Ok(Self { points, range })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn active_mask(&self, world: &WorldBox) -> Vec<bool> {
        let ys: Vec<f64> = self.points.iter().map(|p| p[1]).collect();
        clip_points_to_range(&ys, self.range, world.y.0, world.y_span())
    }
}

const RANGE_TOL: f64 = 1e-9;

/// Active-point mask for a normalized range: start inclusive, end exclusive,
/// except that an end at the top of the span includes the last position.
pub fn clip_points_to_range(y_positions: &[f64], range: (f64, f64), y_min: f64, y_span: f64) -> Vec<bool> {
    let (s, e) = range;
    y_positions
        .iter()
        .map(|&y| {
            let f = (y - y_min) / y_span;
            f >= s - RANGE_TOL && (f < e - RANGE_TOL || (e >= 1.0 - RANGE_TOL && f <= 1.0 + RANGE_TOL))
        })
        .collect()
}

/// Ground-truth lane: y-sorted 3D polyline with its longitudinal boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLane {
    pub points: Vec<Point3>,
    pub y_start: f64,
    pub y_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<i64>,
}

impl GroundTruthLane {
    /// Sorts the points by y and takes the boundary from the first and last point.
    pub fn from_points(mut points: Vec<Point3>, category: Option<i64>, track_id: Option<i64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Schema {
                path: "lanes[].points".into(),
                message: format!("a lane needs at least 2 points, got {}", points.len()),
            });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Schema {
                path: "lanes[].points".into(),
                message: "non-finite coordinate".into(),
            });
        }
        points.sort_by(|a, b| a[1].total_cmp(&b[1]));
        let y_start = points[0][1];
        let y_end = points[points.len() - 1][1];
        Ok(Self {
            points,
            y_start,
            y_end,
            category,
            track_id,
        })
    }

    pub fn covers(&self, y: f64) -> bool {
        y >= self.y_start && y <= self.y_end
    }

    /// Piecewise-linear resampling clamped to the lane's own extent.
    pub fn resample(&self, y_positions: &[f64]) -> Vec<Option<Point3>> {
        resample_linear(&self.points, y_positions)
    }
}

fn lerp3(a: Point3, b: Point3, y: f64) -> Point3 {
    let dy = b[1] - a[1];
    let t = if dy.abs() > 0.0 { (y - a[1]) / dy } else { 0.0 };
    [a[0] + t * (b[0] - a[0]), y, a[2] + t * (b[2] - a[2])]
}

/// Linear interpolation of a y-sorted polyline; `None` outside its y-extent.
pub fn resample_linear(points: &[Point3], y_positions: &[f64]) -> Vec<Option<Point3>> {
    y_positions
        .iter()
        .map(|&y| {
            if points.is_empty() {
                return None;
            }
            let first = points[0];
            let last = points[points.len() - 1];
            if y < first[1] || y > last[1] {
                return None;
            }
            if points.len() == 1 {
                return Some(first);
            }
            // First segment whose upper end reaches y.
            let k = points.partition_point(|p| p[1] < y).clamp(1, points.len() - 1);
            Some(lerp3(points[k - 1], points[k], y))
        })
        .collect()
}

/// Linear interpolation that extends the first/last segment outside the y-extent.
pub fn resample_linear_extrapolate(points: &[Point3], y_positions: &[f64]) -> Vec<Point3> {
    assert!(points.len() >= 2, "need at least two points to extrapolate");
    y_positions
        .iter()
        .map(|&y| {
            let k = points.partition_point(|p| p[1] < y).clamp(1, points.len() - 1);
            lerp3(points[k - 1], points[k], y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lane(cx: Vec<f64>, cz: Vec<f64>) -> PolyLane {
        PolyLane {
            confidence: 1.0,
            y_start: 3.0,
            y_end: 103.0,
            coeffs_x: cx,
            coeffs_z: cz,
            category: None,
        }
    }

    #[test]
    fn sample_constant_and_identity() {
        let l = lane(vec![1.5, 0.0, 0.0, 0.0], vec![0.0; 4]);
        assert_eq!(sample_lane_points(&l, &[10.0]), vec![[1.5, 10.0, 0.0]]);
        let l = lane(vec![0.0, 1.0, 0.0, 0.0], vec![0.0; 4]);
        assert_eq!(sample_lane_points(&l, &[7.0]), vec![[7.0, 7.0, 0.0]]);
    }

    #[test]
    fn sample_cubic_matches_horner_by_hand() {
        let c = [0.1, 0.02, -0.001, 0.0001];
        let y: f64 = 20.0;
        // ((c3*y + c2)*y + c1)*y + c0
        let expect = ((c[3] * y + c[2]) * y + c[1]) * y + c[0];
        let l = lane(c.to_vec(), vec![0.0; 4]);
        assert_abs_diff_eq!(sample_lane_points(&l, &[y])[0][0], expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 0.1 + 0.4 - 0.4 + 0.8, epsilon = 1e-12);
    }

    #[test]
    fn fit_recovers_line() {
        let pts: Vec<Point3> = (0..5)
            .map(|i| {
                let y = 5.0 + 10.0 * i as f64;
                [2.0 + 0.5 * y, y, 0.0]
            })
            .collect();
        let (cx, cz) = fit_polynomials(&pts, 3).unwrap();
        let expect = [2.0, 0.5, 0.0, 0.0];
        for (a, b) in cx.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        assert!(cz.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn fit_interpolates_four_points() {
        let pts = [[1.0, 3.0, 0.5], [-2.0, 10.0, 1.0], [0.5, 40.0, -0.3], [4.0, 90.0, 2.0]];
        let (cx, cz) = fit_polynomials(&pts, 3).unwrap();
        for p in pts {
            assert_abs_diff_eq!(horner(&cx, p[1]), p[0], epsilon = 1e-9);
            assert_abs_diff_eq!(horner(&cz, p[1]), p[2], epsilon = 1e-9);
        }
    }

    #[test]
    fn fit_noisy_matches_normal_equations() {
        // Normal equations with the raw Vandermonde matrix, solved independently.
        let pts: Vec<Point3> = (0..12)
            .map(|i| {
                let y = 3.0 + 8.0 * i as f64;
                let noise = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
                [1.0 + 0.05 * y - 0.0004 * y * y + 0.3 * noise, y, 0.2 * noise]
            })
            .collect();
        let order = 2;
        let a = DMatrix::from_fn(pts.len(), order + 1, |i, j| pts[i][1].powi(j as i32));
        let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p[0]));
        let ata = a.transpose() * &a;
        let atb = a.transpose() * b;
        let oracle = ata.lu().solve(&atb).unwrap();
        let (cx, _) = fit_polynomials(&pts, order).unwrap();
        for j in 0..=order {
            assert_abs_diff_eq!(cx[j], oracle[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn fit_rejects_duplicate_y() {
        let pts = [[0.0, 5.0, 0.0], [1.0, 5.0, 0.0], [2.0, 6.0, 0.0], [3.0, 6.0, 0.0]];
        assert!(matches!(fit_polynomials(&pts, 3), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn clip_ranges() {
        let ys = uniform_y_positions(40, 3.0, 103.0);
        let count = |r| clip_points_to_range(&ys, r, 3.0, 100.0).iter().filter(|a| **a).count();
        assert_eq!(count((0.0, 1.0)), 40);
        // Fractions i/39 below 0.5 are i = 0..=19.
        let half = clip_points_to_range(&ys, (0.0, 0.5), 3.0, 100.0);
        assert!(half[..20].iter().all(|a| *a) && half[20..].iter().all(|a| !*a));
        // Only i = 10 (0.2564) falls in [0.25, 0.275).
        assert_eq!(count((0.25, 0.25 + 1.0 / 40.0)), 1);
    }

    #[test]
    fn resample_linear_inside_and_outside() {
        let pts = [[0.0, 10.0, 0.0], [2.0, 20.0, 1.0]];
        let r = resample_linear(&pts, &[5.0, 15.0, 20.0, 25.0]);
        assert_eq!(r[0], None);
        assert_eq!(r[1], Some([1.0, 15.0, 0.5]));
        assert_eq!(r[2], Some([2.0, 20.0, 1.0]));
        assert_eq!(r[3], None);
        let e = resample_linear_extrapolate(&pts, &[0.0, 30.0]);
        assert_eq!(e, vec![[-2.0, 0.0, -1.0], [4.0, 30.0, 2.0]]);
    }

    proptest! {
        #[test]
        fn sample_fit_round_trip(
            a in prop::array::uniform4(-1.0f64..1.0),
            b in prop::array::uniform4(-1.0f64..1.0),
        ) {
            // Coefficients given in the normalized variable t = (y - 53) / 50 keep values bounded.
            let cx = expand_scaled_basis(&[a[0] * 10.0, a[1] * 5.0, a[2], a[3]], 53.0, 50.0);
            let cz = expand_scaled_basis(&[b[0], b[1], b[2], b[3]], 53.0, 50.0);
            let l = lane(cx.clone(), cz.clone());
            let ys = uniform_y_positions(40, 3.0, 103.0);
            let (fx, fz) = fit_polynomials(&sample_lane_points(&l, &ys), 3).unwrap();
            for j in 0..4 {
                prop_assert!((fx[j] - cx[j]).abs() <= 1e-8, "x coeff {j}: {} vs {}", fx[j], cx[j]);
                prop_assert!((fz[j] - cz[j]).abs() <= 1e-8, "z coeff {j}: {} vs {}", fz[j], cz[j]);
            }
        }

        #[test]
        fn clip_monotone_in_width(s in 0.0f64..0.9, w1 in 0.01f64..0.5, extra in 0.0f64..0.5) {
            let ys = uniform_y_positions(40, 3.0, 103.0);
            let e1 = (s + w1).min(1.0);
            let e2 = (e1 + extra).min(1.0);
            let c1 = clip_points_to_range(&ys, (s, e1), 3.0, 100.0).iter().filter(|a| **a).count();
            let c2 = clip_points_to_range(&ys, (s, e2), 3.0, 100.0).iter().filter(|a| **a).count();
            prop_assert!(c2 >= c1);
        }
    }
}
