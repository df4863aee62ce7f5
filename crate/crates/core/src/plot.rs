//! Static SVG figures: top and side views of predictions against ground truth,
//! per-layer anchor traces and per-sequence lateral-error series.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::SequenceStability;
use crate::geometry::Point3;
use crate::lane::{GroundTruthLane, WorldBox};
use crate::model::LanePrediction;

const GT_COLOR: &str = "#1f77b4";
const PRED_COLOR: &str = "#d62728";
const ANCHOR_COLOR: &str = "#ff7f0e";

/// A plot area mapping data coordinates onto a fixed-size SVG.
pub struct Figure {
    width: f64,
    height: f64,
    margin: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
    body: String,
}

impl Figure {
    pub fn new(title: &str, x_label: &str, y_label: &str, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let mut f = Self {
            width: 480.0,
            height: 640.0,
            margin: 50.0,
            x_range,
            y_range,
            body: String::new(),
        };
        f.frame(title, x_label, y_label);
        f
    }

    pub fn wide(title: &str, x_label: &str, y_label: &str, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let mut f = Self {
            width: 720.0,
            height: 360.0,
            margin: 50.0,
            x_range,
            y_range,
            body: String::new(),
        };
        f.frame(title, x_label, y_label);
        f
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let w = self.width - 2.0 * self.margin;
        let h = self.height - 2.0 * self.margin;
        (
            self.margin + (x - x0) / (x1 - x0) * w,
            self.height - self.margin - (y - y0) / (y1 - y0) * h,
        )
    }

    fn frame(&mut self, title: &str, x_label: &str, y_label: &str) {
        let (m, w, h) = (self.margin, self.width, self.height);
        let _ = write!(
            self.body,
            r##"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            w - 2.0 * m,
            h - 2.0 * m
        );
        let _ = write!(
            self.body,
            r##"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"##,
            w / 2.0,
            escape(title)
        );
        let _ = write!(
            self.body,
            r##"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"##,
            w / 2.0,
            h - 10.0,
            escape(x_label)
        );
        let _ = write!(
            self.body,
            r##"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"##,
            h / 2.0,
            h / 2.0,
            escape(y_label)
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = self.x_range.0 + t * (self.x_range.1 - self.x_range.0);
            let yv = self.y_range.0 + t * (self.y_range.1 - self.y_range.0);
            let (px, _) = self.px(xv, self.y_range.0);
            let (_, py) = self.px(self.x_range.0, yv);
            let _ = write!(
                self.body,
                r##"<text x="{px:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"##,
                h - m + 14.0,
                tick(xv)
            );
            let _ = write!(
                self.body,
                r##"<text x="{:.1}" y="{py:.1}" text-anchor="end" font-size="10">{}</text>"##,
                m - 4.0,
                tick(yv)
            );
        }
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], color: &str, width: f64, dashed: bool) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (a, b) = self.px(x, y);
                format!("{a:.2},{b:.2}")
            })
            .collect();
        let dash = if dashed { r##" stroke-dasharray="6 4""## } else { "" };
        let _ = write!(
            self.body,
            r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}"{dash}/>"##,
            coords.join(" ")
        );
    }

    pub fn dots(&mut self, pts: &[(f64, f64)], color: &str, r: f64) {
        for &(x, y) in pts {
            let (a, b) = self.px(x, y);
            let _ = write!(
                self.body,
                r##"<circle cx="{a:.2}" cy="{b:.2}" r="{r}" fill="{color}"/>"##
            );
        }
    }

    pub fn note(&mut self, text: &str) {
        let _ = write!(
            self.body,
            r##"<text x="{}" y="{}" font-size="12">{}</text>"##,
            self.margin + 6.0,
            self.margin + 16.0,
            escape(text)
        );
    }

    pub fn legend(&mut self, entries: &[(&str, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = self.margin + 34.0 + 16.0 * i as f64;
            let x = self.width - self.margin - 110.0;
            let _ = write!(
                self.body,
                r##"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="11">{}</text>"##,
                x + 20.0,
                x + 26.0,
                y + 4.0,
                escape(label)
            );
        }
    }

    pub fn to_svg(&self) -> String {
        format!(
            r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}"><rect width="100%" height="100%" fill="white"/>{}</svg>"##,
            self.body,
            w = self.width,
            h = self.height
        )
    }

    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        fs::write(path, self.to_svg()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path.to_path_buf())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick(v: f64) -> String {
    if v.abs() >= 10.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Sampled points of a predicted lane within its range, 1 m apart.
fn pred_points(p: &LanePrediction) -> Vec<Point3> {
    let l = &p.lane;
    let n = ((l.y_end - l.y_start).max(0.0).ceil() as usize).max(1);
    (0..=n)
        .map(|i| l.point_at(l.y_start + (l.y_end - l.y_start) * i as f64 / n as f64))
        .collect()
}

/// Writes top view, side view and one anchor-trace figure for each of `layers` decoder layers.
pub fn plot_frame(
    dir: &Path,
    title: &str,
    preds: &[LanePrediction],
    gts: &[GroundTruthLane],
    world: &WorldBox,
    layers: usize,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut files = Vec::new();
    let legend = [("ground truth", GT_COLOR), ("prediction", PRED_COLOR)];

    let mut top = Figure::new(&format!("{title}: top view"), "x (m)", "y (m)", world.x, world.y);
    let mut side = Figure::wide(&format!("{title}: side view"), "y (m)", "z (m)", world.y, world.z);
    for g in gts {
        top.polyline(
            &g.points.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>(),
            GT_COLOR,
            2.0,
            false,
        );
        side.polyline(
            &g.points.iter().map(|p| (p[1], p[2])).collect::<Vec<_>>(),
            GT_COLOR,
            2.0,
            false,
        );
    }
    for p in preds {
        let pts = pred_points(p);
        top.polyline(
            &pts.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>(),
            PRED_COLOR,
            1.5,
            true,
        );
        side.polyline(
            &pts.iter().map(|p| (p[1], p[2])).collect::<Vec<_>>(),
            PRED_COLOR,
            1.5,
            true,
        );
    }
    top.legend(&legend);
    side.legend(&legend);
    files.push(top.save(&dir.join("topview.svg"))?);
    files.push(side.save(&dir.join("sideview.svg"))?);

    for l in 0..layers {
        let mut fig = Figure::new(
            &format!("{title}: anchors after layer {}", l + 1),
            "x (m)",
            "y (m)",
            world.x,
            world.y,
        );
        for g in gts {
            fig.polyline(
                &g.points.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>(),
                GT_COLOR,
                2.0,
                false,
            );
        }
        for p in preds {
            if let Some(a) = p.layer_anchors.get(l) {
                let mask = a.active_mask(world);
                let pts: Vec<(f64, f64)> = a
                    .points
                    .iter()
                    .zip(&mask)
                    .filter(|(_, m)| **m)
                    .map(|(p, _)| (p[0], p[1]))
                    .collect();
                fig.dots(&pts, ANCHOR_COLOR, 2.5);
            }
        }
        fig.legend(&[("ground truth", GT_COLOR), ("anchor points", ANCHOR_COLOR)]);
        files.push(fig.save(&dir.join(format!("layer_{:02}.svg", l + 1)))?);
    }
    Ok(files)
}

/// Lateral-error series of one sequence with its standard deviation.
pub fn plot_stability(path: &Path, s: &SequenceStability, frames: usize) -> Result<PathBuf> {
    let idx: Vec<usize> = (0..frames).filter(|i| !s.skipped_frames.contains(i)).collect();
    let pts: Vec<(f64, f64)> = idx.iter().zip(&s.dist_x).map(|(&i, &d)| (i as f64, d)).collect();
    let ymax = s.dist_x.iter().copied().fold(0.0, f64::max).max(1e-3) * 1.2;
    let mut fig = Figure::wide(
        &format!("{}: lateral error per frame", s.sequence_id),
        "frame",
        "dist_x (m)",
        (0.0, (frames.max(2) - 1) as f64),
        (0.0, ymax),
    );
    fig.polyline(&pts, PRED_COLOR, 1.5, false);
    fig.dots(&pts, PRED_COLOR, 2.5);
    fig.note(&format!("F_stab = {:.4} m", s.f_stab));
    fig.save(path)
}
